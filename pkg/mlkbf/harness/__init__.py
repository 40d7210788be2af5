"""Experiment orchestration for mlkbf."""
