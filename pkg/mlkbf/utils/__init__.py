"""Utility modules for mlkbf."""
