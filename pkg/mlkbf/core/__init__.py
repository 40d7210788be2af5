"""Numerical core for mlkbf."""
