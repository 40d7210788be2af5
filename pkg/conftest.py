"""Shared pytest setup: quiet structured logging for library calls made by tests."""

from mlkbf.utils.logging import configure_logging

configure_logging("warning")
