"""CLI interface for mlkbf."""
