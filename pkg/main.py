#!/usr/bin/env python3
"""Convenience wrapper so `python main.py <command>` runs the mlkbf CLI."""

from mlkbf.cli.main import main

if __name__ == "__main__":
    main()
