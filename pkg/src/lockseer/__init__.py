"""lockseer: next-lock prediction over database lock acquisition streams."""

__version__ = "0.1.0"
