"""Collector-based Byzantine fault-tolerant replication over a key-value store."""

__version__ = "0.1.0"
