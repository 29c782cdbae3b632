"""Desk-scale laboratory for multi-task model merging under backdoor threat."""

__version__ = "0.1.0"
