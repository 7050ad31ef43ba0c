"""Relation-aware approval model for access-control requests."""

__version__ = "0.1.0"
