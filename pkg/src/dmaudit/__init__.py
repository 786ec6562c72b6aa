"""Audit tooling for hash-named media URLs: probing, reassembly, archiving."""

__version__ = "0.1.0"
