"""Data-free sparse network construction: PHEW walks, SynFlow scores and path diagnostics."""

__version__ = "0.1.0"
