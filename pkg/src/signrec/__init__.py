"""Conformer-based continuous sign recognition at desk scale."""

__version__ = "0.1.0"
