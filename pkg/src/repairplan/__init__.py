"""Causal planning toolkit for sequential constraint repair on layered dependency graphs."""

__version__ = "0.1.0"
