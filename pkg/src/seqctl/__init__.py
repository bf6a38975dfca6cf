"""Optimal sequential testing of several simple hypotheses with control variables."""

__version__ = "0.1.0"
