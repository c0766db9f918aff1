"""Concept-based causal explanation of layered classifiers."""

__version__ = "0.1.0"
