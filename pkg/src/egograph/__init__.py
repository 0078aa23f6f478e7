"""Ego-CNN graph classification with critical-structure backtracking."""

__version__ = "0.1.0"
