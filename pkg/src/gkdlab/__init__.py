"""Gradient knowledge distillation for small transformer classifiers."""

__version__ = "0.1.0"
