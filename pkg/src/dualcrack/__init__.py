"""Dual-stream (transformer + CNN) crack segmentation with body/edge decoupling."""

__version__ = "0.1.0"
