"""Temporal saliency adaptation layers and gaze-metric evaluation tools."""

__version__ = "0.1.0"
