"""Neurally-controlled ODEs: coupled state/weight flows and their gradients."""

__version__ = "0.1.0"
