"""Constrained differentiable architecture search for multichannel EEG classification."""

__version__ = "0.1.0"
