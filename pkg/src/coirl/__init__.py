"""Contextual inverse reinforcement learning on tabular contextual MDPs."""

__version__ = "0.1.0"
