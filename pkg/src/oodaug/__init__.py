"""Critic-guided exploratory data augmentation for imitation learning on toy 2D tasks."""

__version__ = "0.1.0"
