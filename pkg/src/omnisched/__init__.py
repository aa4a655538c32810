"""Scheduler and discrete-event performance simulator for multimodal video-model training."""

__version__ = "0.1.0"
