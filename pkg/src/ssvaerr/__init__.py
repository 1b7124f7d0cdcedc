"""Self-supervised pre-training and valence/arousal regression on video, at desk scale."""

__version__ = "0.1.0"
