"""Semi-supervised conditional VAE for survival-group classification of 3D tumor segmentations."""

__version__ = "0.1.0"
