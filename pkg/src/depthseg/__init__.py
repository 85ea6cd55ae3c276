"""Joint monocular depth estimation and semantic segmentation with a shared
shifted-window transformer and a Wasserstein critic on the joint output."""

__version__ = "0.1.0"
