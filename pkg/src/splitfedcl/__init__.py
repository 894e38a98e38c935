"""Split federated co-learning for segmentation with noisy annotations."""

__version__ = "0.1.0"
