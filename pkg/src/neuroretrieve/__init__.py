"""Contrastive EEG-to-image retrieval with a temporal graph convolution encoder."""

__version__ = "0.1.0"
