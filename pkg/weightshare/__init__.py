"""Weight-shared co-training of 1D convolutional networks for spectral regression."""

__version__ = "0.1.0"
