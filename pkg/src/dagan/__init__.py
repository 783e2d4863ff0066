"""Data augmentation GAN: generator, critic, training and evaluation harnesses."""

__version__ = "0.1.0"
