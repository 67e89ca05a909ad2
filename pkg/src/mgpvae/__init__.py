"""Markovian Gaussian-process variational autoencoders in linear time."""

__version__ = "0.1.0"
