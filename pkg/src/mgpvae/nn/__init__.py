"""Autodiff, small neural networks, optimizer and checkpoints."""
