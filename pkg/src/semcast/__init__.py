"""Broadcast text transmission over simulated noisy channels, with the
encoder and per-receiver decoders trained by self-critical policy gradients
on an alternating schedule."""

__version__ = "0.1.0"
