"""Static/dynamic sequential disentanglement with conditional normalizing flows."""

__version__ = "0.1.0"
