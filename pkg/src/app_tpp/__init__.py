"""Marked temporal point process models for action sequences with a recurrent VAE."""
__version__ = "0.1.0"
