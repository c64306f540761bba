"""Attention-placement laboratory for person re-identification backbones."""

__version__ = "0.1.0"
