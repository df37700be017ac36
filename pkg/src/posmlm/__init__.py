"""Discrete position tokens, generalized masked language modeling and prompt decoding for grounded scenes."""

__version__ = "0.1.0"
