"""Relative pose regression from point and line matches with a dual graph network."""

__version__ = "0.1.0"
