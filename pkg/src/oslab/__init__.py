"""Oversmoothing rate and oversmoothing loss on a small GRU translation model."""

__version__ = "0.1.0"
