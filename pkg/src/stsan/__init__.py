"""Spatial-temporal self-attention network for grid crowd-flow prediction."""

__version__ = "0.1.0"
