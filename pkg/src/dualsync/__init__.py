"""Dual-branch diffusion transformer for co-speech expression and gesture synthesis
with asynchronous few-step consistency sampling."""

__version__ = "0.1.0"
