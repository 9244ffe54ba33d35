"""Momentum iterative gradient attacks against small numpy networks."""

__version__ = "0.1.0"
