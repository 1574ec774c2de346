"""Continuous and discrete learned primal-dual CT reconstruction on numpy."""

__version__ = "0.1.0"
