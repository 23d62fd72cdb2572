"""Desk-scale variational data assimilation and neural forecasting testbed."""

__version__ = "0.1.0"
