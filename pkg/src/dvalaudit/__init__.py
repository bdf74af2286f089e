"""Audit toolkit for data valuation under missing data and subsampling."""

__version__ = "0.1.0"
