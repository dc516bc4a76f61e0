"""Quasi-local numerical homogenization for indefinite curl-curl problems."""

__version__ = "0.1.0"
