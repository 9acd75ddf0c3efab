"""Invariant measure families for time-inhomogeneous Markov processes."""

__version__ = "0.1.0"
