"""Sparse invariant learning: masked training with domain-driven mask exchange.

Numerics run on a small float64 autodiff tape (:mod:`evil_lab.tensor`); see
the README for the module map.
"""

__version__ = "0.1.0"
