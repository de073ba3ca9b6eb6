"""Finite-truncation laboratory for an infinite-factor HJM bond market.

Simulates forward-rate surfaces, assembles the bond-price operator and its
spectrum, builds a bounded claim outside the attainable set, replicates claims
with generalized strategies when the operator is injective, and samples a
strict local martingale counterexample.
"""

__version__ = "0.1.0"
