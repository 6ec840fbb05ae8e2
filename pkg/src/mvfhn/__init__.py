"""Simulation and verification lab for a distribution-dependent
stochastic FitzHugh-Nagumo system on a truncated domain: interacting
ensembles, transport metrics on empirical laws, law fixed-point
iteration, splitting estimates, and pullback-attraction diagnostics."""

__version__ = "0.1.0"
