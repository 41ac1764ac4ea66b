"""Lattice Monte Carlo lab: internal DLA, flashing aggregation, and the
discrete-potential-theory oracle used to cross-check both."""

__version__ = "0.1.0"
