"""Spins coupled to thermal baths driving a particle up a tilted lattice."""

__version__ = "0.1.0"
