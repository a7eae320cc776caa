"""Simulation and verification tools for McKean-Vlasov particle systems with common noise."""

__version__ = "0.1.0"
