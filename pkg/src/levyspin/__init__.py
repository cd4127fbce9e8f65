"""Killed time-changed symmetric Levy processes: spectra, spin duals, simulation."""
__version__ = "0.1.0"
