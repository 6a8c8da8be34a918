"""Lumped circulation simulation, emulators and meta-analyses."""

__version__ = "0.1.0"
