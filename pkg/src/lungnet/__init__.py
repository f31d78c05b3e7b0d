"""Respiratory-sound classification from raw waveforms, with optional demographic fusion."""
__version__ = "0.1.0"
