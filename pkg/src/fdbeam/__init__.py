"""Frequency-domain beamforming and compressed recovery of ultrasound lines."""

__version__ = "0.1.0"
