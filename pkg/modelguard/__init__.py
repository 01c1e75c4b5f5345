"""Offline Model Guard: vendor-protected keyword spotting in a simulated SANCTUARY enclave."""

__version__ = "0.1.0"
