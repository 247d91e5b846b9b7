"""Hybrid CNN-recurrent multi-label ECG classification, implemented in numpy."""

__version__ = "0.1.0"
