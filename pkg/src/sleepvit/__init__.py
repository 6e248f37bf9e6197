"""Multitask 1D vision transformer for sleep staging and apnea detection."""

__version__ = "0.1.0"
