"""Adversarially fine-tuned joint CTC/attention speech recognition on synthetic data."""

__version__ = "0.1.0"
