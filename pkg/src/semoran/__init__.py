"""Semantic-aware RAN simulator with a VAE CSI codec and remote localization."""

__version__ = "0.1.0"
