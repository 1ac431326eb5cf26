"""Deep Attention Q-Network pipeline for offline treatment-policy learning."""

__version__ = "0.1.0"
