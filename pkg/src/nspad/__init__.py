"""Neuro-symbolic process anomaly detection.

Autoencoder-based trace anomaly detection with Declare constraints injected
through real-valued logic fine-tuning.
"""

__version__ = "0.1.0"
