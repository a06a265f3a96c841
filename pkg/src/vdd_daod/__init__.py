"""Vector-decomposed disentanglement for domain-adaptive object detection."""

__version__ = "0.1.0"
