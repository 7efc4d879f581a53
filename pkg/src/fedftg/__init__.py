"""Federated learning simulator with server-side data-free fine-tuning of the global model."""

__version__ = "0.1.0"
