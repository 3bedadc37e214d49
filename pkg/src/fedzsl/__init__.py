"""Federated zero-shot learning simulator with class-similarity distillation,
model-replacement backdoors and a feature-magnitude defense."""

__version__ = "0.1.0"
