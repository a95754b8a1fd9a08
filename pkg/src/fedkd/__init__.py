"""Federated knowledge graph embedding with teacher-student distillation."""

__version__ = "0.1.0"
