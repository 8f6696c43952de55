"""Slow-node triage for compute fleets from proxy benchmark samples."""

__version__ = "0.1.0"
