"""Batch reinforcement learning for diabetes-care regimen recommendation,
with kNN counterfactual evaluation against logged prescriptions."""

__version__ = "0.1.0"
