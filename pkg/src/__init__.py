"""Counterfactual evaluation and fairness auditing for risk assessment models."""

__version__ = "0.1.0"
