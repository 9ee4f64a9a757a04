"""Concept-level counterfactual explanations with a dialog policy."""

__version__ = "0.1.0"
