"""Density-regularized, clinically-aware model-based offline RL laboratory."""

__version__ = "0.1.0"
