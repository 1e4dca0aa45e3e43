"""Koopman-rollout object feature learning for desk-scale manipulation."""

__version__ = "0.1.0"
