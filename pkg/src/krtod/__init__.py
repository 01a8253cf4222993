"""Retrieval-augmented task-oriented dialog with latent knowledge/action
states, trained semi-supervised by joint stochastic approximation."""

__version__ = "0.1.0"
