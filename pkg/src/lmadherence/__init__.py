"""Latent Markov modelling of multi-drug adherence panels and profile-stratified survival."""

__version__ = "0.1.0"
