"""Generative kernel continual learning."""
