"""Recurrent off-policy Q-learning where the recurrent stream reads stored,
non-learnable per-frame embeddings and gates a learnable CNN stream."""

__version__ = "0.1.0"
