"""Embedding training under an information-bottleneck objective.

The redundancy term is a CLUB upper bound on I(X; omega) whose conditional
likelihood comes from an affine-coupling flow trained in alternation with
the embedding network.
"""

__version__ = "0.1.0"
