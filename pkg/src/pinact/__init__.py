"""Eigenspace-projection input purification defense with a learned selector.

Subpackages by concern: linalg (eigen kernels, RNG, binary container), nn
(reverse-mode layer stack engine), pca (eigenbasis fit/projection), defense
(selection agent, policy-gradient training, inactivation), recognizer
(embedding model and verification metrics), attacks (white/black-box and
patch attacks), data (synthetic identities, noise, pairs, PGM), experiments
(protocol-level studies), cli (subcommand frontend).
"""

from pinact.linalg import SeededRng

__all__ = ["SeededRng"]
__version__ = "0.1.0"
