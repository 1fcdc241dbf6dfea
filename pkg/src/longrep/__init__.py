"""Longitudinal radiology-style report generation on a tiny numpy stack.

The package is organized bottom-up:

- ``autodiff``: tape-based reverse-mode differentiation, AdamW, seeded RNG
- ``encoders``: image patch encoder, token projector, text encoder
- ``temporal``: date-aware embeddings and group-causal attention blocks
- ``decoder``: cross-attending text decoder with greedy generation
- ``alignment``: bidirectional contrastive image-text loss
- ``synthdata``: synthetic disease-progression corpus
- ``metrics``: n-gram overlap metrics, label extraction, progression probe
- ``model`` / ``trainer`` / ``cli``: assembled model, curriculum, commands
"""

from .errors import (
    ConfigError,
    ContractViolation,
    EmptyAttentionError,
    NumericError,
    UnknownNodeError,
)

__all__ = [
    "ConfigError",
    "ContractViolation",
    "EmptyAttentionError",
    "NumericError",
    "UnknownNodeError",
]

__version__ = "0.1.0"
