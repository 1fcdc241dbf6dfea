"""Contrastive image-text alignment over a batch of studies.

Each study contributes a pooled visual vector and a report embedding.
Cosine similarities between all pairs, divided by a temperature, feed a
symmetric pair-matching objective: every visual vector must pick out its
own report among the batch, and vice versa. The joint training loss adds
this term to the generation cross-entropy with weight lambda.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    DiffTensor,
    cross_entropy_loss,
    matmul,
    scale,
    sqrt,
    tmean,
    transpose,
    tsum,
)
from .errors import ContractViolation

DEFAULT_TAU = 0.1
DEFAULT_LAMBDA = 1.0


def pool_visual(d_j):
    """Mean over the S' token rows of one study: [S', F'] -> [F']."""
    if d_j.data.ndim != 2 or d_j.shape[0] < 1:
        raise ContractViolation(f"pool_visual expects [S', F'] with S' >= 1, got {d_j.shape}")
    return tmean(d_j, axis=0)


@dataclass
class AlignmentBatch:
    """Paired visual/text vectors, one row per study, plus the temperature."""

    visual: DiffTensor  # [N_B, F']
    text: DiffTensor  # [N_B, F']
    tau: float = DEFAULT_TAU

    def __post_init__(self):
        if self.visual.data.ndim != 2 or self.text.data.ndim != 2:
            raise ContractViolation("alignment batch sides must be [N_B, F'] matrices")
        if self.visual.shape != self.text.shape:
            raise ContractViolation(
                f"batch sides disagree: {self.visual.shape} vs {self.text.shape}"
            )
        if self.visual.shape[0] < 1:
            raise ContractViolation("alignment batch must contain at least one study")
        if not self.tau > 0:
            raise ContractViolation(f"temperature must be positive, got {self.tau}")


def _normalize_rows(x, side):
    norms_sq = tsum(x * x, axis=1, keepdims=True)
    if (norms_sq.data == 0.0).any():
        raise ContractViolation(f"zero-norm {side} vector: cosine similarity undefined")
    return x / sqrt(norms_sq)


def contrastive_loss(batch):
    """Symmetric pair-matching loss; 0 at N_B=1, ln N_B for identical rows.

    Both directional terms average negative log-probability of the true
    pairing under softmax over the similarity row, each weighted 1/2.
    """
    dn = _normalize_rows(batch.visual, "visual")
    en = _normalize_rows(batch.text, "text")
    sim = scale(matmul(dn, transpose(en)), 1.0 / batch.tau)
    n_b = sim.shape[0]
    targets = np.arange(n_b)
    v_to_t = cross_entropy_loss(sim, targets)
    t_to_v = cross_entropy_loss(transpose(sim), targets)
    return scale(v_to_t + t_to_v, 0.5)


def joint_loss(ce, cont, lam=DEFAULT_LAMBDA):
    """Total objective: generation cross-entropy plus lam times alignment."""
    if lam < 0:
        raise ContractViolation(f"lambda must be >= 0, got {lam}")
    if not (np.isfinite(ce.data).all() and np.isfinite(cont.data).all()):
        raise ContractViolation("joint_loss requires finite inputs")
    return ce + scale(cont, lam)
