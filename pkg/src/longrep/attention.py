"""Shared multi-head attention block used by every transformer in the package.

The text encoder, the temporal stack, and the report decoder all run the
same pre-normalization block: queries, keys and values are produced from
the layer-normalized input with one weight matrix per head, scores are
restricted by a boolean mask inside the softmax, head outputs are
concatenated and mapped back, and a two-layer GELU MLP follows, each
stage with a residual connection.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import (
    DiffTensor,
    concat,
    gelu,
    layer_norm,
    masked_softmax,
    matmul,
    scale,
    transpose,
)
from .errors import ConfigError

INIT_STD = 0.02
MLP_RATIO = 4

# How raw attention scores are scaled before the softmax. The default
# divides by sqrt(D_h); the alternative divides by D_h itself.
SCALE_MODES = ("sqrt_dh", "dh")


def _score_scale(d_head, mode):
    if mode == "sqrt_dh":
        return 1.0 / math.sqrt(d_head)
    if mode == "dh":
        return 1.0 / d_head
    raise ConfigError(f"attn_scale must be one of {SCALE_MODES}, got {mode!r}")


@dataclass
class HeadParams:
    """Query/key/value maps for one attention head, each [F', D_h]."""

    wq: DiffTensor
    wk: DiffTensor
    wv: DiffTensor


@dataclass
class BlockParams:
    """One transformer block: A heads, output map, two LayerNorms, MLP."""

    heads: list
    wo: DiffTensor  # [A*D_h, F']
    ln1_g: DiffTensor
    ln1_b: DiffTensor
    ln2_g: DiffTensor
    ln2_b: DiffTensor
    mlp_w1: DiffTensor  # [F', MLP_RATIO*F']
    mlp_b1: DiffTensor
    mlp_w2: DiffTensor  # [MLP_RATIO*F', F']
    mlp_b2: DiffTensor

    def named(self, prefix):
        out = {}
        for a, h in enumerate(self.heads):
            out[f"{prefix}.h{a}.wq"] = h.wq
            out[f"{prefix}.h{a}.wk"] = h.wk
            out[f"{prefix}.h{a}.wv"] = h.wv
        out[f"{prefix}.wo"] = self.wo
        out[f"{prefix}.ln1.g"] = self.ln1_g
        out[f"{prefix}.ln1.b"] = self.ln1_b
        out[f"{prefix}.ln2.g"] = self.ln2_g
        out[f"{prefix}.ln2.b"] = self.ln2_b
        out[f"{prefix}.mlp.w1"] = self.mlp_w1
        out[f"{prefix}.mlp.b1"] = self.mlp_b1
        out[f"{prefix}.mlp.w2"] = self.mlp_w2
        out[f"{prefix}.mlp.b2"] = self.mlp_b2
        return out


def init_heads(rng, f_dim, n_heads):
    if f_dim % n_heads != 0:
        raise ConfigError(f"head count {n_heads} must divide feature dim {f_dim}")
    d_head = f_dim // n_heads
    return [
        HeadParams(
            wq=DiffTensor(rng.normal((f_dim, d_head), std=INIT_STD), requires_grad=True),
            wk=DiffTensor(rng.normal((f_dim, d_head), std=INIT_STD), requires_grad=True),
            wv=DiffTensor(rng.normal((f_dim, d_head), std=INIT_STD), requires_grad=True),
        )
        for _ in range(n_heads)
    ]


def init_block(rng, f_dim, n_heads):
    hidden = MLP_RATIO * f_dim
    return BlockParams(
        heads=init_heads(rng, f_dim, n_heads),
        wo=DiffTensor(rng.normal((f_dim, f_dim), std=INIT_STD), requires_grad=True),
        ln1_g=DiffTensor(np.ones(f_dim), requires_grad=True),
        ln1_b=DiffTensor(np.zeros(f_dim), requires_grad=True),
        ln2_g=DiffTensor(np.ones(f_dim), requires_grad=True),
        ln2_b=DiffTensor(np.zeros(f_dim), requires_grad=True),
        mlp_w1=DiffTensor(rng.normal((f_dim, hidden), std=INIT_STD), requires_grad=True),
        mlp_b1=DiffTensor(np.zeros(hidden), requires_grad=True),
        mlp_w2=DiffTensor(rng.normal((hidden, f_dim), std=INIT_STD), requires_grad=True),
        mlp_b2=DiffTensor(np.zeros(f_dim), requires_grad=True),
    )


def multi_head_attention(q_src, kv_src, heads, wo, allow, attn_scale="sqrt_dh"):
    """Masked scaled dot-product attention over already-normalized inputs.

    ``q_src`` is [n_q, F'], ``kv_src`` is [n_k, F'], ``allow`` is a boolean
    [n_q, n_k] (or broadcastable) mask of permitted attention edges.
    """
    d_head = heads[0].wq.shape[1]
    factor = _score_scale(d_head, attn_scale)
    outs = []
    for h in heads:
        q = matmul(q_src, h.wq)
        k = matmul(kv_src, h.wk)
        v = matmul(kv_src, h.wv)
        scores = scale(matmul(q, transpose(k)), factor)
        weights = masked_softmax(scores, allow)
        outs.append(matmul(weights, v))
    return matmul(concat(outs, axis=1), wo)


def transformer_block(z, p, allow, attn_scale="sqrt_dh"):
    """Pre-LN self-attention block with residuals: z -> z + attn, then + MLP."""
    h = layer_norm(z, p.ln1_g, p.ln1_b)
    z = z + multi_head_attention(h, h, p.heads, p.wo, allow, attn_scale)
    m = layer_norm(z, p.ln2_g, p.ln2_b)
    m = matmul(gelu(matmul(m, p.mlp_w1) + p.mlp_b1), p.mlp_w2) + p.mlp_b2
    return z + m
