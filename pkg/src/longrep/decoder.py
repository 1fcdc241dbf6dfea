"""Autoregressive report decoder with cross-attention over visual tokens.

Each block runs token-causal self-attention, then cross-attention whose
queries come from the text stream and whose keys/values are the S' rows
of the study representation D_j, then an MLP; all pre-normalized with
residuals. Training is teacher-forced; generation is greedy.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attention import INIT_STD, init_heads, multi_head_attention
from .autodiff import (
    DiffTensor,
    cross_entropy_loss,
    gelu,
    layer_norm,
    matmul,
    take_rows,
)
from .encoders import BOS_ID, EOS_ID, PAD_ID, TextTokenSeq
from .errors import ContractViolation

CE_IGNORE = -1


@dataclass
class DecoderBlockParams:
    """Self-attention, cross-attention, and MLP stages of one decoder block."""

    self_heads: list
    self_wo: DiffTensor
    ln1_g: DiffTensor
    ln1_b: DiffTensor
    cross_heads: list
    cross_wo: DiffTensor
    ln2_g: DiffTensor
    ln2_b: DiffTensor
    ln3_g: DiffTensor
    ln3_b: DiffTensor
    mlp_w1: DiffTensor
    mlp_b1: DiffTensor
    mlp_w2: DiffTensor
    mlp_b2: DiffTensor

    def named(self, prefix):
        out = {}
        for a, h in enumerate(self.self_heads):
            out[f"{prefix}.self.h{a}.wq"] = h.wq
            out[f"{prefix}.self.h{a}.wk"] = h.wk
            out[f"{prefix}.self.h{a}.wv"] = h.wv
        out[f"{prefix}.self.wo"] = self.self_wo
        for a, h in enumerate(self.cross_heads):
            out[f"{prefix}.cross.h{a}.wq"] = h.wq
            out[f"{prefix}.cross.h{a}.wk"] = h.wk
            out[f"{prefix}.cross.h{a}.wv"] = h.wv
        out[f"{prefix}.cross.wo"] = self.cross_wo
        out[f"{prefix}.ln1.g"] = self.ln1_g
        out[f"{prefix}.ln1.b"] = self.ln1_b
        out[f"{prefix}.ln2.g"] = self.ln2_g
        out[f"{prefix}.ln2.b"] = self.ln2_b
        out[f"{prefix}.ln3.g"] = self.ln3_g
        out[f"{prefix}.ln3.b"] = self.ln3_b
        out[f"{prefix}.mlp.w1"] = self.mlp_w1
        out[f"{prefix}.mlp.b1"] = self.mlp_b1
        out[f"{prefix}.mlp.w2"] = self.mlp_w2
        out[f"{prefix}.mlp.b2"] = self.mlp_b2
        return out


@dataclass
class DecoderParams:
    """Embedding tables, block stack, and the vocabulary projection."""

    embed: DiffTensor  # [vocab, F']
    pos: DiffTensor  # [L_txt, F']
    blocks: list = field(default_factory=list)
    out_w: DiffTensor = None  # [F', vocab]
    out_b: DiffTensor = None  # [vocab]

    def named(self, prefix="dec"):
        out = {f"{prefix}.embed": self.embed, f"{prefix}.pos": self.pos}
        for i, blk in enumerate(self.blocks):
            out.update(blk.named(f"{prefix}.blk{i}"))
        out[f"{prefix}.out.w"] = self.out_w
        out[f"{prefix}.out.b"] = self.out_b
        return out


@dataclass
class GenerationConfig:
    """Greedy decoding budget; the output sequence never exceeds max_len ids."""

    max_len: int = 32

    def __post_init__(self):
        if self.max_len < 2:
            raise ContractViolation(f"max_len must be >= 2, got {self.max_len}")


def init_decoder_block(rng, f_dim, n_heads):
    hidden = 4 * f_dim
    return DecoderBlockParams(
        self_heads=init_heads(rng, f_dim, n_heads),
        self_wo=DiffTensor(rng.normal((f_dim, f_dim), std=INIT_STD), requires_grad=True),
        ln1_g=DiffTensor(np.ones(f_dim), requires_grad=True),
        ln1_b=DiffTensor(np.zeros(f_dim), requires_grad=True),
        cross_heads=init_heads(rng, f_dim, n_heads),
        cross_wo=DiffTensor(rng.normal((f_dim, f_dim), std=INIT_STD), requires_grad=True),
        ln2_g=DiffTensor(np.ones(f_dim), requires_grad=True),
        ln2_b=DiffTensor(np.zeros(f_dim), requires_grad=True),
        ln3_g=DiffTensor(np.ones(f_dim), requires_grad=True),
        ln3_b=DiffTensor(np.zeros(f_dim), requires_grad=True),
        mlp_w1=DiffTensor(rng.normal((f_dim, hidden), std=INIT_STD), requires_grad=True),
        mlp_b1=DiffTensor(np.zeros(hidden), requires_grad=True),
        mlp_w2=DiffTensor(rng.normal((hidden, f_dim), std=INIT_STD), requires_grad=True),
        mlp_b2=DiffTensor(np.zeros(f_dim), requires_grad=True),
    )


def init_decoder(rng, vocab_size, max_len, f_dim, n_blocks=2, n_heads=4):
    return DecoderParams(
        embed=DiffTensor(rng.normal((vocab_size, f_dim), std=INIT_STD), requires_grad=True),
        pos=DiffTensor(rng.normal((max_len, f_dim), std=INIT_STD), requires_grad=True),
        blocks=[init_decoder_block(rng, f_dim, n_heads) for _ in range(n_blocks)],
        out_w=DiffTensor(rng.normal((f_dim, vocab_size), std=INIT_STD), requires_grad=True),
        out_b=DiffTensor(np.zeros(vocab_size), requires_grad=True),
    )


def _decoder_block(x, memory, p, self_allow, attn_scale):
    h = layer_norm(x, p.ln1_g, p.ln1_b)
    x = x + multi_head_attention(h, h, p.self_heads, p.self_wo, self_allow, attn_scale)
    h = layer_norm(x, p.ln2_g, p.ln2_b)
    cross_allow = np.ones((x.shape[0], memory.shape[0]), dtype=bool)
    x = x + multi_head_attention(h, memory, p.cross_heads, p.cross_wo, cross_allow, attn_scale)
    m = layer_norm(x, p.ln3_g, p.ln3_b)
    m = matmul(gelu(matmul(m, p.mlp_w1) + p.mlp_b1), p.mlp_w2) + p.mlp_b2
    return x + m


def decode_logits(d_j, ids_in, params, attn_scale="sqrt_dh"):
    """Next-token logits [n, vocab] for an id prefix against memory D_j."""
    ids_in = np.asarray(ids_in, dtype=np.intp)
    n = ids_in.size
    if n > params.pos.shape[0]:
        raise ContractViolation(
            f"sequence length {n} exceeds position table {params.pos.shape[0]}"
        )
    x = take_rows(params.embed, ids_in) + take_rows(params.pos, np.arange(n))
    causal = np.tril(np.ones((n, n), dtype=bool))
    for blk in params.blocks:
        x = _decoder_block(x, d_j, blk, causal, attn_scale)
    return matmul(x, params.out_w) + params.out_b


def decode_teacher_forced(d_j, report, params, attn_scale="sqrt_dh"):
    """Mean cross-entropy of next-token prediction over the real sequence.

    Inputs are report[0..n-1] and targets report[1..n]; trailing PAD
    contributes nothing, so the loss equals the loss on the unpadded
    sequence exactly.
    """
    n_real = report.real_length
    ids = report.ids[:n_real]
    logits = decode_logits(d_j, ids[:-1], params, attn_scale)
    return cross_entropy_loss(logits, ids[1:], ignore_index=CE_IGNORE)


def generate_greedy(d_j, params, cfg, attn_scale="sqrt_dh"):
    """Greedy argmax decoding from BOS; ties resolve to the lowest token id.

    Stops at EOS; if the budget runs out first, the final slot is closed
    with EOS so the result is always a well-formed sequence.
    """
    ids = [BOS_ID]
    while len(ids) < cfg.max_len:
        logits = decode_logits(d_j, ids, params, attn_scale)
        next_id = int(np.argmax(logits.data[-1]))
        if len(ids) == cfg.max_len - 1 and next_id != EOS_ID:
            next_id = EOS_ID
        ids.append(next_id)
        if next_id == EOS_ID:
            break
    ids.extend([PAD_ID] * (cfg.max_len - len(ids)))
    return TextTokenSeq(np.array(ids, dtype=np.intp))
