"""Date-aware temporal aggregation over a patient's study history.

Each study's visual tokens are shifted by a learned embedding of the
study's date offset (days since the patient's first study), concatenated
chronologically into one sequence, and run through a stack of
group-causal transformer blocks: a token may attend within its own study
and to any earlier study, never to a later one. The stacked output is
split back into per-study representations.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .attention import INIT_STD, BlockParams, init_block, transformer_block
from .autodiff import DiffTensor, concat, slice_rows, take_rows
from .errors import ContractViolation

DEFAULT_MAX_STUDIES = 5


def relative_dates(dates):
    """Absolute day numbers -> offsets from the first study.

    Dates must be non-decreasing; same-day studies are permitted.
    """
    dates = [int(d) for d in dates]
    if not dates:
        raise ContractViolation("relative_dates needs at least one date")
    if any(b < a for a, b in zip(dates, dates[1:])):
        raise ContractViolation(f"study dates must be non-decreasing, got {dates}")
    return [d - dates[0] for d in dates]


@dataclass
class TemporalEmbeddingTable:
    """One learnable F'-row per whole-day offset, 0 through max_offset."""

    rows: DiffTensor  # [max_offset+1, F']

    @property
    def max_offset(self):
        return self.rows.shape[0] - 1

    def named(self, prefix="ttable"):
        return {f"{prefix}.rows": self.rows}


def init_temporal_table(rng, max_offset, f_dim):
    if max_offset < 0:
        raise ContractViolation(f"max_offset must be >= 0, got {max_offset}")
    return TemporalEmbeddingTable(
        rows=DiffTensor(rng.normal((max_offset + 1, f_dim), std=INIT_STD), requires_grad=True)
    )


def add_temporal_embedding(v, offset, table):
    """Broadcast-add the offset's embedding row to every token of the study.

    Offsets beyond the table are clamped to the last row, so unseen future
    gaps saturate instead of failing.
    """
    if offset < 0:
        raise ContractViolation(f"offset must be >= 0, got {offset}")
    row = take_rows(table.rows, [min(int(offset), table.max_offset)])
    return v + row


@dataclass
class PatientSequence:
    """Concatenated per-study tokens plus the group structure over rows."""

    tokens: DiffTensor  # [N*S', F']
    group_sizes: list
    offsets: list

    def __post_init__(self):
        if sum(self.group_sizes) != self.tokens.shape[0]:
            raise ContractViolation("group sizes do not sum to the token count")
        if len(self.group_sizes) != len(self.offsets):
            raise ContractViolation("one offset per study required")


def assemble_sequence(studies, offsets, max_studies=DEFAULT_MAX_STUDIES):
    """Stack per-study token blocks [S', F'] chronologically.

    Histories longer than ``max_studies`` are truncated to the most recent
    studies, with a warning; their offsets are kept as computed.
    """
    if not studies:
        raise ContractViolation("assemble_sequence needs at least one study")
    if len(studies) != len(offsets):
        raise ContractViolation("studies and offsets must align")
    if len(studies) > max_studies:
        warnings.warn(
            f"history of {len(studies)} studies truncated to most recent {max_studies}",
            RuntimeWarning,
        )
        studies = studies[-max_studies:]
        offsets = offsets[-max_studies:]
    s_prime = studies[0].shape[0]
    for s in studies:
        if s.shape != studies[0].shape:
            raise ContractViolation("all studies must share the same token shape")
    tokens = studies[0] if len(studies) == 1 else concat(studies, axis=0)
    return PatientSequence(tokens, [s_prime] * len(studies), list(offsets))


def build_group_causal_mask(group_sizes):
    """Boolean [n, n] mask: token p may attend to p' iff group(p') <= group(p)."""
    if not group_sizes:
        raise ContractViolation("group_sizes must be non-empty")
    if any(g <= 0 for g in group_sizes):
        raise ContractViolation(f"group sizes must be positive, got {group_sizes}")
    group = np.repeat(np.arange(len(group_sizes)), group_sizes)
    return group[None, :] <= group[:, None]


def group_causal_block(z, params, mask, attn_scale="sqrt_dh"):
    """One transformer block under the group-causal mask."""
    if mask.shape != (z.shape[0], z.shape[0]):
        raise ContractViolation(
            f"mask shape {mask.shape} does not match sequence length {z.shape[0]}"
        )
    return transformer_block(z, params, mask, attn_scale)


def temporal_forward(seq, blocks, attn_scale="sqrt_dh"):
    """Run the block stack over one patient; returns per-study outputs D_j."""
    if not blocks:
        raise ContractViolation("temporal_forward needs at least one block")
    mask = build_group_causal_mask(seq.group_sizes)
    z = seq.tokens
    for blk in blocks:
        z = group_causal_block(z, blk, mask, attn_scale)
    outs = []
    start = 0
    for size in seq.group_sizes:
        outs.append(slice_rows(z, start, start + size))
        start += size
    return outs


def format_mask(mask):
    """Render a boolean mask as a text grid of 0/1 rows, for inspection."""
    return "\n".join("".join("1" if v else "0" for v in row) for row in mask)
