"""Image and text encoders.

An image is cut into non-overlapping patches, each patch linearly
embedded, and the resulting tokens passed through a projection stage
that remaps both the feature dimension (F -> F') and the token count
(S -> S'). Reports are tokenized against a fixed word vocabulary and
embedded into a single F'-vector by a small bidirectional transformer.

Both encoders sit behind thin parameter dataclasses (``ImageBackbone``,
``TextBackbone``) so a heavier pretrained model could replace either
without touching downstream code.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .attention import INIT_STD, init_block, transformer_block
from .autodiff import DiffTensor, matmul, take_rows, tmean
from .errors import ConfigError, ContractViolation

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
UNK_ID = 3

SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")


class Vocabulary:
    """Fixed word vocabulary with the four reserved ids in front.

    The on-disk format is one token per line; the line number is the id
    and the first four lines are always the special tokens.
    """

    def __init__(self, tokens):
        tokens = list(tokens)
        if tuple(tokens[:4]) != SPECIAL_TOKENS:
            raise ContractViolation(
                f"vocabulary must start with {SPECIAL_TOKENS}, got {tokens[:4]}"
            )
        if len(set(tokens)) != len(tokens):
            raise ContractViolation("vocabulary contains duplicate tokens")
        self.tokens = tokens
        self._ids = {tok: i for i, tok in enumerate(tokens)}

    @classmethod
    def from_words(cls, words):
        """Build from a bag of content words (sorted for determinism)."""
        return cls(list(SPECIAL_TOKENS) + sorted(set(words) - set(SPECIAL_TOKENS)))

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, word):
        return word in self._ids

    def word_id(self, word):
        return self._ids.get(word, UNK_ID)

    def word(self, token_id):
        return self.tokens[token_id]

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(self.tokens) + "\n")

    @classmethod
    def load(cls, path):
        with open(path, "r", encoding="utf-8") as fh:
            tokens = [line.rstrip("\n") for line in fh if line.rstrip("\n")]
        return cls(tokens)

    def digest(self):
        """Stable content hash, recorded in checkpoints to catch mismatches."""
        return hashlib.sha256("\n".join(self.tokens).encode("utf-8")).hexdigest()[:16]


@dataclass
class TextTokenSeq:
    """A fixed-length id sequence: BOS, content, EOS, then PAD to max_len."""

    ids: np.ndarray

    def __post_init__(self):
        ids = np.asarray(self.ids, dtype=np.intp)
        object.__setattr__(self, "ids", ids)
        if ids.ndim != 1 or ids.size < 2:
            raise ContractViolation(f"token sequence must be 1-D with >= 2 ids, got {ids.shape}")
        if ids[0] != BOS_ID or (ids == BOS_ID).sum() != 1:
            raise ContractViolation("sequence must contain exactly one BOS, at position 0")
        if (ids == EOS_ID).sum() != 1:
            raise ContractViolation("sequence must contain exactly one EOS")
        eos_at = int(np.argmax(ids == EOS_ID))
        if (ids[1:eos_at] == PAD_ID).any() or (ids[eos_at + 1 :] != PAD_ID).any():
            raise ContractViolation("PAD may appear only after EOS")

    def __len__(self):
        return int(self.ids.size)

    @property
    def eos_position(self):
        return int(np.argmax(self.ids == EOS_ID))

    @property
    def content_ids(self):
        return self.ids[1 : self.eos_position]

    @property
    def real_length(self):
        """Number of non-PAD positions (BOS + content + EOS)."""
        return self.eos_position + 1


def tokenize_report(text, vocab, max_words=60, max_len=32):
    """Lowercase, whitespace-split, truncate, id-map, wrap and pad.

    Words beyond ``max_words`` are dropped, as are words that would not
    fit inside ``max_len`` once BOS and EOS are added. Unknown words map
    to UNK. Empty text is valid and yields [BOS, EOS, PAD...].
    """
    if max_len < 2:
        raise ContractViolation(f"max_len must be >= 2, got {max_len}")
    words = text.lower().split()[:max_words]
    words = words[: max_len - 2]
    ids = [BOS_ID] + [vocab.word_id(w) for w in words] + [EOS_ID]
    ids.extend([PAD_ID] * (max_len - len(ids)))
    return TextTokenSeq(np.array(ids, dtype=np.intp))


def detokenize(seq, vocab):
    """Inverse of tokenization up to UNK: content ids back to a word string."""
    return " ".join(vocab.word(int(i)) for i in seq.content_ids)


# ---------------------------------------------------------------------------
# Images
# ---------------------------------------------------------------------------


@dataclass
class ImageGrid:
    """Single-channel pixel grid with values in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        object.__setattr__(self, "pixels", px)
        if px.ndim != 2:
            raise ContractViolation(f"image must be 2-D [H, W], got {px.shape}")
        if not np.isfinite(px).all() or px.min() < 0.0 or px.max() > 1.0:
            raise ContractViolation("pixel values must be finite and within [0, 1]")

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]


@dataclass
class ImageBackbone:
    """Patch-embedding image encoder: flattened k*k patches -> F dims."""

    patch: int
    w: DiffTensor  # [patch*patch, F]
    b: DiffTensor  # [F]

    def named(self, prefix="img"):
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}


def init_image_backbone(rng, patch, f_dim):
    return ImageBackbone(
        patch=patch,
        w=DiffTensor(rng.normal((patch * patch, f_dim), std=INIT_STD), requires_grad=True),
        b=DiffTensor(np.zeros(f_dim), requires_grad=True),
    )


def image_patches(img, patch):
    """Row-major non-overlapping patches, each flattened to patch*patch."""
    h, w = img.height, img.width
    if h % patch or w % patch:
        raise ConfigError(f"patch size {patch} does not divide image {h}x{w}")
    n_h, n_w = h // patch, w // patch
    px = img.pixels.reshape(n_h, patch, n_w, patch)
    return px.transpose(0, 2, 1, 3).reshape(n_h * n_w, patch * patch)


def encode_image(img, backbone):
    """ImageGrid -> visual tokens [S, F], S = (H/patch)*(W/patch)."""
    patches = DiffTensor(image_patches(img, backbone.patch))
    return matmul(patches, backbone.w) + backbone.b


@dataclass
class TokenProjector:
    """Feature remap F->F' per token, then a learned token-count map S->S'."""

    wc: DiffTensor  # [F, F']
    bc: DiffTensor  # [F']
    wt: DiffTensor  # [S', S]

    def named(self, prefix="proj"):
        return {f"{prefix}.wc": self.wc, f"{prefix}.bc": self.bc, f"{prefix}.wt": self.wt}


def init_projector(rng, s_in, f_in, s_out, f_out):
    if min(s_in, f_in, s_out, f_out) < 1:
        raise ConfigError("projector dimensions must all be positive")
    return TokenProjector(
        wc=DiffTensor(rng.normal((f_in, f_out), std=INIT_STD), requires_grad=True),
        bc=DiffTensor(np.zeros(f_out), requires_grad=True),
        wt=DiffTensor(rng.normal((s_out, s_in), std=INIT_STD), requires_grad=True),
    )


def project_tokens(p_tokens, proj):
    """Visual tokens [S, F] -> [S', F']."""
    if p_tokens.shape[1] != proj.wc.shape[0] or p_tokens.shape[0] != proj.wt.shape[1]:
        raise ContractViolation(
            f"projector expects [{proj.wt.shape[1]}, {proj.wc.shape[0]}] tokens, "
            f"got {tuple(p_tokens.shape)}"
        )
    mixed = matmul(p_tokens, proj.wc) + proj.bc
    return matmul(proj.wt, mixed)


# ---------------------------------------------------------------------------
# Text encoder
# ---------------------------------------------------------------------------


@dataclass
class TextBackbone:
    """Bidirectional token encoder producing one alignment vector per report."""

    embed: DiffTensor  # [vocab, F']
    pos: DiffTensor  # [L_txt, F']
    blocks: list = field(default_factory=list)

    def named(self, prefix="txt"):
        out = {f"{prefix}.embed": self.embed, f"{prefix}.pos": self.pos}
        for i, blk in enumerate(self.blocks):
            out.update(blk.named(f"{prefix}.blk{i}"))
        return out


def init_text_backbone(rng, vocab_size, max_len, f_dim, n_blocks=2, n_heads=4):
    return TextBackbone(
        embed=DiffTensor(rng.normal((vocab_size, f_dim), std=INIT_STD), requires_grad=True),
        pos=DiffTensor(rng.normal((max_len, f_dim), std=INIT_STD), requires_grad=True),
        blocks=[init_block(rng, f_dim, n_heads) for _ in range(n_blocks)],
    )


def encode_report(seq, tb, attn_scale="sqrt_dh"):
    """TextTokenSeq -> alignment vector [F'].

    PAD positions are masked out of attention and excluded from the final
    mean, so appending PAD never changes the result.
    """
    ids = seq.ids
    if len(ids) > tb.pos.shape[0]:
        raise ContractViolation(
            f"sequence length {len(ids)} exceeds position table {tb.pos.shape[0]}"
        )
    not_pad = ids != PAD_ID
    if not not_pad.any():
        raise ContractViolation("cannot encode an all-PAD sequence")
    x = take_rows(tb.embed, ids) + take_rows(tb.pos, np.arange(len(ids)))
    allow = np.broadcast_to(not_pad[None, :], (len(ids), len(ids)))
    for blk in tb.blocks:
        x = transformer_block(x, blk, allow, attn_scale)
    kept = take_rows(x, np.flatnonzero(not_pad))
    return tmean(kept, axis=0)
