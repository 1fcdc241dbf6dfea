"""Reverse-mode automatic differentiation over dense float64 arrays.

Everything in this package differentiates through the primitives defined
here: a ``DiffTensor`` wraps a numpy array, a ``Tape`` records each
primitive application while active, and ``backward`` replays the tape in
reverse to accumulate gradients into the participating leaves.

All arithmetic is 64-bit. There is no broadcasting magic beyond numpy's
own rules; backward rules un-broadcast by summing over expanded axes.
The module also hosts the optimizer (``adamw_step``), the central
finite-difference gradient checker, and the seeded RNG used for every
stochastic decision in the package.
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .errors import (
    ContractViolation,
    EmptyAttentionError,
    NumericError,
    UnknownNodeError,
)

_uid_counter = itertools.count()

# Stack of active tapes; ops record onto the innermost one.
_TAPE_STACK: list["Tape"] = []


class DiffTensor:
    """A shaped float64 array that can participate in differentiation.

    ``grad`` is populated by ``backward`` for requires_grad leaves and is
    always either None or an array of identical shape.
    """

    __slots__ = ("data", "requires_grad", "grad", "uid", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.uid = next(_uid_counter)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        if self.data.size != 1:
            raise ContractViolation(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"DiffTensor(shape={tuple(self.shape)}, requires_grad={self.requires_grad}{tag})"

    # Operator sugar; scalars are wrapped as constant tensors.
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def _wrap(x):
    if isinstance(x, DiffTensor):
        return x
    return DiffTensor(np.asarray(x, dtype=np.float64))


@dataclass
class TapeEntry:
    """One recorded primitive application."""

    rule: str
    out_uid: int
    inputs: tuple
    backward_fn: object  # grad_out -> tuple of input grads (None where not needed)


class Tape:
    """Ordered record of primitive applications, usable as a context manager.

    Topological order is guaranteed by construction: an entry is appended
    at the moment its output is created, so every input of entry *i* was
    produced by an earlier entry or is a leaf.
    """

    def __init__(self):
        self.entries: list[TapeEntry] = []
        self._output_uids: set[int] = set()

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def record(self, rule, out, inputs, backward_fn):
        self.entries.append(TapeEntry(rule, out.uid, tuple(inputs), backward_fn))
        self._output_uids.add(out.uid)

    def produced(self, tensor):
        return tensor.uid in self._output_uids


def _active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _make_out(data, inputs, rule, backward_fn):
    """Create the output tensor of a primitive and record it if a tape is live."""
    requires = any(t.requires_grad for t in inputs)
    out = DiffTensor(data, requires_grad=requires)
    tape = _active_tape()
    if tape is not None and requires:
        tape.record(rule, out, inputs, backward_fn)
    return out


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Elementwise and linear-algebra primitives
# ---------------------------------------------------------------------------


def add(a, b):
    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make_out(a.data + b.data, (a, b), "add", bwd)


def sub(a, b):
    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make_out(a.data - b.data, (a, b), "sub", bwd)


def mul(a, b):
    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make_out(a.data * b.data, (a, b), "mul", bwd)


def div(a, b):
    def bwd(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _make_out(a.data / b.data, (a, b), "div", bwd)


def scale(a, c):
    """Multiply by a plain Python scalar."""
    c = float(c)

    def bwd(g):
        return (g * c,)

    return _make_out(a.data * c, (a,), "scale", bwd)


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ContractViolation(
            f"matmul expects 2-D operands, got {a.data.ndim}-D and {b.data.ndim}-D"
        )

    def bwd(g):
        return g @ b.data.T, a.data.T @ g

    return _make_out(a.data @ b.data, (a, b), "matmul", bwd)


def transpose(a):
    def bwd(g):
        return (g.T,)

    return _make_out(a.data.T, (a,), "transpose", bwd)


def reshape(a, shape):
    shape = tuple(shape)

    def bwd(g):
        return (g.reshape(a.shape),)

    return _make_out(a.data.reshape(shape), (a,), "reshape", bwd)


def tsum(a, axis=None, keepdims=False):
    """Summation. A full reduction yields shape (1,) — the scalar convention."""
    if axis is None:
        out_data = a.data.sum().reshape(1)

        def bwd(g):
            return (np.broadcast_to(g.reshape(()), a.shape).copy(),)

    else:
        out_data = a.data.sum(axis=axis, keepdims=keepdims)

        def bwd(g):
            gg = g if keepdims else np.expand_dims(g, axis)
            return (np.broadcast_to(gg, a.shape).copy(),)

    return _make_out(out_data, (a,), "sum", bwd)


def tmean(a, axis=None, keepdims=False):
    """Arithmetic mean; same reduction conventions as ``tsum``."""
    if axis is None:
        count = a.data.size
        out_data = a.data.mean().reshape(1)

        def bwd(g):
            return (np.broadcast_to(g.reshape(()), a.shape) / count,)

    else:
        count = a.data.shape[axis]
        out_data = a.data.mean(axis=axis, keepdims=keepdims)

        def bwd(g):
            gg = g if keepdims else np.expand_dims(g, axis)
            return (np.broadcast_to(gg, a.shape) / count,)

    return _make_out(out_data, (a,), "mean", bwd)


def sqrt(a):
    out_data = np.sqrt(a.data)

    def bwd(g):
        return (g * 0.5 / out_data,)

    return _make_out(out_data, (a,), "sqrt", bwd)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a):
    """Exact Gaussian-error-linear unit: x * Phi(x)."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))

    def bwd(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        return (g * (cdf + x * pdf),)

    return _make_out(x * cdf, (a,), "gelu", bwd)


def concat(tensors, axis=0):
    tensors = tuple(tensors)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make_out(np.concatenate([t.data for t in tensors], axis=axis), tensors, "concat", bwd)


def slice_rows(a, start, stop):
    """Contiguous row slice a[start:stop]; gradient scatters back into place."""

    def bwd(g):
        full = np.zeros_like(a.data)
        full[start:stop] = g
        return (full,)

    return _make_out(a.data[start:stop].copy(), (a,), "slice_rows", bwd)


def take_rows(a, indices):
    """Gather rows by integer index; duplicate indices accumulate on backward."""
    idx = np.asarray(indices, dtype=np.intp)

    def bwd(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make_out(a.data[idx].copy(), (a,), "take_rows", bwd)


# ---------------------------------------------------------------------------
# Fused neural-net primitives
# ---------------------------------------------------------------------------

LAYER_NORM_EPS = 1e-5


def layer_norm(x, gamma, beta):
    """Row-wise layer normalization: ((x - mean) / sqrt(var + eps)) * gamma + beta."""
    if x.data.ndim != 2:
        raise ContractViolation(f"layer_norm expects [n, d] input, got shape {x.shape}")
    d = x.data.shape[1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise ContractViolation(
            f"layer_norm parameter shapes {gamma.data.shape}/{beta.data.shape} "
            f"do not match feature dim {d}"
        )
    mu = x.data.mean(axis=1, keepdims=True)
    var = x.data.var(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + LAYER_NORM_EPS)
    xhat = (x.data - mu) * inv_std

    def bwd(g):
        # dL/dxhat per row, then the standard layer-norm input gradient.
        gxhat = g * gamma.data
        gx = inv_std * (
            gxhat
            - gxhat.mean(axis=1, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=1, keepdims=True)
        )
        return gx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _make_out(xhat * gamma.data + beta.data, (x, gamma, beta), "layer_norm", bwd)


def masked_softmax(logits, allow):
    """Softmax over the last axis restricted to positions where ``allow`` is True.

    Disallowed positions come out exactly zero; allowed positions are
    positive and normalize to one. The mask is applied additively (minus
    infinity on disallowed logits) before exponentiation, and the
    stabilizing max is therefore taken over allowed entries only.
    """
    allow_arr = np.broadcast_to(np.asarray(allow, dtype=bool), logits.data.shape)
    if not allow_arr.reshape(-1, allow_arr.shape[-1]).any(axis=1).all():
        raise EmptyAttentionError("masked_softmax: a row has no allowed positions")
    shifted = np.where(allow_arr, logits.data, -np.inf)
    shifted = shifted - shifted.max(axis=-1, keepdims=True)
    expd = np.where(allow_arr, np.exp(shifted), 0.0)
    probs = expd / expd.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (probs * g).sum(axis=-1, keepdims=True)
        return (probs * (g - dot),)

    return _make_out(probs, (logits,), "masked_softmax", bwd)


def cross_entropy_loss(logits, targets, ignore_index=-1):
    """Mean negative log-likelihood of ``targets`` under softmax(logits).

    Positions whose target equals ``ignore_index`` contribute nothing.
    An all-ignored batch returns 0 and emits a RuntimeWarning.
    """
    if logits.data.ndim != 2:
        raise ContractViolation(f"cross_entropy expects [n, vocab] logits, got {logits.shape}")
    tgt = np.asarray(targets, dtype=np.intp)
    n, vocab = logits.data.shape
    if tgt.shape != (n,):
        raise ContractViolation(f"targets shape {tgt.shape} does not match {n} rows")
    keep = tgt != ignore_index
    if ((tgt < 0) | (tgt >= vocab))[keep].any():
        raise ContractViolation("cross_entropy target outside [0, vocab)")
    n_valid = int(keep.sum())
    if n_valid == 0:
        warnings.warn("cross_entropy_loss: every position ignored; loss is 0", RuntimeWarning)
        return DiffTensor(np.zeros(1))

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    picked = log_probs[np.arange(n), np.where(keep, tgt, 0)]
    loss = -(picked * keep).sum() / n_valid

    def bwd(g):
        probs = np.exp(log_probs)
        grad = probs
        grad[np.arange(n), np.where(keep, tgt, 0)] -= 1.0
        grad *= keep[:, None] / n_valid
        return (grad * g.reshape(()),)

    return _make_out(np.array([loss]), (logits,), "cross_entropy", bwd)


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------


def backward(tape, loss):
    """Accumulate d(loss)/d(leaf) for every requires_grad leaf on the tape.

    Returns a map from tensor uid to gradient array. Leaves that cannot be
    reached from ``loss`` receive an explicit zero gradient.
    """
    if loss.data.size != 1:
        raise ContractViolation(f"backward needs a scalar loss, got shape {loss.shape}")
    if not tape.produced(loss):
        raise UnknownNodeError("loss tensor was not produced by this tape")

    flows = {loss.uid: np.ones_like(loss.data)}
    leaves = {}
    for entry in reversed(tape.entries):
        for t in entry.inputs:
            if t.requires_grad and not tape.produced(t):
                leaves[t.uid] = t
        g = flows.pop(entry.out_uid, None)
        if g is None:
            continue
        for t, ig in zip(entry.inputs, entry.backward_fn(g)):
            if ig is None or not t.requires_grad:
                continue
            if t.uid in flows:
                flows[t.uid] = flows[t.uid] + ig
            else:
                flows[t.uid] = ig

    grad_map = {}
    for uid, t in leaves.items():
        g = flows.get(uid)
        if g is None:
            g = np.zeros_like(t.data)
        t.grad = g
        grad_map[uid] = g
    return grad_map


# ---------------------------------------------------------------------------
# AdamW
# ---------------------------------------------------------------------------


@dataclass
class AdamWState:
    """Per-parameter moment buffers plus the shared step counter."""

    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params, grads, state):
    """One decoupled-weight-decay Adam update, in place.

    ``params`` maps name -> DiffTensor, ``grads`` maps name -> array of
    matching shape. Parameters without an entry in ``grads`` are skipped.
    """
    state.t += 1
    t = state.t
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for parameter {name!r}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        p.data -= state.lr * (m_hat / (np.sqrt(v_hat) + state.eps) + state.weight_decay * p.data)
    return params, state


# ---------------------------------------------------------------------------
# Finite-difference gradient checking
# ---------------------------------------------------------------------------


def finite_diff_check(f, params, eps=1e-5):
    """Compare analytic gradients of scalar ``f()`` against central differences.

    ``f`` must be deterministic and close over ``params`` (name -> DiffTensor).
    Returns the maximum relative error
    |analytic - numeric| / max(1e-8, |analytic| + |numeric|); a NaN on
    either side yields +inf rather than a silent pass.
    """
    if not (0.0 < eps <= 1e-2):
        raise ContractViolation(f"eps must lie in (0, 1e-2], got {eps}")

    tape = Tape()
    with tape:
        loss = f()
    backward(tape, loss)
    analytic = {name: p.grad.copy() for name, p in params.items()}

    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        a_flat = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = f().item()
            flat[i] = orig - eps
            down = f().item()
            flat[i] = orig
            numeric = (up - down) / (2.0 * eps)
            a = a_flat[i]
            if math.isnan(a) or math.isnan(numeric):
                return math.inf
            rel = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            worst = max(worst, rel)
    return worst


# ---------------------------------------------------------------------------
# Seeded randomness
# ---------------------------------------------------------------------------


class SeededRng:
    """Deterministic random source: same seed, same draw sequence.

    Children derived via ``spawn`` depend only on (seed, key), never on
    how many draws the parent has made.
    """

    def __init__(self, seed, _spawn_key=()):
        self.seed = int(seed)
        self._spawn_key = tuple(_spawn_key)
        self._gen = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence(self.seed, spawn_key=self._spawn_key))
        )

    def spawn(self, key):
        return SeededRng(self.seed, self._spawn_key + (int(key),))

    def normal(self, shape, std=1.0):
        return self._gen.normal(0.0, std, size=shape)

    def uniform(self, low, high, shape=None):
        return self._gen.uniform(low, high, size=shape)

    def integers(self, low, high):
        """Uniform integer in [low, high] inclusive."""
        return int(self._gen.integers(low, high + 1))

    def random(self):
        return float(self._gen.random())

    def shuffle(self, items):
        self._gen.shuffle(items)

    def get_state(self):
        return self._gen.bit_generator.state

    def set_state(self, state):
        self._gen.bit_generator.state = state
