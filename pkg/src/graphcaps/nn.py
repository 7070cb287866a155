"""Capsule primitives, losses, and the Adam optimizer.

Everything operates on :class:`graphcaps.autodiff.Tensor`, so gradients flow
through routing iterations, squashing and the losses without special cases.
Plain numpy arrays are accepted and lifted to constants.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff
from .autodiff import Tensor

# Stabilizer added inside the norm square root; keeps squash and capsule norms
# differentiable at the zero vector.  Included in all gradient checks.
NORM_EPS = 1e-9


class TrainingError(RuntimeError):
    """Raised when training hits a non-finite loss or gradient."""


def capsule_norms(v, axis: int = -1) -> Tensor:
    """Vector norms along ``axis`` with an epsilon-stabilized sqrt."""
    v = Tensor._lift(v)
    return ((v * v).sum(axis=axis) + NORM_EPS).sqrt()


def squash(v, axis: int = -1) -> Tensor:
    """Shrink vectors to norm |v|^2 / (1 + |v|^2) without changing direction.

    The norm in the denominator uses the epsilon-stabilized sqrt, so the map
    (and its gradient) is well defined at the zero vector, where it returns 0.
    """
    v = Tensor._lift(v)
    if axis in (-1, v.data.ndim - 1):
        return autodiff.squash_op(v, eps=NORM_EPS)
    sq = (v * v).sum(axis=axis, keepdims=True)
    scale = sq / ((1.0 + sq) * (sq + NORM_EPS).sqrt())
    return v * scale


def dynamic_routing(predictions, iterations: int, return_trace: bool = False):
    """Routing-by-agreement between two capsule layers.

    ``predictions`` is (n_in, n_out, d_out) or batched (B, n_in, n_out, d_out).
    Logits start at zero; each round couples by softmax over the output
    capsules, forms weighted prediction sums, squashes, and (on all but the
    last round) adds the prediction/output agreement back onto the logits.
    Gradients flow through the entire unrolled loop.

    Returns the output capsules, shaped like the input minus the n_in axis;
    with ``return_trace`` also the per-iteration coupling coefficients.
    """
    if iterations < 1:
        raise ValueError("routing needs at least one iteration")
    u_hat = Tensor._lift(predictions)
    squeeze = u_hat.data.ndim == 3
    if squeeze:
        u_hat = u_hat.reshape((1,) + u_hat.data.shape)
    if u_hat.data.ndim != 4:
        raise ValueError(f"predictions must be 3- or 4-D, got shape {u_hat.data.shape}")
    B, n_in, n_out, d_out = u_hat.data.shape

    logits = Tensor(np.zeros((B, n_in, n_out)))
    couplings = []
    v = None
    for it in range(iterations):
        c = logits.softmax(axis=2)
        couplings.append(c.data.copy())
        s = autodiff.route_weighted_sum(c, u_hat)
        v = squash(s, axis=-1)
        if it < iterations - 1:
            logits = logits + autodiff.route_agreement(u_hat, v)
    if squeeze:
        v = v.reshape(n_out, d_out)
    if return_trace:
        return v, couplings
    return v


def margin_loss(norms, target, lam: float = 0.5, m_plus: float = 0.9, m_minus: float = 0.1) -> Tensor:
    """Per-class hinge-squared loss on capsule norms.

    sum_k [ T_k * max(0, m+ - |v_k|)^2 + lam * (1 - T_k) * max(0, |v_k| - m-)^2 ]

    ``norms`` is (C,) for one sample or (B, C) batched with ``target`` per
    sample; the batched form averages over the batch.
    """
    norms = Tensor._lift(norms)
    batched = norms.data.ndim == 2
    C = norms.data.shape[-1]
    t = np.zeros(norms.data.shape)
    if batched:
        t[np.arange(norms.data.shape[0]), np.asarray(target, dtype=int)] = 1.0
    else:
        t[int(target)] = 1.0
    present = (m_plus - norms).relu() ** 2
    absent = (norms - m_minus).relu() ** 2
    per_class = Tensor(t) * present + Tensor(lam * (1.0 - t)) * absent
    per_sample = per_class.sum(axis=-1)
    return per_sample.mean() if batched else per_sample


def binary_margin_loss(norms, target) -> Tensor:
    """Cross-entropy over a softmax of the two capsule norms.

    Only defined for exactly two classes; batched input averages over the
    batch.
    """
    norms = Tensor._lift(norms)
    C = norms.data.shape[-1]
    if C != 2:
        raise ValueError(f"binary loss requires exactly 2 classes, got {C}")
    return cross_entropy(norms, target)


def cross_entropy(logits, target) -> Tensor:
    """Mean negative log softmax-probability of the target class."""
    logits = Tensor._lift(logits)
    batched = logits.data.ndim == 2
    t = np.zeros(logits.data.shape)
    if batched:
        t[np.arange(logits.data.shape[0]), np.asarray(target, dtype=int)] = 1.0
    else:
        t[int(target)] = 1.0
    # log-sum-exp with a detached shift: a constant offset does not change the result
    shift = logits.data.max(axis=-1, keepdims=True)
    lse = ((logits - shift).exp().sum(axis=-1, keepdims=True)).log() + Tensor(shift)
    nll = ((lse - logits) * Tensor(t)).sum(axis=-1)
    return nll.mean() if batched else nll


def reconstruction_loss(reconstructed, original) -> Tensor:
    """Mean squared difference over all elements."""
    reconstructed = Tensor._lift(reconstructed)
    original = Tensor._lift(original)
    if reconstructed.data.shape != original.data.shape:
        raise ValueError(
            f"shape mismatch: {reconstructed.data.shape} vs {original.data.shape}"
        )
    diff = reconstructed - original
    return (diff * diff).mean()


def total_loss(ml, mse, alpha: float = 1.0) -> Tensor:
    """Combined objective: margin (or cross-entropy) term plus scaled
    reconstruction term."""
    return Tensor._lift(ml) + Tensor._lift(mse) * alpha


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    base_lr: float
    decay: float = 0.0
    lr_floor: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def effective_lr(self, epoch: int) -> float:
        return max(self.base_lr * float(np.exp(-self.decay * epoch)), self.lr_floor)


def adam_step(params: dict, grads: dict, state: AdamState, epoch: int) -> AdamState:
    """One bias-corrected Adam update, in place on ``params``.

    The step size decays exponentially with the epoch index and is floored at
    ``state.lr_floor``.  Raises :class:`TrainingError` naming the parameter if
    any gradient is non-finite.
    """
    lr = state.effective_lr(epoch)
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter {name!r} {p.data.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return state


# ---------------------------------------------------------------------------
# parameter checkpoints
# ---------------------------------------------------------------------------
#
# Layout: magic b"GCKPT\0", u32 version (1), u32 array count; then per array:
# u16 name length, utf-8 name, u8 ndim, u32 dims..., float64 values row-major.

_CKPT_MAGIC = b"GCKPT\x00"
_CKPT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def save_params(path: str, params: dict) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<II", _CKPT_VERSION, len(params)))
        for name in sorted(params):
            arr = params[name].data if isinstance(params[name], Tensor) else params[name]
            arr = np.asarray(arr, dtype="<f8")  # asarray keeps 0-dim shapes intact
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_params(path: str) -> dict:
    if not os.path.isfile(path):
        raise CheckpointError(f"checkpoint not found: {path}")
    out = {}
    with open(path, "rb") as fh:
        if fh.read(len(_CKPT_MAGIC)) != _CKPT_MAGIC:
            raise CheckpointError(f"{path}: bad magic")
        version, count = struct.unpack("<II", fh.read(8))
        if version != _CKPT_VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            nbytes = 8 * int(np.prod(shape)) if ndim else 8
            blob = fh.read(nbytes)
            if len(blob) != nbytes:
                raise CheckpointError(f"{path}: truncated array {name!r}")
            out[name] = np.frombuffer(blob, dtype="<f8").reshape(shape).copy()
    return out
