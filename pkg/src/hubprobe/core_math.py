"""Numerical kernel: similarity statistics, hand-differentiated layers,
Adam, and finite-difference gradient checking.

All arithmetic is float64. Layers accept either a single vector of shape
``(d,)`` or a batch of shape ``(n, d)``; weights follow the ``(out, in)``
convention so that ``y = W x + b``.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
from scipy.stats import rankdata

from .errors import (
    BadLabel,
    DimMismatch,
    LengthMismatch,
    ShapeMismatch,
    ZeroNorm,
    ZeroVariance,
)

FD_STEP = 1e-5


# ---------------------------------------------------------------------------
# random streams
# ---------------------------------------------------------------------------

def label_hash(label: str) -> int:
    return zlib.crc32(label.encode("utf-8"))


def rng_for(seed: int, *labels: str | int) -> np.random.Generator:
    """PCG64 generator for the substream ``seed/label/label/...``.

    The same (seed, labels) always yields the same stream, and different
    labels give statistically independent streams.
    """
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for lab in labels:
        entropy.append(label_hash(lab) if isinstance(lab, str) else int(lab) & 0xFFFFFFFF)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


# ---------------------------------------------------------------------------
# similarity / correlation
# ---------------------------------------------------------------------------

def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimMismatch(f"cosine of vectors with dims {a.shape} and {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ZeroNorm("cosine similarity of a zero-norm vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def normalize_rows(x: np.ndarray) -> np.ndarray:
    """Scale each row to unit L2 norm; raises ZeroNorm on an all-zero row."""
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norms == 0.0):
        raise ZeroNorm("cannot normalize a zero-norm row")
    return x / norms


def _paired(x, y) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.size != y.size:
        raise LengthMismatch(f"lengths {x.size} and {y.size} differ")
    if x.size < 2:
        raise LengthMismatch("correlation needs at least two observations")
    return x, y


def pearson(x, y) -> float:
    x, y = _paired(x, y)
    xc = x - x.mean()
    yc = y - y.mean()
    sx = np.sqrt(xc @ xc)
    sy = np.sqrt(yc @ yc)
    if sx == 0.0 or sy == 0.0:
        raise ZeroVariance("pearson correlation of a constant sequence")
    return float(np.clip((xc @ yc) / (sx * sy), -1.0, 1.0))


def average_ranks(x) -> np.ndarray:
    """1-based ranks; tied values share the mean of the positions they span."""
    return rankdata(np.asarray(x, dtype=np.float64), method="average")


def spearman(x, y) -> float:
    x, y = _paired(x, y)
    return pearson(average_ranks(x), average_ranks(y))


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

def affine_forward(x, W, b):
    """Return ``(W x + b, cache)``."""
    x = np.asarray(x, dtype=np.float64)
    if W.ndim != 2 or x.shape[-1] != W.shape[1]:
        raise DimMismatch(f"input dim {x.shape[-1]} does not match weight {W.shape}")
    if b is not None and b.shape != (W.shape[0],):
        raise DimMismatch(f"bias shape {b.shape} does not match weight {W.shape}")
    y = x @ W.T
    if b is not None:
        y = y + b
    return y, (x, W)


def affine_backward(grad_out, cache):
    """Return ``(grad_x, grad_W, grad_b)`` for the cached affine call."""
    x, W = cache
    g = np.asarray(grad_out, dtype=np.float64)
    grad_x = g @ W
    if g.ndim == 1:
        grad_W = np.outer(g, x)
        grad_b = g.copy()
    else:
        grad_W = g.T @ x
        grad_b = g.sum(axis=0)
    return grad_x, grad_W, grad_b


def tanh_forward(x):
    y = np.tanh(np.asarray(x, dtype=np.float64))
    return y, y


def tanh_backward(grad_out, cache):
    y = cache
    return grad_out * (1.0 - y * y)


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, label):
    """Stabilised cross-entropy and its gradient w.r.t. the logits.

    For a batch ``(n, C)`` with labels ``(n,)`` the loss is the batch mean
    and the gradient is scaled by ``1/n`` accordingly.
    """
    z = np.asarray(logits, dtype=np.float64)
    if z.shape[-1] < 2:
        raise DimMismatch("softmax cross-entropy needs at least two classes")
    single = z.ndim == 1
    z2 = z[None, :] if single else z
    labels = np.atleast_1d(np.asarray(label))
    if labels.shape != (z2.shape[0],):
        raise BadLabel(f"expected {z2.shape[0]} labels, got shape {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        if not np.all(labels == np.round(labels)):
            raise BadLabel("labels must be integers")
        labels = labels.astype(np.int64)
    if np.any(labels < 0) or np.any(labels >= z2.shape[1]):
        raise BadLabel(f"label outside [0, {z2.shape[1]})")

    shifted = z2 - z2.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(z2.shape[0])
    losses = log_norm - shifted[rows, labels]
    grad = np.exp(shifted - log_norm[:, None])
    grad[rows, labels] -= 1.0
    if single:
        return float(losses[0]), grad[0]
    n = z2.shape[0]
    return float(losses.mean()), grad / n


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState):
    """One bias-corrected Adam update, applied in place to ``params``.

    Only the names present in ``grads`` are updated; moment accumulators are
    created lazily on first sight of a parameter.
    """
    if state.lr <= 0:
        raise ValueError("learning rate must be positive")
    state.t += 1
    t = state.t
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ShapeMismatch(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        elif m.shape != p.shape:
            raise ShapeMismatch(f"optimizer state for {name!r} has shape {m.shape}")
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def relative_error(a, b, floor: float = 1e-6) -> np.ndarray:
    # the floor keeps round-off on near-zero gradients (~1e-11) from dominating
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def grad_check(
    fn: Callable[[], tuple[float, Mapping[str, np.ndarray]]],
    params: Mapping[str, np.ndarray],
    rng: np.random.Generator | None = None,
    max_coords: int = 20,
    step: float = FD_STEP,
) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``fn`` evaluates the loss at the current contents of ``params`` and
    returns ``(loss, grads)``; ``params`` is perturbed in place and restored.
    At most ``max_coords`` coordinates per tensor are sampled.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    _, analytic = fn()
    analytic = {k: np.array(v, copy=True) for k, v in analytic.items()}
    worst = 0.0
    for name, grad in analytic.items():
        p = params[name]
        flat = p.reshape(-1)
        n = flat.size
        idx = np.arange(n) if n <= max_coords else rng.choice(n, size=max_coords, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            plus, _ = fn()
            flat[i] = orig - step
            minus, _ = fn()
            flat[i] = orig
            numeric = (plus - minus) / (2.0 * step)
            worst = max(worst, float(relative_error(grad.reshape(-1)[i], numeric)))
    return worst
