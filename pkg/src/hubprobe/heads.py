"""Task-specific components on top of the hub representation.

* ``RetrievalHead``: one-hidden-layer tanh MLP producing an embedding in the
  candidate space, trained with a cosine hinge loss against the candidates.
* ``FoilHead``: a single affine layer producing two logits
  (0 = original caption, 1 = foiled caption).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import core_math as cm
from .encoder import uniform_fan_in
from .errors import BadLabel, ConfigError, DimMismatch, ZeroNorm

ORIGINAL = 0
FOILED = 1


@dataclass
class RetrievalHead:
    tensors: dict[str, np.ndarray]
    version: int = field(default=0, compare=False)

    @property
    def d_in(self) -> int:
        return self.tensors["W1"].shape[1]

    @property
    def d_out(self) -> int:
        return self.tensors["W2"].shape[0]

    def touch(self) -> None:
        self.version += 1

    def copy(self) -> "RetrievalHead":
        return RetrievalHead({k: v.copy() for k, v in self.tensors.items()})


@dataclass
class FoilHead:
    tensors: dict[str, np.ndarray]
    version: int = field(default=0, compare=False)

    @property
    def d_in(self) -> int:
        return self.tensors["W"].shape[1]

    def touch(self) -> None:
        self.version += 1

    def copy(self) -> "FoilHead":
        return FoilHead({k: v.copy() for k, v in self.tensors.items()})


@dataclass(frozen=True)
class LossConfig:
    margin: float = 0.1
    aggregation: str = "mean"

    def __post_init__(self):
        if not np.isfinite(self.margin) or self.margin < 0:
            raise ConfigError(f"margin must be finite and non-negative, got {self.margin}")
        if self.aggregation not in ("mean", "sum"):
            raise ConfigError(f"aggregation must be 'mean' or 'sum', got {self.aggregation!r}")


def init_retrieval_head(d_h: int, d_hid: int, d_out: int, rng: np.random.Generator) -> RetrievalHead:
    return RetrievalHead({
        "W1": uniform_fan_in(rng, d_hid, d_h),
        "b1": np.zeros(d_hid),
        "W2": uniform_fan_in(rng, d_out, d_hid),
        "b2": np.zeros(d_out),
    })


def init_foil_head(d_h: int, rng: np.random.Generator) -> FoilHead:
    return FoilHead({"W": uniform_fan_in(rng, 2, d_h), "b": np.zeros(2)})


# ---------------------------------------------------------------------------
# retrieval
# ---------------------------------------------------------------------------

def head_forward(h, head: RetrievalHead):
    h = np.asarray(h, dtype=np.float64)
    if h.shape[-1] != head.d_in:
        raise DimMismatch(f"head expects input dim {head.d_in}, got {h.shape[-1]}")
    t = head.tensors
    a, c1 = cm.affine_forward(h, t["W1"], t["b1"])
    z, ct = cm.tanh_forward(a)
    g, c2 = cm.affine_forward(z, t["W2"], t["b2"])
    return g, (c1, ct, c2)


def head_backward(grad_g, cache):
    """Return ``(param_grads, grad_h)``."""
    c1, ct, c2 = cache
    gz, gW2, gb2 = cm.affine_backward(grad_g, c2)
    ga = cm.tanh_backward(gz, ct)
    gh, gW1, gb1 = cm.affine_backward(ga, c1)
    return {"W1": gW1, "b1": gb1, "W2": gW2, "b2": gb2}, gh


def _unit(x: np.ndarray, what: str) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norms == 0.0):
        raise ZeroNorm(f"zero-norm {what}")
    return x / norms, norms


def retrieval_loss_batch(G, candidates, gt_index, cfg: LossConfig = LossConfig(), mask=None):
    """Mean hinge loss over a batch and its gradient w.r.t. ``G``.

    ``G`` is ``(n, d)``, ``candidates`` ``(n, C, d)``, ``gt_index`` ``(n,)``.
    ``mask`` ``(n, C)`` marks real candidates when rows are padded. For each
    negative ``j``: ``max(0, margin + cos(g, e_j) - cos(g, e_gt))``, then
    aggregated per item (mean or sum over negatives) and averaged over items.
    """
    G = np.asarray(G, dtype=np.float64)
    E = np.asarray(candidates, dtype=np.float64)
    n, C, d = E.shape
    gt = np.asarray(gt_index, dtype=np.int64)
    mask = np.ones((n, C), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    rows = np.arange(n)

    gn, gnorm = _unit(G, "generated embedding")
    safe = np.where(mask[..., None], E, 1.0)
    en, _ = _unit(safe, "candidate embedding")
    cos = np.einsum("ncd,nd->nc", en, gn)
    cos_gt = cos[rows, gt]

    neg = mask.copy()
    neg[rows, gt] = False
    hinge = cfg.margin + cos - cos_gt[:, None]
    active = neg & (hinge > 0.0)
    per_item = np.where(active, hinge, 0.0).sum(axis=1)
    n_neg = neg.sum(axis=1)
    if cfg.aggregation == "mean":
        scale = 1.0 / np.maximum(n_neg, 1)
    else:
        scale = np.ones(n)
    per_item = per_item * scale
    loss = float(per_item.mean())

    # d loss / d cos_c
    w = active.astype(np.float64) * scale[:, None]
    w[rows, gt] = -w.sum(axis=1)
    w /= n
    grad = (np.einsum("nc,ncd->nd", w, en) - (w * cos).sum(axis=1)[:, None] * gn) / gnorm
    return loss, grad


def retrieval_loss(g, gt_embedding, negative_embeddings, cfg: LossConfig = LossConfig()):
    """Hinge loss for one datapoint; returns ``(loss, grad_g)``."""
    g = np.asarray(g, dtype=np.float64)
    negs = np.asarray(negative_embeddings, dtype=np.float64).reshape(-1, g.shape[-1])
    cands = np.vstack([np.asarray(gt_embedding, dtype=np.float64)[None, :], negs])
    loss, grad = retrieval_loss_batch(g[None, :], cands[None], np.array([0]), cfg)
    return loss, grad[0]


@dataclass
class RankResult:
    ranking: np.ndarray
    rank_of_gt: int
    precision_at: dict[int, float]
    reciprocal_rank: float


def candidate_cosines(G, candidates, mask=None) -> np.ndarray:
    G = np.asarray(G, dtype=np.float64)
    E = np.asarray(candidates, dtype=np.float64)
    if mask is not None:
        E = np.where(np.asarray(mask, dtype=bool)[..., None], E, 1.0)
    gn, _ = _unit(G, "generated embedding")
    en, _ = _unit(E, "candidate embedding")
    cos = np.einsum("...cd,...d->...c", en, gn)
    if mask is not None:
        cos = np.where(mask, cos, -np.inf)
    return cos


def gt_ranks(cos: np.ndarray, gt_index) -> np.ndarray:
    """1-based rank of the ground truth; ties go to the lower candidate index."""
    cos = np.atleast_2d(cos)
    gt = np.atleast_1d(np.asarray(gt_index, dtype=np.int64))
    rows = np.arange(cos.shape[0])
    s_gt = cos[rows, gt][:, None]
    idx = np.arange(cos.shape[1])[None, :]
    ahead = (cos > s_gt) | ((cos == s_gt) & (idx < gt[:, None]))
    return 1 + ahead.sum(axis=1)


def rank_candidates(g, candidates, gt_index: int, ks=(1,)) -> RankResult:
    cos = candidate_cosines(g, candidates)
    # stable sort on -cos keeps ascending index order among ties
    ranking = np.argsort(-cos, kind="stable")
    rank = int(gt_ranks(cos[None, :], [gt_index])[0])
    return RankResult(
        ranking=ranking,
        rank_of_gt=rank,
        precision_at={k: float(rank <= k) for k in ks},
        reciprocal_rank=1.0 / rank,
    )


# ---------------------------------------------------------------------------
# FOIL classifier
# ---------------------------------------------------------------------------

def foil_forward(h, head: FoilHead):
    """Return ``(probabilities, logits, cache)``."""
    h = np.asarray(h, dtype=np.float64)
    if h.shape[-1] != head.d_in:
        raise DimMismatch(f"FOIL head expects input dim {head.d_in}, got {h.shape[-1]}")
    logits, cache = cm.affine_forward(h, head.tensors["W"], head.tensors["b"])
    return cm.softmax(logits), logits, cache


def foil_loss(logits, label):
    label_arr = np.atleast_1d(np.asarray(label))
    if np.any((label_arr != ORIGINAL) & (label_arr != FOILED)):
        raise BadLabel("FOIL labels must be 0 (original) or 1 (foiled)")
    return cm.softmax_cross_entropy(logits, label)


def foil_backward(grad_logits, cache):
    """Return ``(param_grads, grad_h)``."""
    gh, gW, gb = cm.affine_backward(grad_logits, cache)
    return {"W": gW, "b": gb}, gh
