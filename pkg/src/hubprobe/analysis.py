"""Comparison of representation spaces.

RSA correlates two spaces' internal similarity structure; nearest-neighbour
overlap counts shared k-NN of paired items; density is the mean pairwise
cosine inside one space.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .core_math import normalize_rows, rng_for, spearman
from .data import DatapointRecord, EmbeddingBank
from .encoder import EncoderParams, encode
from .errors import (
    BadK,
    DataError,
    EmptyCategory,
    MissingVariant,
    SizeMismatch,
    TooSmallForDerangement,
    ZeroNorm,
)


@dataclass
class RepresentationSet:
    label: str
    vectors: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or self.vectors.shape[0] < 2:
            raise DataError(f"{self.label}: need a matrix of at least two vectors")
        if np.any(np.linalg.norm(self.vectors, axis=1) == 0.0):
            raise ZeroNorm(f"{self.label}: zero-norm vector in set")

    def __len__(self) -> int:
        return self.vectors.shape[0]


def _as_matrix(x) -> np.ndarray:
    return x.vectors if isinstance(x, RepresentationSet) else np.asarray(x, dtype=np.float64)


def cosine_matrix(x) -> np.ndarray:
    u = normalize_rows(_as_matrix(x))
    return np.clip(u @ u.T, -1.0, 1.0)


def pairwise_sim_vector(x) -> np.ndarray:
    """Upper-triangle cosines in (0,1), (0,2), ..., (1,2), ... order."""
    sims = cosine_matrix(x)
    iu = np.triu_indices(sims.shape[0], k=1)
    return sims[iu]


def _paired_sizes(a, b) -> tuple[np.ndarray, np.ndarray]:
    A, B = _as_matrix(a), _as_matrix(b)
    if A.shape[0] != B.shape[0]:
        raise SizeMismatch(f"paired sets have {A.shape[0]} and {B.shape[0]} items")
    return A, B


def rsa(a, b) -> float:
    A, B = _paired_sizes(a, b)
    return spearman(pairwise_sim_vector(A), pairwise_sim_vector(B))


def rsa_matrix(sets: Sequence[RepresentationSet]) -> np.ndarray:
    sims = [pairwise_sim_vector(s) for s in sets]
    n = len(sets)
    out = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            out[i, j] = out[j, i] = spearman(sims[i], sims[j])
    return out


def knn_indices(x, k: int) -> np.ndarray:
    """k nearest neighbours by cosine, self excluded, ties to the lower index."""
    sims = cosine_matrix(x)
    n = sims.shape[0]
    if not 1 <= k < n:
        raise BadK(f"k must lie in [1, {n - 1}], got {k}")
    np.fill_diagonal(sims, -np.inf)
    order = np.argsort(-sims, axis=1, kind="stable")
    return order[:, :k]


def neighbour_overlap_counts(a, b, k: int) -> np.ndarray:
    """Per item, how many of its k nearest neighbours both spaces share."""
    A, B = _paired_sizes(a, b)
    na, nb = knn_indices(A, k), knn_indices(B, k)
    return np.array([len(set(ra) & set(rb)) for ra, rb in zip(na, nb)])


def nn_overlap(a, b, k: int) -> float:
    counts = neighbour_overlap_counts(a, b, k)
    return float(counts.sum() / (len(counts) * k))


def density(x, sample_size: int | None = 5000, seed: int = 0) -> float:
    """Mean pairwise cosine of a seeded sample of at most ``sample_size`` rows."""
    X = _as_matrix(x)
    n = X.shape[0]
    size = n if sample_size is None else min(sample_size, n)
    if size < 2:
        raise DataError("density needs at least two vectors")
    if size < n:
        X = X[np.sort(rng_for(seed, "density").choice(n, size=size, replace=False))]
    return float(pairwise_sim_vector(X).mean())


def mean_paired_cosine(a, b) -> float:
    A, B = _paired_sizes(a, b)
    return float(np.mean(np.sum(normalize_rows(A) * normalize_rows(B), axis=1)))


# ---------------------------------------------------------------------------
# input perturbations
# ---------------------------------------------------------------------------

PERTURBATIONS = ("foil_pair", "scrambled_language", "mismatched_image", "mismatched_language")


def random_derangement(n: int, rng: np.random.Generator) -> np.ndarray:
    if n < 2:
        raise TooSmallForDerangement("a derangement needs at least two items")
    while True:
        perm = rng.permutation(n)
        if not np.any(perm == np.arange(n)):
            return perm


def perturb_inputs(records: Sequence[DatapointRecord], mode: str, seed: int = 0,
                   pool: Sequence[DatapointRecord] | None = None) -> list[DatapointRecord]:
    """Variant inputs paired index-by-index with ``records``.

    ``foil_pair`` looks up each record's foiled twin (same ``pair_id``) in
    ``pool`` (defaults to ``records``). ``scrambled_language`` needs a
    ``scrambled_language_id`` in each record's meta. The ``mismatched_*``
    modes re-pair images or captions by a random derangement.
    """
    records = list(records)
    if mode == "foil_pair":
        twins = {}
        for r in (pool if pool is not None else records):
            if r.label == "foiled" and "pair_id" in r.meta:
                twins[r.meta["pair_id"]] = r
        out = []
        for r in records:
            twin = twins.get(r.meta.get("pair_id"))
            if twin is None:
                raise MissingVariant(f"no foiled twin for {r.language_id}")
            out.append(replace(r, language_id=twin.language_id, label="foiled"))
        return out
    if mode == "scrambled_language":
        out = []
        for r in records:
            alt = r.meta.get("scrambled_language_id")
            if alt is None:
                raise MissingVariant(f"no scrambled variant for {r.language_id}")
            out.append(replace(r, language_id=str(alt)))
        return out
    if mode in ("mismatched_image", "mismatched_language"):
        perm = random_derangement(len(records), rng_for(seed, "derangement", mode))
        if mode == "mismatched_image":
            return [replace(r, image_id=records[p].image_id) for r, p in zip(records, perm)]
        return [replace(r, language_id=records[p].language_id) for r, p in zip(records, perm)]
    raise DataError(f"unknown perturbation mode {mode!r}; expected one of {PERTURBATIONS}")


def unique_image_sample(records: Sequence[DatapointRecord], size: int, seed: int,
                        label: str | None = "original") -> list[DatapointRecord]:
    """Up to ``size`` records with distinct images (first record per image), seeded."""
    seen = set()
    pool = []
    for r in records:
        if (label is None or r.label == label) and r.image_id not in seen:
            seen.add(r.image_id)
            pool.append(r)
    if len(pool) <= size:
        return pool
    idx = np.sort(rng_for(seed, "rsa-sample").choice(len(pool), size=size, replace=False))
    return [pool[i] for i in idx]


def encode_records(records: Sequence[DatapointRecord], encoder: EncoderParams, visual: EmbeddingBank,
                   language: EmbeddingBank, label: str = "hub") -> RepresentationSet:
    V = visual.gather(r.image_id for r in records)
    L = language.gather(r.language_id for r in records)
    return RepresentationSet(label, encode(V, L, encoder)[0])


# ---------------------------------------------------------------------------
# category-level nearest-neighbour protocol
# ---------------------------------------------------------------------------

@dataclass
class CategorySpaces:
    categories: list[str]
    hub: RepresentationSet
    visual: RepresentationSet
    language: RepresentationSet

    def overlaps(self, ks: Sequence[int] = (1, 10)) -> dict[str, dict[int, float]]:
        return {
            "visual": {k: nn_overlap(self.hub, self.visual, k) for k in ks},
            "language": {k: nn_overlap(self.hub, self.language, k) for k in ks},
        }


def nn_category_protocol(
    category_language: Mapping[str, np.ndarray],
    category_visual_samples: Mapping[str, np.ndarray],
    encoder: EncoderParams,
    label: str = "hub",
) -> CategorySpaces:
    """Category-level visual vectors (mean of samples) and word vectors,
    encoded pairwise by ``encoder``."""
    cats = sorted(category_language)
    if len(cats) < 2:
        raise DataError("need at least two categories")
    vis = []
    for c in cats:
        samples = np.atleast_2d(np.asarray(category_visual_samples.get(c, np.empty((0, 0))), dtype=np.float64))
        if samples.size == 0:
            raise EmptyCategory(f"category {c!r} has no visual samples")
        vis.append(samples.mean(axis=0))
    V = np.array(vis)
    L = np.array([np.asarray(category_language[c], dtype=np.float64) for c in cats])
    H = encode(V, L, encoder)[0]
    return CategorySpaces(cats, RepresentationSet(label, H), RepresentationSet("visual", V),
                          RepresentationSet("language", L))
