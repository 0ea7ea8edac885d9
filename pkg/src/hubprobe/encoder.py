"""The shared multimodal encoder ("hub").

Visual and language embeddings are projected to a common width by two
affine maps, concatenated visual-first, and fused by an affine layer
followed by tanh::

    h = tanh(W [Wv V + bv ; Wl L + bl] + b)
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import core_math as cm
from .errors import BadDims, DimMismatch, StaleCache

PARAM_NAMES = ("Wv", "bv", "Wl", "bl", "W", "b")


@dataclass(frozen=True)
class EncoderDims:
    d_v: int = 2048
    d_l: int = 512
    d_p: int = 512
    d_h: int = 1024

    def validate(self) -> None:
        for name in ("d_v", "d_l", "d_p", "d_h"):
            val = getattr(self, name)
            if not isinstance(val, (int, np.integer)) or val < 1:
                raise BadDims(f"{name} must be a positive integer, got {val!r}")


@dataclass
class EncoderParams:
    dims: EncoderDims
    tensors: dict[str, np.ndarray]
    use_bias: bool = True
    # bumped after every in-place update so stale caches can be detected
    version: int = field(default=0, compare=False)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def trainable_names(self) -> tuple[str, ...]:
        if self.use_bias:
            return PARAM_NAMES
        return ("Wv", "Wl", "W")

    def touch(self) -> None:
        self.version += 1

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.dims, {k: v.copy() for k, v in self.tensors.items()}, self.use_bias)

    def checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for name in PARAM_NAMES:
            h.update(np.ascontiguousarray(self.tensors[name]).tobytes())
        return h.hexdigest()


def uniform_fan_in(rng: np.random.Generator, out_dim: int, in_dim: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(in_dim)
    return rng.uniform(-bound, bound, size=(out_dim, in_dim))


def init_encoder(dims: EncoderDims, rng: np.random.Generator, use_bias: bool = True) -> EncoderParams:
    dims.validate()
    tensors = {
        "Wv": uniform_fan_in(rng, dims.d_p, dims.d_v),
        "bv": np.zeros(dims.d_p),
        "Wl": uniform_fan_in(rng, dims.d_p, dims.d_l),
        "bl": np.zeros(dims.d_p),
        "W": uniform_fan_in(rng, dims.d_h, 2 * dims.d_p),
        "b": np.zeros(dims.d_h),
    }
    return EncoderParams(dims, tensors, use_bias)


def encoder_from_seed(dims: EncoderDims, seed: int, use_bias: bool = True) -> EncoderParams:
    """Initial weights shared by every setting that starts from ``seed``."""
    return init_encoder(dims, cm.rng_for(seed, "encoder"), use_bias)


@dataclass
class EncodeCache:
    params: EncoderParams
    version: int
    v_cache: tuple
    l_cache: tuple
    fuse_cache: tuple
    tanh_cache: np.ndarray
    d_p: int


def encode(V, L, params: EncoderParams):
    """Return ``(h, cache)``; ``V``/``L`` may be single vectors or batches."""
    V = np.asarray(V, dtype=np.float64)
    L = np.asarray(L, dtype=np.float64)
    d = params.dims
    if V.shape[-1] != d.d_v or L.shape[-1] != d.d_l:
        raise DimMismatch(
            f"encoder expects visual dim {d.d_v} and language dim {d.d_l}, "
            f"got {V.shape[-1]} and {L.shape[-1]}"
        )
    if V.shape[:-1] != L.shape[:-1]:
        raise DimMismatch("visual and language inputs have different batch shapes")
    t = params.tensors
    vp, v_cache = cm.affine_forward(V, t["Wv"], t["bv"])
    lp, l_cache = cm.affine_forward(L, t["Wl"], t["bl"])
    joint = np.concatenate([vp, lp], axis=-1)
    pre, fuse_cache = cm.affine_forward(joint, t["W"], t["b"])
    h, tanh_cache = cm.tanh_forward(pre)
    cache = EncodeCache(params, params.version, v_cache, l_cache, fuse_cache, tanh_cache, d.d_p)
    return h, cache


def encode_backward(grad_h, cache: EncodeCache, frozen: bool = False):
    """Return ``(param_grads, grad_V, grad_L)``.

    With ``frozen=True`` parameter gradients are not produced (``None``) but
    the input gradients are still propagated.
    """
    if cache.params.version != cache.version:
        raise StaleCache("encoder parameters changed since the forward pass")
    g_pre = cm.tanh_backward(np.asarray(grad_h, dtype=np.float64), cache.tanh_cache)
    g_joint, gW, gb = cm.affine_backward(g_pre, cache.fuse_cache)
    g_vp = g_joint[..., : cache.d_p]
    g_lp = g_joint[..., cache.d_p :]
    gV, gWv, gbv = cm.affine_backward(g_vp, cache.v_cache)
    gL, gWl, gbl = cm.affine_backward(g_lp, cache.l_cache)
    if frozen:
        return None, gV, gL
    grads = {"Wv": gWv, "Wl": gWl, "W": gW}
    if cache.params.use_bias:
        grads.update(bv=gbv, bl=gbl, b=gb)
    return grads, gV, gL
