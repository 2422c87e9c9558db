"""Structural-similarity feature distillation and squared-norm baselines.

SSIM here is computed with one global window per feature map: the mean,
variance and covariance of a map are taken over all of its spatial positions,
independently for every (sample, channel) pair.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ContractError, ShapeError
from .tensor import Tensor

POWER_MODES = ("signed", "plain")


@dataclass
class SSIMParams:
    """Exponents, stabilizers and component switches for feature-map SSIM.

    ``power_mode="signed"`` raises each component as ``sign(x)*|x|**e`` which
    keeps SSIM inside [-1, 1] for any exponent. ``"plain"`` uses the literal
    power, so an even structure exponent folds negative structure onto
    positive values and a fractional one is undefined for them.
    """

    p: float = 0.1
    q: float = 8.0
    r: float = 8.0
    c1: float = 1e-4
    c2: float = 9e-4
    c3: float | None = None
    use_l: bool = True
    use_c: bool = True
    use_s: bool = True
    power_mode: str = "signed"

    def __post_init__(self):
        if self.c3 is None:
            self.c3 = self.c2 / 2.0
        for name in ("c1", "c2", "c3"):
            if not getattr(self, name) > 0:
                raise ContractError(f"SSIM stabilizer {name} must be positive, got {getattr(self, name)}")
        for name in ("p", "q", "r"):
            val = getattr(self, name)
            if not (val >= 0 and np.isfinite(val)):
                raise ContractError(f"SSIM exponent {name} must be a finite nonnegative real, got {val}")
        if self.power_mode not in POWER_MODES:
            raise ContractError(f"power_mode must be one of {POWER_MODES}, got {self.power_mode!r}")

    @property
    def effective_exponents(self) -> tuple[float, float, float]:
        """Exponents with disabled components mapped to 0."""
        return (self.p if self.use_l else 0.0,
                self.q if self.use_c else 0.0,
                self.r if self.use_s else 0.0)


@dataclass
class FDWeights:
    """Per-layer, per-channel importances for the weighted squared-norm loss."""

    layers: list[np.ndarray]
    pooled: float = 1.0

    def __post_init__(self):
        self.layers = [np.asarray(w, dtype=np.float64) for w in self.layers]
        for w in self.layers:
            if w.ndim != 1:
                raise ContractError(f"layer weights must be 1-D per-channel vectors, got shape {w.shape}")
            if not np.all(np.isfinite(w)) or np.any(w < 0):
                raise ContractError("importance weights must be finite and nonnegative")
        if not (np.isfinite(self.pooled) and self.pooled >= 0):
            raise ContractError("pooled-feature weight must be finite and nonnegative")

    @classmethod
    def uniform(cls, channels: Sequence[int]) -> "FDWeights":
        return cls([np.ones(c) for c in channels], 1.0)


def _check_pair(u: Tensor, v: Tensor) -> None:
    if u.shape != v.shape:
        raise ShapeError(f"feature maps differ in shape: {u.shape} vs {v.shape}")
    if u.ndim < 2:
        raise ShapeError(f"feature maps need trailing (H, W) axes, got {u.shape}")
    if u.shape[-1] * u.shape[-2] < 2:
        raise ContractError("SSIM needs at least two spatial positions per map")


def ssim_components(u, v, params: SSIMParams | None = None) -> tuple[Tensor, Tensor, Tensor]:
    """Luminance, contrast and structure terms for each map in ``u`` vs ``v``.

    Inputs are (..., H, W); outputs have the leading shape (...).
    """
    params = params or SSIMParams()
    u, v = T.as_tensor(u), T.as_tensor(v)
    _check_pair(u, v)
    mu_u, mu_v = T.spatial_mean(u), T.spatial_mean(v)
    var_u, var_v = T.spatial_var(u), T.spatial_var(v)
    cov = T.spatial_cov(u, v)
    # sqrt of the product (not product of sqrts) so identical maps give exactly 1
    sd_prod = T.sqrt(var_u * var_v)
    lum = (2.0 * mu_u * mu_v + params.c1) / (mu_u * mu_u + mu_v * mu_v + params.c1)
    con = (2.0 * sd_prod + params.c2) / (var_u + var_v + params.c2)
    struct = (cov + params.c3) / (sd_prod + params.c3)
    return lum, con, struct


def _raise(x: Tensor, e: float, mode: str) -> Tensor | None:
    if e == 0:
        return None
    if e == 1:
        return x
    return T.signed_power(x, e) if mode == "signed" else T.power(x, e)


def ssim(u, v, params: SSIMParams | None = None) -> Tensor:
    """l**p * c**q * s**r per map; disabled components contribute 1."""
    params = params or SSIMParams()
    comps = ssim_components(u, v, params)
    out = None
    for comp, e in zip(comps, params.effective_exponents):
        term = _raise(comp, e, params.power_mode)
        if term is None:
            continue
        out = term if out is None else out * term
    if out is None:
        return Tensor._wrap(np.ones(comps[0].shape, dtype=comps[0].data.dtype))
    return out


def s2il_terms(current, previous, params: SSIMParams | None = None) -> Tensor:
    """Per-(sample, channel) dissimilarities ``(1 - SSIM) / 2``."""
    current = T.as_tensor(current)
    previous = T.detach(T.as_tensor(previous))
    if current.ndim != 4 or previous.ndim != 4:
        raise ShapeError(f"expected (B, C, H, W) maps, got {current.shape} and {previous.shape}")
    if current.shape[1] != previous.shape[1]:
        raise ContractError(f"teacher has {previous.shape[1]} channels, student has {current.shape[1]}")
    return (1.0 - ssim(current, previous, params)) * 0.5


def s2il_loss(current, previous, params: SSIMParams | None = None) -> Tensor:
    """Structural distillation loss on last-layer maps.

    Sums the per-channel dissimilarity over channels and averages over the
    batch. ``previous`` is treated as a constant (frozen teacher).
    """
    terms = s2il_terms(current, previous, params)
    return T.tsum(terms) / float(terms.shape[0])


def _layer_sq_norms(cur: Tensor, prev: Tensor) -> Tensor:
    if cur.shape != prev.shape:
        raise ShapeError(f"feature shapes differ: {cur.shape} vs {prev.shape}")
    diff = cur - prev
    sq = diff * diff
    return T.tsum(sq, axis=tuple(range(2, sq.ndim))) if sq.ndim > 2 else sq


def baseline_fd_loss(current, previous, weights: FDWeights | None = None) -> Tensor:
    """Squared-norm feature distillation over every layer plus the pooled vector.

    Without ``weights`` every map counts once; with them each map's squared
    Frobenius distance is scaled by its importance. The result is averaged
    over the batch.
    """
    cur_layers = list(current.layers)
    prev_layers = [T.detach(f) for f in previous.layers]
    if len(cur_layers) != len(prev_layers):
        raise ContractError(f"bundles have {len(cur_layers)} vs {len(prev_layers)} layers")
    if weights is not None:
        if len(weights.layers) != len(cur_layers):
            raise ContractError(f"weights cover {len(weights.layers)} layers, bundle has {len(cur_layers)}")
        for w, f in zip(weights.layers, cur_layers):
            if w.shape != (f.shape[1],):
                raise ContractError(f"layer weights of shape {w.shape} do not match {f.shape[1]} channels")
    batch = cur_layers[0].shape[0]
    total = None
    for idx, (cur, prev) in enumerate(zip(cur_layers, prev_layers)):
        sq = _layer_sq_norms(cur, prev)
        if weights is not None:
            sq = sq * weights.layers[idx].astype(sq.data.dtype)
        part = T.tsum(sq)
        total = part if total is None else total + part
    pooled_sq = T.tsum(_layer_sq_norms(current.pooled, T.detach(previous.pooled)))
    if weights is not None:
        pooled_sq = pooled_sq * weights.pooled
    total = pooled_sq if total is None else total + pooled_sq
    return total / float(batch)
