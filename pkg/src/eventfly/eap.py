"""Activation-prior machinery: density maps, similarity, blend masks, entropy regions.

The typed functions operate on single maps. The ``*_array`` helpers carry the
arithmetic and broadcast over leading batch axes so the training loop can call
them on whole batches.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, DomainError, EmptyInputError, EventFlyWarning, ShapeError
from .events import VoxelGrid

ACTIVATION_EPS = 1e-6
NORMALIZED_SLACK = 1e-6


def _frozen(arr, dtype):
    arr = np.array(arr, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class DensityMap:
    values: np.ndarray

    def __post_init__(self):
        v = _frozen(self.values, np.float64)
        if v.ndim != 2:
            raise ShapeError(f"density map must be 2-D, got {v.shape}")
        if not np.all(np.isfinite(v)) or np.any(v < 0):
            raise DomainError("density values must be finite and non-negative")
        object.__setattr__(self, "values", v)

    @property
    def shape(self):
        return self.values.shape


@dataclass(frozen=True, eq=False)
class SimilarityMap:
    values: np.ndarray
    defined: np.ndarray

    def __post_init__(self):
        v = _frozen(self.values, np.float64)
        d = _frozen(self.defined, bool)
        if v.shape != d.shape or v.ndim != 2:
            raise ShapeError("similarity values and defined flags must share a 2-D shape")
        if np.any((v[d] < 0) | (v[d] > 1)):
            raise DomainError("defined similarity values must lie in [0, 1]")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "defined", d)

    @property
    def shape(self):
        return self.values.shape


@dataclass(frozen=True, eq=False)
class BlendMask:
    """1 keeps the source column, 0 takes the target column."""

    bits: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.bits)
        if b.ndim != 2:
            raise ShapeError(f"mask must be 2-D, got {b.shape}")
        if b.dtype != bool and not np.all((b == 0) | (b == 1)):
            raise DomainError("mask values must be 0 or 1")
        object.__setattr__(self, "bits", _frozen(b, bool))

    @property
    def shape(self):
        return self.bits.shape

    def __eq__(self, other):
        if not isinstance(other, BlendMask):
            return NotImplemented
        return np.array_equal(self.bits, other.bits)

    def __invert__(self) -> "BlendMask":
        return BlendMask(~self.bits)


@dataclass(frozen=True, eq=False)
class RegionMask:
    bits: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.bits)
        if b.ndim != 2:
            raise ShapeError(f"region must be 2-D, got {b.shape}")
        object.__setattr__(self, "bits", _frozen(b, bool))

    @property
    def shape(self):
        return self.bits.shape

    def __len__(self):
        return int(self.bits.sum())


# -- array-level arithmetic ---------------------------------------------------


def density_array(voxels: np.ndarray) -> np.ndarray:
    """Sum of absolute activations over the temporal axis (axis -3)."""
    return np.abs(np.asarray(voxels)).sum(axis=-3, dtype=np.float64)


def quantile(values: np.ndarray, q: float) -> float:
    """Linear interpolation between order statistics (position ``q * (n - 1)``)."""
    return float(np.quantile(np.asarray(values, dtype=np.float64).ravel(), q, method="linear"))


def _parse_mode(mode: str):
    if mode == "max":
        return "max", None
    if mode.startswith("quantile-"):
        try:
            q = float(mode[len("quantile-"):])
        except ValueError:
            raise ConfigError(f"bad quantile in normalization mode {mode!r}") from None
        if not 0.0 <= q <= 1.0:
            raise ConfigError(f"normalization quantile must be in [0, 1], got {q}")
        return "quantile", q
    raise ConfigError(f"unknown normalization mode {mode!r}")


def normalize_array(d: np.ndarray, mode: str = "max") -> np.ndarray:
    """Normalise each trailing ``H x W`` map independently."""
    kind, q = _parse_mode(mode)
    d = np.asarray(d, dtype=np.float64)
    flat = d.reshape(-1, d.shape[-2] * d.shape[-1])
    if kind == "max":
        scale = flat.max(axis=1)
    else:
        scale = np.quantile(flat, q, axis=1, method="linear")
    scale = np.where(scale > 0, scale, 1.0)
    out = flat / scale[:, None]
    if kind == "quantile":
        out = np.clip(out, 0.0, 1.0)
    return out.reshape(d.shape)


def similarity_array(d_src: np.ndarray, d_tgt: np.ndarray, eps: float = ACTIVATION_EPS):
    """Return ``(1 - |d_src - d_tgt|, defined)``; broadcasting is allowed."""
    d_src = np.asarray(d_src, dtype=np.float64)
    d_tgt = np.asarray(d_tgt, dtype=np.float64)
    if d_src.shape[-2:] != d_tgt.shape[-2:]:
        raise ShapeError(f"density shapes differ: {d_src.shape} vs {d_tgt.shape}")
    for name, d in (("source", d_src), ("target", d_tgt)):
        if np.any(d > 1.0 + NORMALIZED_SLACK) or np.any(d < 0):
            raise DomainError(f"{name} density is not normalised to [0, 1]")
    sim = 1.0 - np.abs(d_src - d_tgt)
    defined = (d_src > eps) | (d_tgt > eps)
    return np.clip(sim, 0.0, 1.0), defined


def mask_array(sim: np.ndarray, defined: np.ndarray, tau: float) -> np.ndarray:
    _check_tau(tau)
    return (sim >= tau) | ~defined


def _check_tau(tau: float) -> None:
    if not 0.0 <= tau <= 1.0:
        raise ConfigError(f"similarity threshold must be in [0, 1], got {tau}")


# -- typed operations -----------------------------------------------------------


def density_map(v: VoxelGrid) -> DensityMap:
    return DensityMap(density_array(v.data))


def aggregate_target_density(grids: Sequence[VoxelGrid]) -> DensityMap:
    """Mean of the per-sample density maps of a target split."""
    grids = list(grids)
    if not grids:
        raise EmptyInputError("cannot aggregate an empty set of voxel grids")
    shape = grids[0].shape
    total = np.zeros(shape[1:], np.float64)
    for g in grids:
        if g.shape != shape:
            raise ShapeError(f"voxel grid shape {g.shape} differs from {shape}")
        total += density_array(g.data)
    return DensityMap(total / len(grids))


def normalize_density(d: DensityMap, mode: str = "max") -> DensityMap:
    return DensityMap(normalize_array(d.values, mode))


def similarity_map(d_src: DensityMap, d_tgt: DensityMap, eps: float = ACTIVATION_EPS) -> SimilarityMap:
    """Per-pixel agreement of two normalised densities.

    Pixels where neither map exceeds ``eps`` carry no activation and are flagged
    undefined rather than scored as perfect agreement.
    """
    if d_src.shape != d_tgt.shape:
        raise ShapeError(f"density shapes differ: {d_src.shape} vs {d_tgt.shape}")
    sim, defined = similarity_array(d_src.values, d_tgt.values, eps)
    return SimilarityMap(np.where(defined, sim, 0.0), defined)


def binary_mask(sim: SimilarityMap, tau: float) -> BlendMask:
    """1 where ``sim >= tau``; undefined pixels keep the source (1)."""
    return BlendMask(mask_array(sim.values, sim.defined, tau))


def high_activation_region(d_tgt: DensityMap, q: float = 0.5) -> RegionMask:
    """Pixels whose density reaches the ``q``-quantile of the positive densities.

    Ties at the quantile value are included, so a uniform positive map selects
    every pixel.
    """
    if not 0.0 < q < 1.0:
        raise ConfigError(f"region quantile must be in (0, 1), got {q}")
    vals = d_tgt.values
    positive = vals[vals > 0]
    if positive.size == 0:
        return RegionMask(np.zeros(vals.shape, bool))
    return RegionMask((vals >= quantile(positive, q)) & (vals > 0))


def entropy_array(probs: np.ndarray, axis: int = 0) -> np.ndarray:
    """``-sum p log p`` along ``axis`` with ``0 log 0 = 0``."""
    p = np.asarray(probs, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(p > 0, p * np.log(p), 0.0)
    return -plogp.sum(axis=axis)


def check_probabilities(probs: np.ndarray, axis: int = 0, tol: float = 1e-5) -> None:
    p = np.asarray(probs, dtype=np.float64)
    if np.any(p < -tol) or not np.all(np.isfinite(p)):
        raise DomainError("probabilities must be finite and non-negative")
    if np.any(np.abs(p.sum(axis=axis) - 1.0) > tol):
        raise DomainError("class probabilities do not sum to 1")


def empirical_entropy(probs: np.ndarray, region: RegionMask) -> float:
    """Mean per-pixel prediction entropy (nats) over the pixels of ``region``.

    ``probs`` is ``C x H x W``. This is the usual non-negative entropy, the
    quantity the training objective minimises. An empty region yields 0 and an
    :class:`EventFlyWarning`.
    """
    probs = np.asarray(probs)
    if probs.ndim != 3 or probs.shape[1:] != region.shape:
        raise ShapeError(f"probabilities {probs.shape} do not match region {region.shape}")
    check_probabilities(probs, axis=0)
    if not region.bits.any():
        warnings.warn("empty entropy region; returning 0", EventFlyWarning, stacklevel=2)
        return 0.0
    h = entropy_array(probs, axis=0)[region.bits]
    return float(min(max(h.mean(), 0.0), math.log(probs.shape[0])))
