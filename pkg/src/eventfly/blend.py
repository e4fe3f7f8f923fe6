"""Column-wise mixing of source and target voxel grids and their label maps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .eap import BlendMask, check_probabilities
from .errors import DomainError, ShapeError
from .events import VoxelGrid

IGNORE = 255


@dataclass(frozen=True, eq=False)
class LabelMap:
    data: np.ndarray
    num_classes: int

    def __post_init__(self):
        d = np.array(self.data, copy=True)
        if d.ndim != 2:
            raise ShapeError(f"label map must be 2-D, got {d.shape}")
        if not 1 <= self.num_classes <= 255:
            raise DomainError(f"num_classes must be in 1..255, got {self.num_classes}")
        if d.dtype != np.uint8:
            if np.any((d < 0) | (d > 255)):
                raise DomainError("label ids must fit in 0..255")
            d = d.astype(np.uint8)
        bad = (d >= self.num_classes) & (d != IGNORE)
        if bad.any():
            v = int(d[bad][0])
            raise DomainError(f"label {v} out of range for {self.num_classes} classes")
        d.setflags(write=False)
        object.__setattr__(self, "data", d)

    @property
    def shape(self):
        return self.data.shape

    def __eq__(self, other):
        if not isinstance(other, LabelMap):
            return NotImplemented
        return self.num_classes == other.num_classes and np.array_equal(self.data, other.data)


@dataclass(frozen=True)
class BlendedSample:
    voxel: VoxelGrid
    labels: LabelMap
    mask: BlendMask
    source_id: str = ""
    target_id: str = ""

    def __post_init__(self):
        hw = {self.voxel.shape[1:], self.labels.shape, self.mask.shape}
        if len(hw) != 1:
            raise ShapeError(f"blended sample fields disagree on size: {sorted(hw)}")


def blend_voxel_arrays(v_src: np.ndarray, v_tgt: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """``(..., T, H, W)`` grids, ``(..., H, W)`` mask; keeps source where mask is set."""
    if v_src.shape != v_tgt.shape:
        raise ShapeError(f"voxel shapes differ: {v_src.shape} vs {v_tgt.shape}")
    if mask.shape[-2:] != v_src.shape[-2:]:
        raise ShapeError(f"mask {mask.shape} does not match voxels {v_src.shape}")
    # empty_like keeps the memory layout of the inputs (e.g. bins-last batches)
    out = np.empty_like(v_tgt)
    np.copyto(out, v_tgt)
    np.copyto(out, v_src, where=np.asarray(mask, bool)[..., None, :, :])
    return out


def blend_voxels(v_src: VoxelGrid, v_tgt: VoxelGrid, m: BlendMask) -> VoxelGrid:
    return VoxelGrid(blend_voxel_arrays(v_src.data, v_tgt.data, m.bits))


def blend_labels(y_src: LabelMap, y_pseudo: LabelMap, m: BlendMask) -> LabelMap:
    if not (y_src.shape == y_pseudo.shape == m.shape):
        raise ShapeError(f"label/mask shapes differ: {y_src.shape}, {y_pseudo.shape}, {m.shape}")
    if y_src.num_classes != y_pseudo.num_classes:
        raise ShapeError("source and pseudo labels use different class counts")
    return LabelMap(np.where(m.bits, y_src.data, y_pseudo.data), y_src.num_classes)


def pseudo_label_array(probs: np.ndarray, threshold: float, axis: int = 0) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. the lowest class id on ties
    cls = np.argmax(probs, axis=axis)
    conf = np.max(probs, axis=axis)
    return np.where(conf >= threshold, cls, IGNORE).astype(np.uint8)


def pseudo_labels(probs: np.ndarray, threshold: float = 0.5) -> LabelMap:
    """Arg-max labels of a ``C x H x W`` probability map; low confidence -> 255."""
    probs = np.asarray(probs)
    if probs.ndim != 3:
        raise ShapeError(f"expected C x H x W probabilities, got {probs.shape}")
    check_probabilities(probs, axis=0)
    return LabelMap(pseudo_label_array(probs, threshold), probs.shape[0])
