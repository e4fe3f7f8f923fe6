"""Voxelised sample sets: in-memory sparse storage and on-disk synth directories.

A synth directory holds ``manifest.json`` plus ``<id>.evt`` / ``<id>.lbl`` pairs
(19-class labels). Samples are grouped into sequences so the validation split
can take the tail of each sequence.
"""

from __future__ import annotations

import json
import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ..blend import LabelMap
from ..errors import ConfigError, EventFlyWarning, ShapeError
from ..events import VoxelGrid, voxelize
from ..io import atomic_write, read_events, read_labels, write_events, write_labels
from .labels import map_label_array
from .synth import PLATFORMS, generate_scene, platform_profile

log = logging.getLogger(__name__)


@dataclass
class SampleSet:
    """Voxel grids kept as per-sample (flat index, value) pairs.

    ``labels`` are 11-class maps, or ``None`` for unlabeled data.
    """

    shape: tuple
    offsets: np.ndarray
    indices: np.ndarray
    values: np.ndarray
    labels: np.ndarray | None = None
    ids: list = field(default_factory=list)
    _hwt: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __len__(self) -> int:
        return len(self.offsets) - 1

    @classmethod
    def from_arrays(cls, grids: Sequence[np.ndarray], labels=None, ids=None) -> "SampleSet":
        grids = list(grids)
        if not grids:
            raise ConfigError("a sample set needs at least one grid")
        shape = tuple(grids[0].shape)
        idx, val, offsets = [], [], [0]
        for g in grids:
            if tuple(g.shape) != shape:
                raise ShapeError(f"grid shape {g.shape} differs from {shape}")
            flat = np.asarray(g, np.float32).ravel()
            nz = np.flatnonzero(flat).astype(np.int32)
            idx.append(nz)
            val.append(flat[nz])
            offsets.append(offsets[-1] + len(nz))
        lab = None if labels is None else np.stack([np.asarray(l, np.uint8) for l in labels])
        return cls(
            shape,
            np.asarray(offsets, np.int64),
            np.concatenate(idx),
            np.concatenate(val),
            lab,
            list(ids) if ids is not None else [str(i) for i in range(len(grids))],
        )

    def dense(self, which) -> np.ndarray:
        """``(B, T, H, W)`` grids laid out bins-last in memory (a transposed view).

        Torch sees such an array as a channels-last tensor, which is the layout the
        network runs in, so no copy is needed on the way in.
        """
        which = np.atleast_1d(np.asarray(which))
        t, h, w = self.shape
        if self._hwt is None:
            pix, tb = self.indices % (h * w), self.indices // (h * w)
            self._hwt = (pix * t + tb).astype(np.int32)
        out = np.zeros((len(which), h * w * t), np.float32)
        for row, i in enumerate(which):
            a, b = self.offsets[i], self.offsets[i + 1]
            out[row, self._hwt[a:b]] = self.values[a:b]
        return out.reshape(len(which), h, w, t).transpose(0, 3, 1, 2)

    def grid(self, i: int) -> VoxelGrid:
        return VoxelGrid(np.ascontiguousarray(self.dense([i])[0]))

    def mean_density(self) -> np.ndarray:
        """Mean over samples of the temporal sum of absolute activations."""
        t, h, w = self.shape
        total = np.zeros(h * w, np.float64)
        for i in range(len(self)):
            a, b = self.offsets[i], self.offsets[i + 1]
            pix = self.indices[a:b] % (h * w)
            total += np.bincount(pix, weights=np.abs(self.values[a:b].astype(np.float64)), minlength=h * w)
        return (total / len(self)).reshape(h, w)


def _scene_arrays(platform, seed, height, width, bins, duration):
    events, labels = generate_scene(platform_profile(platform), seed, height, width, duration)
    return voxelize(events, bins, duration).data, map_label_array(labels.data)


def synth_sample_set(platform, seeds, height=90, width=160, bins=20, duration=5_000_000, jobs=1) -> SampleSet:
    """Generate, voxelise and map (19 -> 11 classes) one scene per seed."""
    seeds = list(seeds)

    def one(s):
        return _scene_arrays(platform, s, height, width, bins, duration)

    if jobs > 1:
        with ThreadPoolExecutor(jobs) as ex:
            pairs = list(ex.map(one, seeds))
    else:
        pairs = [one(s) for s in seeds]
    return SampleSet.from_arrays(
        (g for g, _ in pairs), [l for _, l in pairs], [f"{platform}-{s}" for s in seeds]
    )


# -- split ---------------------------------------------------------------------------


def split_sequences(sequences: Sequence[Sequence], ratio: float = 0.4):
    """Send the last ``ceil(ratio * n)`` frames of each sequence to validation."""
    if not 0.0 < ratio < 1.0:
        raise ConfigError(f"validation ratio must be in (0, 1), got {ratio}")
    train, val = [], []
    for i, seq in enumerate(sequences):
        seq = list(seq)
        if not seq:
            warnings.warn(f"sequence {i} is empty; skipped", EventFlyWarning, stacklevel=2)
            continue
        n_val = math.ceil(ratio * len(seq))
        train.extend(seq[: len(seq) - n_val])
        val.extend(seq[len(seq) - n_val :])
    return train, val


# -- synth directories ------------------------------------------------------------------


MANIFEST = "manifest.json"


def write_synth_dir(out, platform, n, seed, height=90, width=160, duration=5_000_000, seq_len=50, jobs=1):
    """Write ``n`` scenes for ``platform`` and a manifest; scene ``i`` uses seed ``seed * 1_000_003 + i``."""
    if platform not in PLATFORMS:
        raise ConfigError(f"unknown platform {platform!r}")
    if n <= 0 or seq_len <= 0:
        raise ConfigError("n and seq_len must be positive")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    profile = platform_profile(platform)
    ids = [f"{platform}_{i:06d}" for i in range(n)]

    def one(i):
        events, labels = generate_scene(profile, seed * 1_000_003 + i, height, width, duration)
        write_events(events, out / f"{ids[i]}.evt")
        write_labels(labels, out / f"{ids[i]}.lbl")

    if jobs > 1:
        with ThreadPoolExecutor(jobs) as ex:
            list(ex.map(one, range(n)))
    else:
        for i in range(n):
            one(i)
    manifest = {
        "platform": platform,
        "seed": seed,
        "height": height,
        "width": width,
        "duration": duration,
        "num_classes": 19,
        "sequences": [ids[i : i + seq_len] for i in range(0, n, seq_len)],
    }
    atomic_write(out / MANIFEST, json.dumps(manifest, indent=1).encode())
    return manifest


def read_manifest(path) -> dict:
    path = Path(path)
    f = path / MANIFEST if path.is_dir() else path
    if not f.exists():
        raise FileNotFoundError(f"no manifest at {f}")
    return json.loads(f.read_text())


def load_sample_set(directory, ids=None, bins=20, duration=5_000_000, labeled=True, jobs=1) -> SampleSet:
    """Voxelise every ``<id>.evt`` in a synth directory (optionally a subset of ids)."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"data directory not found: {directory}")
    if ids is None:
        manifest = read_manifest(directory)
        ids = [i for seq in manifest["sequences"] for i in seq]

    def one(i):
        grid = voxelize(read_events(directory / f"{i}.evt"), bins, duration).data
        lab = None
        if labeled:
            lm: LabelMap = read_labels(directory / f"{i}.lbl")
            lab = map_label_array(lm.data) if lm.num_classes == 19 else lm.data
        return grid, lab

    if jobs > 1:
        with ThreadPoolExecutor(jobs) as ex:
            pairs = list(ex.map(one, ids))
    else:
        pairs = [one(i) for i in ids]
    labels = [l for _, l in pairs] if labeled else None
    return SampleSet.from_arrays((g for g, _ in pairs), labels, ids)
