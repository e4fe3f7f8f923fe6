"""Per-class event-activation maps and density heatmaps."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from ..eap import density_array, normalize_array
from ..errors import EmptyInputError, ShapeError
from ..io import atomic_write, write_pgm


@dataclass
class ActivationStats:
    class_maps: np.ndarray  # (C, H, W)
    absent: np.ndarray  # (C,) bool
    density: np.ndarray  # (H, W) mean normalised density
    count: int

    def half_mass(self, c: int) -> tuple[float, float]:
        """Activation mass of class ``c`` above and below the image midline."""
        m = self.class_maps[c]
        h = m.shape[0]
        top = float(m[: h // 2].sum())
        bottom = float(m[h - h // 2 :].sum())
        return top, bottom


def activation_stats(samples: Sequence[np.ndarray], labels: Sequence[np.ndarray], num_classes: int, mode: str = "max") -> ActivationStats:
    """Mean over samples of each sample's normalised density restricted to class pixels.

    ``samples`` are ``T x H x W`` voxel arrays and ``labels`` the matching ``H x W``
    class maps (255 never counts as a class).
    """
    samples = list(samples)
    labels = list(labels)
    if not samples:
        raise EmptyInputError("activation statistics need at least one sample")
    if len(samples) != len(labels):
        raise ShapeError(f"{len(samples)} samples but {len(labels)} label maps")
    hw = np.asarray(samples[0]).shape[-2:]
    maps = np.zeros((num_classes,) + tuple(hw), np.float64)
    density = np.zeros(hw, np.float64)
    seen = np.zeros(num_classes, bool)
    for v, y in zip(samples, labels):
        y = np.asarray(y)
        if y.shape != hw or np.asarray(v).shape[-2:] != hw:
            raise ShapeError(f"sample/label size mismatch: {np.asarray(v).shape} vs {y.shape}")
        d = normalize_array(density_array(v), mode)
        density += d
        ids = np.unique(y[y < num_classes])
        seen[ids] = True
        for c in ids:
            maps[c] += np.where(y == c, d, 0.0)
    n = len(samples)
    return ActivationStats(maps / n, ~seen, density / n, n)


def export_stats(stats: ActivationStats, out_dir, class_names: Sequence[str]) -> list[Path]:
    """Write one PGM per class, ``density.pgm`` and ``stats.json``; return the paths."""
    out = Path(out_dir)
    written = []
    for c, name in enumerate(class_names):
        p = out / f"class_{c:02d}_{name.replace(' ', '_')}.pgm"
        write_pgm(stats.class_maps[c], p)
        written.append(p)
    p = out / "density.pgm"
    write_pgm(stats.density, p)
    written.append(p)
    summary = {
        "samples": stats.count,
        "classes": [
            {
                "id": c,
                "name": name,
                "absent": bool(stats.absent[c]),
                "mass_top": stats.half_mass(c)[0],
                "mass_bottom": stats.half_mass(c)[1],
            }
            for c, name in enumerate(class_names)
        ],
    }
    p = out / "stats.json"
    atomic_write(p, json.dumps(summary, indent=1).encode())
    written.append(p)
    return written
