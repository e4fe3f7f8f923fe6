"""Event streams and the polarity-signed voxel grid encoding.

Events are kept column-wise (``x``, ``y``, ``t``, ``p`` arrays) because every
consumer works on whole streams; :class:`Event` exists for single-record
construction and iteration.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Iterator

import numpy as np

from .errors import ConfigError, DomainError, InvalidWindowError, ShapeError


@dataclass(frozen=True)
class Event:
    x: int
    y: int
    t: int  # microseconds
    p: int  # -1 or +1

    def __post_init__(self):
        if self.p not in (-1, 1):
            raise DomainError(f"polarity must be -1 or +1, got {self.p}")
        if self.x < 0 or self.y < 0:
            raise DomainError(f"negative pixel coordinate ({self.x}, {self.y})")


@dataclass(frozen=True, eq=False)
class EventStream:
    width: int
    height: int
    x: np.ndarray
    y: np.ndarray
    t: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ShapeError(f"sensor size must be positive, got {self.width}x{self.height}")
        cols = {
            "x": np.ascontiguousarray(self.x, dtype=np.uint16),
            "y": np.ascontiguousarray(self.y, dtype=np.uint16),
            "t": np.ascontiguousarray(self.t, dtype=np.int64),
            "p": np.ascontiguousarray(self.p, dtype=np.int8),
        }
        n = {len(v) for v in cols.values()}
        if len(n) != 1:
            raise ShapeError("event columns have different lengths")
        # bypass frozen to store the normalised copies
        for k, v in cols.items():
            v.setflags(write=False)
            object.__setattr__(self, k, v)
        if len(self.x):
            if int(self.x.max()) >= self.width or int(self.y.max()) >= self.height:
                raise DomainError("event coordinate outside the sensor")
            if not np.all(np.abs(self.p) == 1):
                raise DomainError("polarity must be -1 or +1")
            if np.any(np.diff(self.t) < 0):
                raise DomainError("timestamps must be non-decreasing")

    @classmethod
    def empty(cls, width: int, height: int) -> "EventStream":
        z = np.zeros(0)
        return cls(width, height, z, z, z, z)

    @classmethod
    def from_events(cls, events: Iterable[Event], width: int, height: int) -> "EventStream":
        events = list(events)
        if not events:
            return cls.empty(width, height)
        x, y, t, p = zip(*((e.x, e.y, e.t, e.p) for e in events))
        return cls(width, height, np.array(x), np.array(y), np.array(t), np.array(p))

    def __len__(self) -> int:
        return len(self.t)

    def __iter__(self) -> Iterator[Event]:
        for x, y, t, p in zip(self.x, self.y, self.t, self.p):
            yield Event(int(x), int(y), int(t), int(p))

    def __eq__(self, other) -> bool:
        if not isinstance(other, EventStream):
            return NotImplemented
        return (
            self.width == other.width
            and self.height == other.height
            and all(np.array_equal(getattr(self, k), getattr(other, k)) for k in "xytp")
        )

    @property
    def t0(self) -> int:
        """Initial timestamp of the window; 0 for an empty stream."""
        return int(self.t[0]) if len(self.t) else 0


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    """``T x H x W`` float32 tensor indexed ``(t, h, w)``."""

    data: np.ndarray

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        if data.ndim != 3 or min(data.shape) <= 0:
            raise ShapeError(f"voxel grid needs 3 positive dims, got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise DomainError("voxel grid contains non-finite values")
        object.__setattr__(self, "data", data)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def bins(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    def __eq__(self, other) -> bool:
        if not isinstance(other, VoxelGrid):
            return NotImplemented
        return self.shape == other.shape and self.data.tobytes() == other.data.tobytes()


def _check_window(duration, bins) -> None:
    if not duration > 0:
        raise InvalidWindowError(f"window duration must be positive, got {duration}")
    if int(bins) < 1:
        raise ConfigError(f"need at least one temporal bin, got {bins}")


def normalize_timestamp(t, t0, duration, bins):
    """Map timestamps onto the continuous bin axis ``[0, bins-1]``.

    ``(bins - 1) * (t - t0) / duration``, clamped at both ends. Accepts scalars
    or arrays.
    """
    _check_window(duration, bins)
    rel = (np.asarray(t, dtype=np.float64) - float(t0)) / float(duration)
    out = np.clip((bins - 1) * rel, 0.0, bins - 1)
    return float(out) if np.ndim(out) == 0 else out


def voxelize(stream: EventStream, bins: int, duration) -> VoxelGrid:
    """Accumulate signed polarities into ``bins`` temporal bins with a linear kernel.

    Every event adds ``p * max(1 - |t_hat - b|, 0)`` to bin ``b`` of its pixel, so
    its unit mass is split between the two nearest bins.
    """
    _check_window(duration, bins)
    bins = int(bins)
    h, w = stream.height, stream.width
    if len(stream) == 0:
        return VoxelGrid(np.zeros((bins, h, w), np.float32))

    t_hat = normalize_timestamp(stream.t, stream.t0, duration, bins)
    lo = np.floor(t_hat).astype(np.int64)
    if bins > 1:
        np.minimum(lo, bins - 2, out=lo)
    frac = t_hat - lo
    pol = stream.p.astype(np.float64)
    pix = stream.y.astype(np.int64) * w + stream.x.astype(np.int64)

    size = bins * h * w
    acc = np.bincount(lo * h * w + pix, weights=pol * (1.0 - frac), minlength=size)
    if bins > 1:
        acc += np.bincount((lo + 1) * h * w + pix, weights=pol * frac, minlength=size)
    return VoxelGrid(acc.reshape(bins, h, w).astype(np.float32))
