"""Synthetic vehicle / drone / quadruped event scenes.

A scene is a 19-class label map plus the events a contrast-threshold sensor would
emit while the platform moves over it:

* "stuff" classes (road, sky, vegetation, ...) partition the free pixels by
  sequential top-k selection on ``log(occupancy) + smooth noise``; each class
  gets its table share of the image, so per-scene frequencies are exact up to a
  small jitter and the filler class absorbs the remainder;
* "thing" classes (cars, poles, people, ...) are rectangles whose centres are
  drawn from the class occupancy map and whose expected total area equals the
  class share;
* every class has its own log-intensity texture; the camera motion of the
  platform (forward zoom, slow drift, gait bob) plus independent motion of
  dynamic objects changes pixel intensities, and each change of ``contrast``
  log units fires one event.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import ndimage

from ..blend import LabelMap
from ..errors import ConfigError
from ..events import EventStream
from .labels import CLASSES_19

PLATFORMS = ("vehicle", "drone", "quadruped")

# absolute class shares per platform, 19-class order, in percent
CLASS_PERCENT = {
    "vehicle": (21.94, 6.63, 24.91, 0.47, 0.55, 2.21, 0.22, 0.45, 23.77, 1.78, 6.53, 0.82, 0.02, 7.36, 1.01, 1.05, 0.09, 0.01, 0.15),
    "drone": (34.51, 6.36, 4.96, 0.63, 0.97, 0.33, 0.00, 0.08, 14.52, 31.46, 1.63, 0.05, 0.00, 4.14, 0.24, 0.09, 0.01, 0.01, 0.01),
    "quadruped": (18.98, 7.09, 12.93, 5.46, 4.91, 0.56, 0.00, 0.01, 26.65, 12.18, 8.68, 1.56, 0.03, 0.91, 0.00, 0.00, 0.00, 0.00, 0.03),
}

ROAD, SIDEWALK, BUILDING, WALL, FENCE, POLE, LIGHT, SIGN, VEGETATION, TERRAIN, SKY = range(11)
PERSON, RIDER, CAR, TRUCK, BUS, TRAIN, MOTORCYCLE, BICYCLE = range(11, 19)

STUFF = (ROAD, SIDEWALK, BUILDING, VEGETATION, TERRAIN, SKY)
DYNAMIC = (PERSON, RIDER, CAR, TRUCK, BUS, TRAIN, MOTORCYCLE, BICYCLE)

# nominal instance area (fraction of the image) and width/height aspect of things
THING_SHAPE = {
    WALL: (0.03, 2.5), FENCE: (0.025, 3.0), POLE: (0.004, 0.12), LIGHT: (0.002, 0.5),
    SIGN: (0.002, 1.0), PERSON: (0.004, 0.4), RIDER: (0.003, 0.5), CAR: (0.02, 2.0),
    TRUCK: (0.03, 1.8), BUS: (0.035, 2.2), TRAIN: (0.05, 3.0), MOTORCYCLE: (0.003, 1.2),
    BICYCLE: (0.003, 1.2),
}

# log-intensity texture per class: (base, amplitude, kind, spatial period in px)
TEXTURE = {
    ROAD: (0.2, 0.35, "hstripe", 9.0), SIDEWALK: (0.6, 0.45, "grid", 6.0),
    BUILDING: (0.9, 0.7, "vstripe", 5.0), WALL: (0.7, 0.4, "hstripe", 4.0),
    FENCE: (0.5, 0.8, "vstripe", 2.5), POLE: (-0.6, 0.0, "flat", 1.0),
    LIGHT: (1.6, 0.0, "flat", 1.0), SIGN: (1.4, 0.3, "grid", 2.0),
    VEGETATION: (0.0, 0.9, "noise", 1.5), TERRAIN: (0.3, 0.5, "noise", 4.0),
    SKY: (1.8, 0.05, "noise", 30.0), PERSON: (-0.4, 0.3, "noise", 3.0),
    RIDER: (-0.3, 0.3, "noise", 3.0), CAR: (1.1, 0.6, "grid", 7.0),
    TRUCK: (1.0, 0.5, "grid", 9.0), BUS: (1.2, 0.5, "vstripe", 6.0),
    TRAIN: (0.9, 0.5, "vstripe", 8.0), MOTORCYCLE: (-0.2, 0.5, "noise", 2.0),
    BICYCLE: (-0.1, 0.5, "noise", 2.0),
}


def _band(v, lo, hi, soft=0.04):
    return 1.0 / (1.0 + np.exp(-(v - lo) / soft)) / (1.0 + np.exp(-(hi - v) / soft))


def _gauss(x, mu, sd):
    return np.exp(-0.5 * ((x - mu) / sd) ** 2)


def _vehicle_prior(c, u, v):
    side = 1.0 - _gauss(u, 0.5, 0.14)
    half = 0.06 + 0.55 * np.clip(v - 0.5, 0, None)
    return {
        SKY: _band(v, -1, 0.2),
        BUILDING: _band(v, 0.05, 0.5) * (0.2 + side),
        VEGETATION: _band(v, 0.1, 0.62) + 0.1,
        ROAD: _band(v, 0.55, 1.2) * _gauss(np.abs(u - 0.5) / half, 0, 1.0),
        SIDEWALK: _band(v, 0.55, 1.2) * _gauss(np.abs(u - 0.5) - 1.4 * half, 0, 0.06),
        TERRAIN: _band(v, 0.55, 1.2) * _band(np.abs(u - 0.5), 0.32, 1),
        CAR: _band(v, 0.45, 0.8) * _gauss(u, 0.5, 0.25),
        TRUCK: _band(v, 0.42, 0.78) * _gauss(u, 0.5, 0.25),
        BUS: _band(v, 0.42, 0.78) * _gauss(u, 0.5, 0.25),
        TRAIN: _band(v, 0.35, 0.6),
        PERSON: _band(v, 0.4, 0.8) * side,
        RIDER: _band(v, 0.45, 0.8) * _gauss(u, 0.5, 0.3),
        MOTORCYCLE: _band(v, 0.5, 0.8) * _gauss(u, 0.5, 0.3),
        BICYCLE: _band(v, 0.5, 0.8) * side,
        POLE: _band(v, 0.15, 0.6) * side,
        LIGHT: _band(v, 0.1, 0.35) * side,
        SIGN: _band(v, 0.15, 0.45) * side,
        WALL: _band(v, 0.3, 0.65) * side,
        FENCE: _band(v, 0.45, 0.7) * side,
    }[c]


def _drone_prior(c, u, v):
    ground = _band(v, 0.07, 1.2)
    return {
        SKY: _band(v, -1, 0.05),
        BUILDING: ground * (0.5 + 0.5 * _band(v, 0.0, 0.5)),
        VEGETATION: ground,
        ROAD: ground,
        SIDEWALK: ground,
        TERRAIN: ground,
    }.get(c, ground)


def _quadruped_prior(c, u, v):
    side = 1.0 - _gauss(u, 0.5, 0.16)
    half = 0.08 + 0.3 * np.clip(v - 0.6, 0, None)
    return {
        SKY: _band(v, -1, 0.14),
        VEGETATION: _band(v, 0.0, 0.55) + 0.05,
        BUILDING: _band(v, 0.05, 0.5) * side,
        ROAD: _band(v, 0.6, 1.2) * _gauss(np.abs(u - 0.5) / half, 0, 1.0),
        SIDEWALK: _band(v, 0.55, 1.2) * _gauss(np.abs(u - 0.5) - 1.5 * half, 0, 0.08),
        TERRAIN: _band(v, 0.5, 1.2),
        WALL: _band(v, 0.25, 0.8) * side,
        FENCE: _band(v, 0.35, 0.85) * side,
        PERSON: _band(v, 0.3, 0.9) * _gauss(u, 0.5, 0.3),
        CAR: _band(v, 0.4, 0.8) * side,
    }.get(c, _band(v, 0.3, 0.8))


_PRIORS = {"vehicle": _vehicle_prior, "drone": _drone_prior, "quadruped": _quadruped_prior}

# stuff assignment order; the last entry is the filler
_STUFF_ORDER = {
    "vehicle": (SKY, ROAD, SIDEWALK, TERRAIN, BUILDING, VEGETATION),
    "drone": (SKY, BUILDING, SIDEWALK, VEGETATION, ROAD, TERRAIN),
    "quadruped": (SKY, ROAD, SIDEWALK, BUILDING, TERRAIN, VEGETATION),
}


@dataclass(frozen=True)
class MotionModel:
    """Camera motion over one window, in pixels at the 90x160 reference size.

    ``zoom`` is the fractional expansion about the focus of expansion, ``drift``
    the translation magnitude, ``bob`` the amplitude of a vertical oscillation of
    ``bob_cycles`` periods; ranges are ``(low, high)`` for uniform draws.
    """

    zoom: tuple = (0.0, 0.0)
    drift: tuple = (0.0, 0.0)
    drift_dir: tuple = (0.0, 2 * np.pi)
    bob: tuple = (0.0, 0.0)
    bob_cycles: tuple = (1.0, 1.0)
    object_speed: tuple = (0.0, 0.0)
    focus: tuple = (0.5, 0.45)


_MOTION = {
    "vehicle": MotionModel(zoom=(0.05, 0.09), drift=(0.0, 1.0), drift_dir=(-0.3, 0.3), object_speed=(1.0, 4.0)),
    "drone": MotionModel(drift=(2.5, 5.0), object_speed=(0.3, 1.0), focus=(0.5, 0.5)),
    "quadruped": MotionModel(zoom=(0.01, 0.03), bob=(1.0, 2.5), bob_cycles=(1.0, 2.0), object_speed=(0.5, 2.0)),
}


@dataclass
class PlatformProfile:
    name: str
    frequencies: np.ndarray  # 19 class shares summing to 1
    prior: Callable
    motion: MotionModel
    stuff_order: tuple
    contrast: float = 0.4
    noise_rate: float = 0.002  # background events per pixel per window
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        f = np.asarray(self.frequencies, dtype=np.float64)
        if f.shape != (19,) or np.any(f < 0):
            raise ConfigError("class frequencies must be 19 non-negative shares")
        self.frequencies = f / f.sum()

    def occupancy(self, height: int, width: int) -> np.ndarray:
        """``19 x H x W`` spatial priors, each normalised to sum to 1."""
        key = (height, width)
        if key not in self._cache:
            v, u = np.meshgrid((np.arange(height) + 0.5) / height, (np.arange(width) + 0.5) / width, indexing="ij")
            maps = np.stack([np.broadcast_to(self.prior(c, u, v), (height, width)) for c in range(19)])
            maps = maps + 1e-6
            self._cache[key] = maps / maps.sum(axis=(1, 2), keepdims=True)
        return self._cache[key]


def platform_profile(name: str) -> PlatformProfile:
    if name not in PLATFORMS:
        raise ConfigError(f"unknown platform {name!r}; choose from {PLATFORMS}")
    return PlatformProfile(
        name=name,
        frequencies=np.array(CLASS_PERCENT[name]) / 100.0,
        prior=_PRIORS[name],
        motion=_MOTION[name],
        stuff_order=_STUFF_ORDER[name],
    )


# -- scene layout -------------------------------------------------------------------


def _smooth_noise(rng, height, width, cells=(5, 8)):
    coarse = rng.standard_normal((cells[0] + 1, cells[1] + 1))
    return ndimage.zoom(coarse, (height / (cells[0] + 1), width / (cells[1] + 1)), order=1, grid_mode=True, mode="nearest")[:height, :width]


def _place_things(profile, rng, height, width):
    """Paint thing rectangles; returns the label map (-1 where free) and object list."""
    n = height * width
    labels = np.full((height, width), -1, np.int16)
    occ = profile.occupancy(height, width)
    objects = []
    for c, (nominal, aspect) in THING_SHAPE.items():
        share = profile.frequencies[c]
        if share <= 0:
            continue
        count = rng.poisson(share / nominal)
        for _ in range(count):
            area = nominal * n * rng.uniform(0.7, 1.3)
            h = max(1, int(round(np.sqrt(area / aspect))))
            w = max(1, int(round(area / h)))
            idx = rng.choice(n, p=occ[c].ravel())
            cy, cx = divmod(int(idx), width)
            y0, x0 = max(0, cy - h // 2), max(0, cx - w // 2)
            y1, x1 = min(height, y0 + h), min(width, x0 + w)
            labels[y0:y1, x0:x1] = c
            objects.append((c, y0, y1, x0, x1))
    return labels, objects


def _fill_stuff(profile, rng, labels):
    height, width = labels.shape
    n = height * width
    occ = profile.occupancy(height, width)
    free = labels < 0
    order = profile.stuff_order
    shares = profile.frequencies
    for c in order[:-1]:
        want = int(round(shares[c] * n * rng.uniform(0.85, 1.15)))
        want = min(want, int(free.sum()))
        if want <= 0:
            continue
        score = np.log(occ[c] * n) + 0.8 * _smooth_noise(rng, height, width)
        score = np.where(free, score, -np.inf).ravel()
        pick = np.argpartition(-score, want - 1)[:want]
        labels.ravel()[pick] = c
        free.ravel()[pick] = False
    labels[free] = order[-1]
    return labels


def _texture(kind, period, rng, height, width):
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    phase = rng.uniform(0, 2 * np.pi, 2)
    if kind == "hstripe":
        return np.sin(2 * np.pi * yy / period + phase[0])
    if kind == "vstripe":
        return np.sin(2 * np.pi * xx / period + phase[0])
    if kind == "grid":
        return 0.5 * (np.sin(2 * np.pi * yy / period + phase[0]) + np.sin(2 * np.pi * xx / period + phase[1]))
    if kind == "noise":
        cells = (max(2, int(height / period)), max(2, int(width / period)))
        return np.clip(_smooth_noise(rng, height, width, cells), -2.5, 2.5) / 1.5
    return np.zeros((height, width))


def _intensity(labels, rng):
    height, width = labels.shape
    out = np.zeros((height, width))
    for c in np.unique(labels):
        base, amp, kind, period = TEXTURE[int(c)]
        sel = labels == c
        tex = _texture(kind, period, rng, height, width)
        out[sel] = base + rng.normal(0, 0.1) + amp * tex[sel]
    return out


# -- event simulation -----------------------------------------------------------------


def _camera_coords(motion, params, s, yy, xx, height, width):
    """Scene coordinates seen by each output pixel at normalised time ``s``."""
    zoom, dy, dx, bob, cycles, bob_phase = params
    fy, fx = motion.focus[1] * height, motion.focus[0] * width
    scale = 1.0 + zoom * s
    sy = fy + (yy - fy) / scale - dy * s - bob * np.sin(2 * np.pi * cycles * s + bob_phase)
    sx = fx + (xx - fx) / scale - dx * s
    return sy, sx


def _simulate_events(profile, rng, labels, bg_labels, objects, steps, duration):
    height, width = labels.shape
    ref = np.sqrt(height * width / (90 * 160))  # motion magnitudes scale with image size
    m = profile.motion
    zoom = rng.uniform(*m.zoom)
    drift = rng.uniform(*m.drift) * ref
    ang = rng.uniform(*m.drift_dir)
    params = (zoom, drift * np.sin(ang), drift * np.cos(ang), rng.uniform(*m.bob) * ref,
              rng.uniform(*m.bob_cycles), rng.uniform(0, 2 * np.pi))

    scene = _intensity(labels, rng)
    background = scene.copy()
    hidden = labels != bg_labels
    background[hidden] = _intensity(bg_labels, rng)[hidden]
    movers = []
    for c, y0, y1, x0, x1 in objects:
        if c in DYNAMIC:
            speed = rng.uniform(*m.object_speed) * ref
            movers.append((y0, y1, x0, x1, speed * rng.choice((-1.0, 1.0)), 0.2 * speed * rng.standard_normal()))

    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)

    def frame(s):
        sy, sx = _camera_coords(m, params, s, yy, xx, height, width)
        img = ndimage.map_coordinates(background, (sy, sx), order=1, mode="nearest")
        static = ndimage.map_coordinates(scene, (sy, sx), order=1, mode="nearest")
        # static things and stuff come from the full scene except where a mover left
        keep_static = np.ones_like(img, dtype=bool)
        mover_px = np.zeros_like(img, dtype=bool)
        for y0, y1, x0, x1, vx, vy in movers:
            ox, oy = sx - vx * s, sy - vy * s
            inside = (oy >= y0 - 0.5) & (oy < y1 - 0.5) & (ox >= x0 - 0.5) & (ox < x1 - 0.5)
            vacated = (sy >= y0 - 0.5) & (sy < y1 - 0.5) & (sx >= x0 - 0.5) & (sx < x1 - 0.5)
            keep_static &= ~vacated
            if inside.any():
                img[inside] = ndimage.map_coordinates(scene, (oy[inside], ox[inside]), order=1, mode="nearest")
                mover_px |= inside
        use_static = keep_static & ~mover_px
        img[use_static] = static[use_static]
        return img

    contrast = profile.contrast
    level = frame(0.0)
    xs, ys, ts, ps = [], [], [], []
    for k in range(1, steps + 1):
        cur = frame(k / steps)
        diff = cur - level
        n = np.minimum(np.floor(np.abs(diff) / contrast), 4).astype(np.int64)
        hit = np.flatnonzero(n)
        if hit.size:
            counts = n.ravel()[hit]
            pix = np.repeat(hit, counts)
            pol = np.repeat(np.sign(diff.ravel()[hit]).astype(np.int8), counts)
            t_lo, t_hi = (k - 1) / steps * duration, k / steps * duration
            ts.append(rng.uniform(t_lo, t_hi, pix.size))
            ys.append(pix // width)
            xs.append(pix % width)
            ps.append(pol)
            level.ravel()[hit] += np.sign(diff.ravel()[hit]) * counts * contrast
    n_noise = rng.poisson(profile.noise_rate * height * width)
    if n_noise:
        pix = rng.integers(0, height * width, n_noise)
        ys.append(pix // width)
        xs.append(pix % width)
        ts.append(rng.uniform(0, duration, n_noise))
        ps.append(rng.choice(np.array([-1, 1], np.int8), n_noise))
    if not ts:
        return EventStream.empty(width, height)
    t = np.floor(np.concatenate(ts)).astype(np.int64)
    order = np.argsort(t, kind="stable")
    return EventStream(
        width, height,
        np.concatenate(xs)[order], np.concatenate(ys)[order], t[order], np.concatenate(ps)[order],
    )


def generate_labels(profile: PlatformProfile, seed: int, height: int = 90, width: int = 160):
    rng = np.random.default_rng([seed, PLATFORMS.index(profile.name)])
    return _layout(profile, rng, height, width)[0]


def _layout(profile, rng, height, width):
    labels, objects = _place_things(profile, rng, height, width)
    things = labels >= 0
    labels = _fill_stuff(profile, rng, labels)
    bg = labels.copy()
    if things.any():
        # disoccluded background: nearest stuff pixel
        _, (iy, ix) = ndimage.distance_transform_edt(things, return_indices=True)
        bg = labels[iy, ix]
    return LabelMap(labels.astype(np.uint8), 19), bg, objects


def generate_scene(
    profile: PlatformProfile,
    seed: int,
    height: int = 90,
    width: int = 160,
    duration: int = 5_000_000,
    steps: int = 10,
) -> tuple[EventStream, LabelMap]:
    """Deterministic ``(events, 19-class labels)`` for ``(profile, seed)``."""
    if height < 8 or width < 8:
        raise ConfigError(f"scene too small: {height}x{width}")
    rng = np.random.default_rng([seed, PLATFORMS.index(profile.name)])
    labels, bg, objects = _layout(profile, rng, height, width)
    events = _simulate_events(profile, rng, labels.data.astype(np.int64), bg.astype(np.int64), objects, steps, duration)
    return events, labels


CLASS_NAMES = CLASSES_19
