"""19-class and 11-class label spaces and the merge between them."""

from __future__ import annotations

import numpy as np

from ..blend import IGNORE, LabelMap
from ..errors import ConfigError, DomainError

CLASSES_19 = (
    "road", "sidewalk", "building", "wall", "fence", "pole", "traffic-light",
    "traffic-sign", "vegetation", "terrain", "sky", "person", "rider", "car",
    "truck", "bus", "train", "motorcycle", "bicycle",
)

CLASSES_11 = (
    "background", "building", "fence", "person", "pole", "road", "sidewalk",
    "vegetation", "car", "wall", "traffic-sign",
)

MAP_19_TO_11 = (5, 6, 1, 9, 2, 4, 10, 10, 7, 0, 0, 3, 3, 8, 8, 8, 8, 8, 8)

_LUT = np.full(256, 254, np.uint8)
_LUT[:19] = MAP_19_TO_11
_LUT[IGNORE] = IGNORE


def map_label_array(y: np.ndarray) -> np.ndarray:
    y = np.asarray(y)
    out = _LUT[y.astype(np.uint8)]
    if np.any(out == 254) or np.any((y < 0) | (y > 255)):
        bad = y[(out == 254) | (y < 0) | (y > 255)]
        raise DomainError(f"label {int(bad.flat[0])} is not a 19-class id")
    return out


def map_labels(y: LabelMap, direction: str = "19->11") -> LabelMap:
    """Merge a 19-class label map into the 11-class setting; 255 stays 255."""
    if direction not in ("19->11", "19to11"):
        raise ConfigError(f"unsupported label mapping direction {direction!r}")
    if y.num_classes != 19:
        raise DomainError(f"expected a 19-class label map, got {y.num_classes} classes")
    return LabelMap(map_label_array(y.data), 11)
