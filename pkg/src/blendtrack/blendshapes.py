"""Canonical 52 blend-shape model: naming, partition, mirroring, half-face merge.

The rig uses 52 named blend shapes, each a scalar activation in [0, 1].
Indices are fixed for every file format and tensor layout in this package:

    0..17   left block   (side shapes of the subject's left face half)
    18..35  right block  (same shapes, "Right" suffix)
    36..51  center block (shapes shared by both halves)

A half-face prediction carries 34 values: the 18 side shapes of one half
followed by the 16 center shapes. Left-side images are horizontally flipped
to the canonical (right-camera) orientation before training, so left targets
and predictions keep their center block in mirrored space; `mirror_center`
converts between the two.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from importlib import resources

import numpy as np

LEFT_NAMES: tuple[str, ...] = (
    "eyeBlinkLeft",
    "eyeLookDownLeft",
    "eyeLookInLeft",
    "eyeLookOutLeft",
    "eyeLookUpLeft",
    "eyeSquintLeft",
    "eyeWideLeft",
    "mouthSmileLeft",
    "mouthFrownLeft",
    "mouthDimpleLeft",
    "mouthStretchLeft",
    "mouthPressLeft",
    "mouthLowerDownLeft",
    "mouthUpperUpLeft",
    "browDownLeft",
    "browOuterUpLeft",
    "cheekSquintLeft",
    "noseSneerLeft",
)

RIGHT_NAMES: tuple[str, ...] = tuple(n[: -len("Left")] + "Right" for n in LEFT_NAMES)

CENTER_NAMES: tuple[str, ...] = (
    "jawForward",
    "jawLeft",
    "jawRight",
    "jawOpen",
    "mouthClose",
    "mouthFunnel",
    "mouthPucker",
    "mouthLeft",
    "mouthRight",
    "mouthRollLower",
    "mouthRollUpper",
    "mouthShrugLower",
    "mouthShrugUpper",
    "browInnerUp",
    "cheekPuff",
    "tongueOut",
)

ALL_NAMES: tuple[str, ...] = LEFT_NAMES + RIGHT_NAMES + CENTER_NAMES

N_SHAPES = 52
N_SIDE = 18
N_CENTER = 16
N_HALF = N_SIDE + N_CENTER

LEFT_SLICE = slice(0, N_SIDE)
RIGHT_SLICE = slice(N_SIDE, 2 * N_SIDE)
CENTER_SLICE = slice(2 * N_SIDE, N_SHAPES)

INDEX: dict[str, int] = {name: i for i, name in enumerate(ALL_NAMES)}

NAMES_RESOURCE = "blendshape_names_v1.txt"


class Side(str, Enum):
    LEFT = "left"
    RIGHT = "right"


class Block(str, Enum):
    LEFT = "left"
    RIGHT = "right"
    CENTER = "center"


def _region_of(name: str) -> str:
    for prefix, region in (
        ("eye", "eyes"),
        ("jaw", "jaw"),
        ("mouth", "mouth"),
        ("brow", "brow"),
        ("cheek", "cheeks"),
        ("nose", "nose"),
        ("tongue", "tongue"),
    ):
        if name.startswith(prefix):
            return region
    raise ValueError(f"no region for blend shape {name!r}")


# Facial-part grouping used by the correlation report.
REGIONS: dict[str, tuple[str, ...]] = {
    region: tuple(n for n in ALL_NAMES if _region_of(n) == region)
    for region in ("brow", "eyes", "nose", "mouth", "cheeks", "jaw", "tongue")
}

# Direction-bearing center shapes swap under a horizontal flip.
_MIRROR_PAIRS = (("jawLeft", "jawRight"), ("mouthLeft", "mouthRight"))

_CENTER_MIRROR_PERM = np.arange(N_CENTER)
for _a, _b in _MIRROR_PAIRS:
    _ia = CENTER_NAMES.index(_a)
    _ib = CENTER_NAMES.index(_b)
    _CENTER_MIRROR_PERM[_ia], _CENTER_MIRROR_PERM[_ib] = _ib, _ia


def partition(shape: int | str) -> Block:
    """Return the block (left/right/center) containing a blend shape."""
    if isinstance(shape, str):
        try:
            index = INDEX[shape]
        except KeyError:
            raise ValueError(f"unknown blend shape {shape!r}") from None
    else:
        index = int(shape)
        if not 0 <= index < N_SHAPES:
            raise ValueError(f"blend shape index out of range: {index}")
    if index < N_SIDE:
        return Block.LEFT
    if index < 2 * N_SIDE:
        return Block.RIGHT
    return Block.CENTER


def names_resource_text() -> str:
    """Canonical name list as shipped in the versioned text resource."""
    return "\n".join(ALL_NAMES) + "\n"


def load_names_resource() -> tuple[str, ...]:
    """Read the packaged name-list resource (one name per line, index order)."""
    text = resources.files("blendtrack.resources").joinpath(NAMES_RESOURCE).read_text("utf-8")
    return tuple(text.splitlines())


def validate_vector(weights: np.ndarray) -> np.ndarray:
    """Check a 52-weight vector and return it as float64."""
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (N_SHAPES,):
        raise ValueError(f"expected {N_SHAPES} blend-shape weights, got shape {w.shape}")
    if np.any(w < 0.0) or np.any(w > 1.0) or not np.all(np.isfinite(w)):
        raise ValueError("blend-shape weights must lie in [0, 1]")
    return w


def mirror_center(center_weights: np.ndarray) -> np.ndarray:
    """Swap jawLeft/jawRight and mouthLeft/mouthRight; involution."""
    c = np.asarray(center_weights, dtype=np.float64)
    if c.shape != (N_CENTER,):
        raise ValueError(f"expected {N_CENTER} center weights, got shape {c.shape}")
    return c[_CENTER_MIRROR_PERM]


@dataclass(frozen=True)
class HalfFacePrediction:
    """34 weights inferred from one side image: 18 side + 16 center."""

    side: Side
    side_weights: np.ndarray
    center_weights: np.ndarray

    def __post_init__(self):
        sw = np.asarray(self.side_weights, dtype=np.float64)
        cw = np.asarray(self.center_weights, dtype=np.float64)
        if sw.shape != (N_SIDE,):
            raise ValueError(f"side_weights must have shape ({N_SIDE},), got {sw.shape}")
        if cw.shape != (N_CENTER,):
            raise ValueError(f"center_weights must have shape ({N_CENTER},), got {cw.shape}")
        for arr in (sw, cw):
            if np.any(arr < 0.0) or np.any(arr > 1.0) or not np.all(np.isfinite(arr)):
                raise ValueError("half-face weights must lie in [0, 1]")
        object.__setattr__(self, "side_weights", sw)
        object.__setattr__(self, "center_weights", cw)

    @property
    def values(self) -> np.ndarray:
        return np.concatenate([self.side_weights, self.center_weights])


def merge_half_predictions(left: HalfFacePrediction, right: HalfFacePrediction) -> np.ndarray:
    """Combine two half-face predictions into a full 52-weight vector.

    Side blocks are copied verbatim; the center block is the element-wise mean
    of the two center blocks. `left.center_weights` must already be in
    un-mirrored (physical) space.
    """
    if left.side is not Side.LEFT or right.side is not Side.RIGHT:
        raise ValueError(f"merge requires (left, right) predictions, got ({left.side}, {right.side})")
    full = np.empty(N_SHAPES, dtype=np.float64)
    full[LEFT_SLICE] = left.side_weights
    full[RIGHT_SLICE] = right.side_weights
    full[CENTER_SLICE] = (left.center_weights + right.center_weights) / 2.0
    return full


def extract_half_target(full: np.ndarray, side: Side) -> np.ndarray:
    """Build the 34-value training target for one side from a full vector.

    Left targets pass the center block through `mirror_center`, because left
    images are flipped to the canonical orientation before training.
    """
    w = validate_vector(full)
    center = w[CENTER_SLICE]
    if side is Side.LEFT:
        return np.concatenate([w[LEFT_SLICE], mirror_center(center)])
    if side is Side.RIGHT:
        return np.concatenate([w[RIGHT_SLICE], center])
    raise ValueError(f"unknown side {side!r}")
