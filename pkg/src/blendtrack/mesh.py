"""Linear blend-shape mesh deformation and the millimeter scale for evaluation.

A `FaceMesh` is a neutral vertex cloud plus one per-vertex displacement array
per blend shape; deformation is additive and linear in the weights. Vertex
errors are converted from model units to millimeters using the inner canthal
distance of the base pose as a reference length.

Mesh file format ("BTMESH 1", UTF-8 text, one directive per line):

    BTMESH 1
    vertices N
    <x y z>            x N lines
    canthi iL iR
    eval i region      x 13 lines, region in {eye, mouth}
    delta <name>
    <dx dy dz>         x N lines
    ...                one delta block per blend shape

Unknown directives and unknown blend-shape names are rejected.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import blendshapes as bs

N_EVAL_VERTICES = 13
N_EYE_EVAL = 6
N_MOUTH_EVAL = 7

REGION_EYE = "eye"
REGION_MOUTH = "mouth"


class MeshFormatError(ValueError):
    """Raised for malformed or inconsistent mesh files."""


@dataclass(frozen=True)
class MmScale:
    """Conversion factor from mesh model units to millimeters."""

    millimeters_per_model_unit: float

    def __post_init__(self):
        v = self.millimeters_per_model_unit
        if not (np.isfinite(v) and v > 0.0):
            raise ValueError(f"millimeters_per_model_unit must be positive and finite, got {v}")


@dataclass(eq=False)
class FaceMesh:
    base_vertices: np.ndarray                       # (N, 3) float64
    deltas: dict[str, np.ndarray]                   # name -> (N, 3) float64
    inner_canthus_left: int
    inner_canthus_right: int
    eval_vertices: tuple[tuple[int, str], ...]      # 13 x (vertex index, region)
    _delta_stack: np.ndarray | None = field(default=None, repr=False)

    def validate(self) -> "FaceMesh":
        n = len(self.base_vertices)
        if self.base_vertices.shape != (n, 3) or n == 0:
            raise MeshFormatError(f"base_vertices must be (N, 3), got {self.base_vertices.shape}")
        for name, delta in self.deltas.items():
            if name not in bs.INDEX:
                raise MeshFormatError(f"unknown blend shape {name!r}")
            if delta.shape != (n, 3):
                raise MeshFormatError(
                    f"vertex-count mismatch for delta {name!r}: {delta.shape[0]} != {n}"
                )
        if self.inner_canthus_left == self.inner_canthus_right:
            raise MeshFormatError("inner canthus indices must be distinct")
        for idx in (self.inner_canthus_left, self.inner_canthus_right):
            if not 0 <= idx < n:
                raise MeshFormatError(f"canthus index {idx} out of range")
        if len(self.eval_vertices) != N_EVAL_VERTICES:
            raise MeshFormatError(f"expected {N_EVAL_VERTICES} eval vertices, got {len(self.eval_vertices)}")
        regions = [r for _, r in self.eval_vertices]
        if regions.count(REGION_EYE) != N_EYE_EVAL or regions.count(REGION_MOUTH) != N_MOUTH_EVAL:
            raise MeshFormatError(
                f"eval vertices must be {N_EYE_EVAL} eye + {N_MOUTH_EVAL} mouth, got {regions}"
            )
        for idx, _ in self.eval_vertices:
            if not 0 <= idx < n:
                raise MeshFormatError(f"eval vertex index {idx} out of range")
        if self.canthal_distance() <= 0.0:
            raise MeshFormatError("inner canthal distance must be strictly positive")
        return self

    def canthal_distance(self) -> float:
        a = self.base_vertices[self.inner_canthus_left]
        b = self.base_vertices[self.inner_canthus_right]
        return float(np.linalg.norm(a - b))

    def eval_indices(self) -> np.ndarray:
        return np.array([i for i, _ in self.eval_vertices], dtype=np.intp)

    def eval_regions(self) -> tuple[str, ...]:
        return tuple(r for _, r in self.eval_vertices)

    def delta_stack(self) -> np.ndarray:
        """(52, N, 3) displacement tensor in canonical index order; missing shapes are zero."""
        if self._delta_stack is None:
            stack = np.zeros((bs.N_SHAPES, len(self.base_vertices), 3), dtype=np.float64)
            for name, delta in self.deltas.items():
                stack[bs.INDEX[name]] = delta
            self._delta_stack = stack
        return self._delta_stack


def deform(mesh: FaceMesh, weights: np.ndarray) -> np.ndarray:
    """Deformed vertex positions: base + sum_k weights[k] * delta_k."""
    w = bs.validate_vector(weights)
    return mesh.base_vertices + np.tensordot(w, mesh.delta_stack(), axes=1)


def canthal_scale(mesh: FaceMesh, icd_mm: float = 32.0) -> MmScale:
    """Millimeter scale from the base-pose inner canthal distance."""
    if not (np.isfinite(icd_mm) and icd_mm > 0.0):
        raise ValueError(f"icd_mm must be positive, got {icd_mm}")
    d = mesh.canthal_distance()
    if d <= 0.0:
        raise ValueError("degenerate mesh: zero inner canthal distance")
    return MmScale(icd_mm / d)


def _fmt(v: float) -> str:
    return repr(float(v))


def save_mesh(mesh: FaceMesh, path) -> None:
    """Write a mesh in the BTMESH 1 text format (lossless round trip)."""
    lines = ["BTMESH 1", f"vertices {len(mesh.base_vertices)}"]
    for v in mesh.base_vertices:
        lines.append(f"{_fmt(v[0])} {_fmt(v[1])} {_fmt(v[2])}")
    lines.append(f"canthi {mesh.inner_canthus_left} {mesh.inner_canthus_right}")
    for idx, region in mesh.eval_vertices:
        lines.append(f"eval {idx} {region}")
    for name in bs.ALL_NAMES:
        if name not in mesh.deltas:
            continue
        lines.append(f"delta {name}")
        for d in mesh.deltas[name]:
            lines.append(f"{_fmt(d[0])} {_fmt(d[1])} {_fmt(d[2])}")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


class _LineReader:
    def __init__(self, path):
        with open(path, "r", encoding="utf-8") as f:
            self.lines = f.read().splitlines()
        self.pos = 0

    def next(self, context: str) -> tuple[int, str]:
        while self.pos < len(self.lines):
            line = self.lines[self.pos].strip()
            self.pos += 1
            if line:
                return self.pos, line
        raise MeshFormatError(f"unexpected end of file while reading {context}")

    def peek(self) -> str | None:
        pos = self.pos
        while pos < len(self.lines):
            line = self.lines[pos].strip()
            if line:
                return line
            pos += 1
        return None


def _parse_triplet(lineno: int, line: str, what: str) -> np.ndarray:
    parts = line.split()
    if len(parts) != 3:
        raise MeshFormatError(f"line {lineno}: expected 3 values for {what}, got {line!r}")
    try:
        return np.array([float(p) for p in parts], dtype=np.float64)
    except ValueError:
        raise MeshFormatError(f"line {lineno}: bad number in {what}: {line!r}") from None


def load_mesh(path) -> FaceMesh:
    """Parse a BTMESH 1 file, validating counts, names, and directives."""
    r = _LineReader(path)
    lineno, header = r.next("header")
    if header != "BTMESH 1":
        raise MeshFormatError(f"line {lineno}: bad header {header!r}, expected 'BTMESH 1'")
    lineno, line = r.next("vertex count")
    parts = line.split()
    if len(parts) != 2 or parts[0] != "vertices":
        raise MeshFormatError(f"line {lineno}: expected 'vertices N', got {line!r}")
    n = int(parts[1])
    base = np.empty((n, 3), dtype=np.float64)
    for i in range(n):
        lineno, line = r.next(f"vertex {i}")
        base[i] = _parse_triplet(lineno, line, f"vertex {i}")

    canthi: tuple[int, int] | None = None
    evals: list[tuple[int, str]] = []
    deltas: dict[str, np.ndarray] = {}
    while True:
        if r.peek() is None:
            break
        lineno, line = r.next("directive")
        parts = line.split()
        directive = parts[0]
        if directive == "canthi":
            if len(parts) != 3:
                raise MeshFormatError(f"line {lineno}: expected 'canthi iL iR', got {line!r}")
            canthi = (int(parts[1]), int(parts[2]))
        elif directive == "eval":
            if len(parts) != 3 or parts[2] not in (REGION_EYE, REGION_MOUTH):
                raise MeshFormatError(f"line {lineno}: expected 'eval i eye|mouth', got {line!r}")
            evals.append((int(parts[1]), parts[2]))
        elif directive == "delta":
            if len(parts) != 2:
                raise MeshFormatError(f"line {lineno}: expected 'delta <name>', got {line!r}")
            name = parts[1]
            if name not in bs.INDEX:
                raise MeshFormatError(f"line {lineno}: unknown blend shape {name!r}")
            if name in deltas:
                raise MeshFormatError(f"line {lineno}: duplicate delta block for {name!r}")
            block = np.empty((n, 3), dtype=np.float64)
            for i in range(n):
                nxt = r.peek()
                if nxt is None or nxt.split()[0] in ("canthi", "eval", "delta"):
                    raise MeshFormatError(
                        f"vertex-count mismatch in delta {name!r}: got {i} rows, expected {n}"
                    )
                dl, dline = r.next(f"delta {name} row {i}")
                block[i] = _parse_triplet(dl, dline, f"delta {name} row {i}")
            deltas[name] = block
        else:
            raise MeshFormatError(f"line {lineno}: unknown directive {directive!r}")

    if canthi is None:
        raise MeshFormatError("missing 'canthi' directive")
    mesh = FaceMesh(
        base_vertices=base,
        deltas=deltas,
        inner_canthus_left=canthi[0],
        inner_canthus_right=canthi[1],
        eval_vertices=tuple(evals),
    )
    return mesh.validate()


def meshes_equal(a: FaceMesh, b: FaceMesh) -> bool:
    """Structural equality over all persisted fields."""
    if not np.array_equal(a.base_vertices, b.base_vertices):
        return False
    if sorted(a.deltas) != sorted(b.deltas):
        return False
    if any(not np.array_equal(a.deltas[k], b.deltas[k]) for k in a.deltas):
        return False
    return (
        a.inner_canthus_left == b.inner_canthus_left
        and a.inner_canthus_right == b.inner_canthus_right
        and a.eval_vertices == b.eval_vertices
    )


# ---------------------------------------------------------------------------
# Built-in procedural face
# ---------------------------------------------------------------------------

# Feature vertices of the default face. Coordinates: +x toward the subject's
# left, +y up, +z out of the face; head radius is roughly 1 model unit and the
# base-pose inner canthal distance is 0.30 units.
_CENTER_FEATURES = {
    "noseBridge": (0.0, 0.28, 0.96),
    "noseTip": (0.0, 0.05, 1.02),
    "browCenter": (0.0, 0.48, 0.92),
    "foreheadCenter": (0.0, 0.70, 0.80),
    "upperLipCenter": (0.0, -0.16, 0.94),
    "lowerLipCenter": (0.0, -0.29, 0.94),
    "chin": (0.0, -0.52, 0.80),
    "tongueTip": (0.0, -0.24, 0.90),
}

_SIDE_FEATURES = {
    "innerCanthus": (0.15, 0.30, 0.88),
    "outerEye": (0.42, 0.31, 0.78),
    "upperLid": (0.28, 0.36, 0.86),
    "lowerLid": (0.28, 0.25, 0.86),
    "brow": (0.30, 0.50, 0.84),
    "browInner": (0.12, 0.46, 0.90),
    "cheek": (0.42, -0.05, 0.72),
    "nostril": (0.10, 0.02, 0.95),
    "jawCorner": (0.38, -0.45, 0.55),
    "mouthCorner": (0.22, -0.22, 0.82),
    "upperLip": (0.10, -0.17, 0.90),
    "lowerLip": (0.10, -0.28, 0.90),
}


class _MeshBuilder:
    def __init__(self):
        self.vertices: list[tuple[float, float, float]] = []
        self.names: dict[str, int] = {}

    def add(self, name: str, pos) -> int:
        idx = len(self.vertices)
        self.vertices.append(tuple(float(c) for c in pos))
        if name:
            self.names[name] = idx
        return idx

    def __getitem__(self, name: str) -> int:
        return self.names[name]


def _bump(delta: np.ndarray, base: np.ndarray, center: np.ndarray, direction, radius: float):
    """Add a Gaussian-falloff displacement around a point."""
    d2 = np.sum((base - center) ** 2, axis=1)
    w = np.exp(-d2 / (radius * radius))
    w[w < 1e-3] = 0.0
    delta += w[:, None] * np.asarray(direction, dtype=np.float64)


def default_face_mesh() -> FaceMesh:
    """Low-poly procedural face with deltas for all 52 blend shapes.

    Counts and evaluation regions (6 eye, 7 mouth vertices) follow the
    evaluation layout used by the millimeter metric; geometry is stylized.
    """
    b = _MeshBuilder()
    for name, pos in _CENTER_FEATURES.items():
        b.add(name, pos)
    for name, (x, y, z) in _SIDE_FEATURES.items():
        b.add(name + "Left", (x, y, z))
        b.add(name + "Right", (-x, y, z))

    # Dome grid over the front of the head.
    for phi in np.linspace(-1.15, 1.35, 16):
        for theta in np.linspace(-1.30, 1.30, 16):
            x = 0.95 * np.sin(theta) * np.cos(phi)
            y = 1.05 * np.sin(phi)
            z = 0.95 * np.cos(theta) * np.cos(phi)
            b.add("", (x, y, z))

    base = np.array(b.vertices, dtype=np.float64)
    deltas = {name: np.zeros_like(base) for name in bs.ALL_NAMES}

    def bump(shape: str, feature: str, direction, radius: float = 0.18):
        _bump(deltas[shape], base, base[b[feature]], direction, radius)

    for side, s in (("Left", 1.0), ("Right", -1.0)):
        def f(name: str) -> str:
            return name + side

        bump(f("eyeBlink"), f("upperLid"), (0, -0.055, 0), 0.12)
        bump(f("eyeBlink"), f("lowerLid"), (0, 0.015, 0), 0.10)
        bump(f("eyeLookDown"), f("upperLid"), (0, -0.022, 0), 0.10)
        bump(f("eyeLookDown"), f("lowerLid"), (0, -0.012, 0), 0.10)
        bump(f("eyeLookUp"), f("upperLid"), (0, 0.020, 0), 0.10)
        bump(f("eyeLookUp"), f("lowerLid"), (0, 0.010, 0), 0.10)
        bump(f("eyeLookIn"), f("upperLid"), (-s * 0.015, 0, 0), 0.10)
        bump(f("eyeLookOut"), f("upperLid"), (s * 0.015, 0, 0), 0.10)
        bump(f("eyeSquint"), f("lowerLid"), (0, 0.030, 0), 0.11)
        bump(f("eyeSquint"), f("cheek"), (0, 0.012, 0), 0.15)
        bump(f("eyeWide"), f("upperLid"), (0, 0.032, 0), 0.10)
        bump(f("mouthSmile"), f("mouthCorner"), (s * 0.030, 0.036, 0.012), 0.14)
        bump(f("mouthFrown"), f("mouthCorner"), (s * 0.012, -0.036, 0), 0.14)
        bump(f("mouthDimple"), f("mouthCorner"), (s * 0.024, 0.004, -0.012), 0.12)
        bump(f("mouthStretch"), f("mouthCorner"), (s * 0.046, -0.008, 0), 0.15)
        bump(f("mouthPress"), f("upperLip"), (0, -0.010, -0.006), 0.12)
        bump(f("mouthPress"), f("lowerLip"), (0, 0.012, -0.006), 0.12)
        bump(f("mouthLowerDown"), f("lowerLip"), (0, -0.030, 0.004), 0.12)
        bump(f("mouthUpperUp"), f("upperLip"), (0, 0.030, 0.004), 0.12)
        bump(f("browDown"), f("brow"), (0, -0.036, 0), 0.15)
        bump(f("browDown"), f("browInner"), (0, -0.016, 0), 0.12)
        bump(f("browOuterUp"), f("brow"), (0, 0.042, 0.004), 0.15)
        bump(f("cheekSquint"), f("cheek"), (0, 0.030, 0.008), 0.16)
        bump(f("noseSneer"), f("nostril"), (0, 0.020, 0.004), 0.10)

    bump("jawForward", "chin", (0, 0, 0.045), 0.22)
    bump("jawForward", "lowerLipCenter", (0, 0, 0.020), 0.16)
    for target, mag in (("chin", 0.050), ("jawCornerLeft", 0.035), ("jawCornerRight", 0.035),
                        ("lowerLipCenter", 0.030)):
        bump("jawLeft", target, (mag, 0, 0), 0.20)
        bump("jawRight", target, (-mag, 0, 0), 0.20)
    bump("jawOpen", "chin", (0, -0.200, -0.020), 0.24)
    bump("jawOpen", "jawCornerLeft", (0, -0.110, 0), 0.20)
    bump("jawOpen", "jawCornerRight", (0, -0.110, 0), 0.20)
    bump("jawOpen", "lowerLipCenter", (0, -0.150, 0), 0.15)
    bump("jawOpen", "lowerLipLeft", (0, -0.130, 0), 0.12)
    bump("jawOpen", "lowerLipRight", (0, -0.130, 0), 0.12)
    bump("jawOpen", "mouthCornerLeft", (0, -0.055, 0), 0.12)
    bump("jawOpen", "mouthCornerRight", (0, -0.055, 0), 0.12)
    bump("mouthClose", "lowerLipCenter", (0, 0.100, 0), 0.14)
    bump("mouthClose", "lowerLipLeft", (0, 0.085, 0), 0.12)
    bump("mouthClose", "lowerLipRight", (0, 0.085, 0), 0.12)
    bump("mouthClose", "upperLipCenter", (0, -0.020, 0), 0.12)
    for lip in ("upperLipCenter", "lowerLipCenter", "upperLipLeft", "upperLipRight",
                "lowerLipLeft", "lowerLipRight"):
        bump("mouthFunnel", lip, (0, 0, 0.035), 0.12)
        bump("mouthPucker", lip, (0, 0, 0.050), 0.12)
    bump("mouthFunnel", "mouthCornerLeft", (-0.020, 0, 0.010), 0.12)
    bump("mouthFunnel", "mouthCornerRight", (0.020, 0, 0.010), 0.12)
    bump("mouthPucker", "mouthCornerLeft", (-0.036, 0, 0.016), 0.12)
    bump("mouthPucker", "mouthCornerRight", (0.036, 0, 0.016), 0.12)
    for target in ("upperLipCenter", "lowerLipCenter", "mouthCornerLeft", "mouthCornerRight"):
        bump("mouthLeft", target, (0.040, 0, 0), 0.15)
        bump("mouthRight", target, (-0.040, 0, 0), 0.15)
    bump("mouthRollLower", "lowerLipCenter", (0, 0.012, -0.030), 0.12)
    bump("mouthRollUpper", "upperLipCenter", (0, -0.012, -0.030), 0.12)
    bump("mouthShrugLower", "lowerLipCenter", (0, 0.026, 0.010), 0.13)
    bump("mouthShrugLower", "chin", (0, 0.018, 0.010), 0.15)
    bump("mouthShrugUpper", "upperLipCenter", (0, 0.026, 0.010), 0.13)
    bump("browInnerUp", "browInnerLeft", (0, 0.040, 0.004), 0.13)
    bump("browInnerUp", "browInnerRight", (0, 0.040, 0.004), 0.13)
    bump("browInnerUp", "browCenter", (0, 0.036, 0.004), 0.13)
    bump("cheekPuff", "cheekLeft", (0.045, -0.006, 0.018), 0.18)
    bump("cheekPuff", "cheekRight", (-0.045, -0.006, 0.018), 0.18)
    bump("tongueOut", "tongueTip", (0, -0.020, 0.090), 0.10)

    eval_vertices = (
        (b["browLeft"], REGION_EYE),
        (b["browRight"], REGION_EYE),
        (b["upperLidLeft"], REGION_EYE),
        (b["upperLidRight"], REGION_EYE),
        (b["lowerLidLeft"], REGION_EYE),
        (b["lowerLidRight"], REGION_EYE),
        (b["mouthCornerLeft"], REGION_MOUTH),
        (b["mouthCornerRight"], REGION_MOUTH),
        (b["upperLipCenter"], REGION_MOUTH),
        (b["lowerLipCenter"], REGION_MOUTH),
        (b["chin"], REGION_MOUTH),
        (b["tongueTip"], REGION_MOUTH),
        (b["lowerLipLeft"], REGION_MOUTH),
    )
    mesh = FaceMesh(
        base_vertices=base,
        deltas=deltas,
        inner_canthus_left=b["innerCanthusLeft"],
        inner_canthus_right=b["innerCanthusRight"],
        eval_vertices=eval_vertices,
    )
    return mesh.validate()
