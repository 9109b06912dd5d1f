"""Evaluation instruments: millimeter vertex error and per-blend-shape Pearson R.

Vertex error deforms the face mesh once with the ground-truth weights and once
with the predicted weights and measures the 3D Euclidean distance at each of
the 13 tracked vertices, converted to millimeters via the canthal scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import blendshapes as bs
from .mesh import REGION_EYE, REGION_MOUTH, FaceMesh, MmScale, N_EVAL_VERTICES


@dataclass(frozen=True)
class VertexErrorReport:
    per_vertex_mm: np.ndarray          # (13,) mean per tracked vertex
    eye_mean_mm: float
    mouth_mean_mm: float
    overall_mean_mm: float
    sample_count: int

    def to_json_dict(self) -> dict:
        return {
            "per_vertex_mm": [float(v) for v in self.per_vertex_mm],
            "eye_mean_mm": float(self.eye_mean_mm),
            "mouth_mean_mm": float(self.mouth_mean_mm),
            "overall_mean_mm": float(self.overall_mean_mm),
            "sample_count": int(self.sample_count),
        }


@dataclass(frozen=True)
class CorrelationReport:
    per_blendshape_r: np.ndarray       # (52,), NaN where undefined
    region_means: dict[str, float]     # NaN-free; regions with no defined R map to NaN
    overall_mean: float

    def to_json_dict(self) -> dict:
        return {
            "per_blendshape_r": [None if math.isnan(v) else float(v) for v in self.per_blendshape_r],
            "region_means": {k: (None if math.isnan(v) else float(v)) for k, v in self.region_means.items()},
            "overall_mean": None if math.isnan(self.overall_mean) else float(self.overall_mean),
        }


def vertex_error(mesh: FaceMesh, scale: MmScale, gt: np.ndarray, pred: np.ndarray) -> np.ndarray:
    """Millimeter distances at the 13 eval vertices between the two deformations.

    Only the eval vertices are deformed; the result equals deforming the whole
    mesh and measuring there.
    """
    return vertex_error_batch(mesh, scale, np.asarray(gt)[None, :], np.asarray(pred)[None, :])[0]


def vertex_error_batch(mesh: FaceMesh, scale: MmScale, gts: np.ndarray, preds: np.ndarray) -> np.ndarray:
    """Vectorized vertex_error over M weight pairs; returns (M, 13) in mm."""
    gts = np.asarray(gts, dtype=np.float64)
    preds = np.asarray(preds, dtype=np.float64)
    if gts.shape != preds.shape or gts.ndim != 2 or gts.shape[1] != bs.N_SHAPES:
        raise ValueError(f"expected matching (M, {bs.N_SHAPES}) arrays, got {gts.shape} and {preds.shape}")
    ev = mesh.eval_indices()
    # (52, 13, 3) displacement basis restricted to the eval vertices
    basis = mesh.delta_stack()[:, ev, :]
    diff = np.tensordot(gts - preds, basis, axes=1)          # (M, 13, 3)
    return np.linalg.norm(diff, axis=2) * scale.millimeters_per_model_unit


def aggregate_errors(samples: np.ndarray, regions: tuple[str, ...]) -> VertexErrorReport:
    """Mean per-vertex / per-region / overall error over a batch of samples.

    `samples` is (M, 13) millimeter errors; `regions` tags each vertex column
    as eye or mouth. The overall mean averages all 13 vertices, then samples.
    """
    arr = np.asarray(samples, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != N_EVAL_VERTICES:
        raise ValueError(f"expected (M, {N_EVAL_VERTICES}) error samples, got {arr.shape}")
    if arr.shape[0] == 0:
        raise ValueError("aggregate_errors requires at least one sample")
    if len(regions) != N_EVAL_VERTICES:
        raise ValueError(f"expected {N_EVAL_VERTICES} region tags, got {len(regions)}")
    per_vertex = arr.mean(axis=0)
    eye_cols = [i for i, r in enumerate(regions) if r == REGION_EYE]
    mouth_cols = [i for i, r in enumerate(regions) if r == REGION_MOUTH]
    return VertexErrorReport(
        per_vertex_mm=per_vertex,
        eye_mean_mm=float(per_vertex[eye_cols].mean()),
        mouth_mean_mm=float(per_vertex[mouth_cols].mean()),
        overall_mean_mm=float(per_vertex.mean()),
        sample_count=arr.shape[0],
    )


def improvement_ratio(error_reference: float, error_improved: float) -> float:
    """Relative improvement (e_ref - e_new) / e_new of a lower-is-better error."""
    if error_improved <= 0.0:
        raise ValueError("improved error must be positive")
    return (error_reference - error_improved) / error_improved


def mean_sem(values) -> tuple[float, float]:
    """Mean and standard error of the mean across groups (ddof=1)."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("mean_sem requires at least one value")
    if arr.size == 1:
        return float(arr[0]), 0.0
    return float(arr.mean()), float(arr.std(ddof=1) / np.sqrt(arr.size))


def pearson_per_blendshape(preds: np.ndarray, labels: np.ndarray) -> CorrelationReport:
    """Pearson R per blend-shape channel between predictions and references.

    Channels with zero variance in either series are undefined (NaN) and
    excluded from region and overall means.
    """
    p = np.asarray(preds, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if p.shape != y.shape:
        raise ValueError(f"length mismatch: preds {p.shape} vs labels {y.shape}")
    if p.ndim != 2 or p.shape[1] != bs.N_SHAPES or p.shape[0] == 0:
        raise ValueError(f"expected non-empty (M, {bs.N_SHAPES}) arrays, got {p.shape}")

    pc = p - p.mean(axis=0)
    yc = y - y.mean(axis=0)
    cov = (pc * yc).sum(axis=0)
    var_p = (pc * pc).sum(axis=0)
    var_y = (yc * yc).sum(axis=0)
    r = np.full(bs.N_SHAPES, np.nan)
    ok = (var_p > 0.0) & (var_y > 0.0)
    r[ok] = cov[ok] / np.sqrt(var_p[ok] * var_y[ok])

    region_means = {}
    for region, names in bs.REGIONS.items():
        vals = np.array([r[bs.INDEX[n]] for n in names])
        defined = vals[~np.isnan(vals)]
        region_means[region] = float(defined.mean()) if defined.size else float("nan")
    defined_all = r[~np.isnan(r)]
    overall = float(defined_all.mean()) if defined_all.size else float("nan")
    return CorrelationReport(per_blendshape_r=r, region_means=region_means, overall_mean=overall)
