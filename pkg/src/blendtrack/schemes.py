"""Experiment protocols: user-independent training, calibration, and inference.

The user-independent scheme holds one test subject out and trains on everyone
else for a fixed number of epochs. Calibration fine-tunes that model on a
50/50 mix of one of the test subject's clips (limited to a configurable
fraction of its frame timeline) and samples drawn from the original training
pool. Evaluation partitions follow the calibration clip: "same location" is
the remaining test-subject clips at the calibration clip's location,
"another location" is all test-subject clips at the other location.

Every run emits a manifest recording the config hash, seed, and sample
provenance counts, which the leakage audit checks.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import net
from .augment import resize_normalize, white_balance_jitter
from .blendshapes import (
    CENTER_SLICE,
    HalfFacePrediction,
    Side,
    merge_half_predictions,
    mirror_center,
    N_HALF,
    N_SIDE,
)
from .metrics import (
    CorrelationReport,
    VertexErrorReport,
    aggregate_errors,
    pearson_per_blendshape,
    vertex_error_batch,
)
from .mesh import FaceMesh, MmScale
from .pipeline import Dataset, EvalPair, SyncedSample

SCHEMA = "btrk/1"

KIND_INDEPENDENT = "user_independent"
KIND_CALIBRATED = "user_calibrated"


@dataclass(frozen=True)
class TrainConfig:
    epochs_independent: int = 5
    epochs_calibration: int = 10
    calibration_fraction: float = 0.10
    batch_size: int = 16
    learning_rate: float = 1e-3
    seed: int = 0
    input_h: int = 64
    input_w: int = 64
    augment_enabled: bool = True
    augment_gain_lo: float = 0.7
    augment_gain_hi: float = 1.3
    loss_scale_base: float = 50.0

    def __post_init__(self):
        if self.epochs_independent < 1 or self.epochs_calibration < 1:
            raise ValueError("epoch counts must be >= 1")
        if not 0.0 < self.calibration_fraction <= 1.0:
            raise ValueError("calibration_fraction must lie in (0, 1]")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def to_json_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json_dict(cls, doc: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**doc)

    def hash(self) -> str:
        canonical = json.dumps(self.to_json_dict(), sort_keys=True)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


@dataclass(frozen=True)
class SplitPlan:
    test_subject: str
    training_subjects: tuple[str, ...]
    calibration_location: str
    calibration_clip: int

    def __post_init__(self):
        if self.test_subject in self.training_subjects:
            raise ValueError("test subject must not appear among training subjects")


def make_split(dataset: Dataset, test_subject: str, calibration_clip: tuple[str, int] | None = None,
               seed: int = 0) -> SplitPlan:
    """Leave-one-subject-out split; the calibration clip defaults to a seeded pick."""
    subjects = dataset.subject_ids()
    if test_subject not in subjects:
        raise ValueError(f"unknown test subject {test_subject!r}; have {subjects}")
    training = tuple(s for s in subjects if s != test_subject)
    if not training:
        raise ValueError("no training subjects left after holding out the test subject")
    if calibration_clip is None:
        clips = sorted({(p.location, p.clip_id) for p in dataset.eval_pairs if p.subject_id == test_subject})
        if not clips:
            clips = sorted({(s.location, s.clip_id) for s in dataset.samples if s.subject_id == test_subject})
        if not clips:
            raise ValueError(f"test subject {test_subject!r} has no clips")
        rng = np.random.default_rng([seed, 0xCA11])
        calibration_clip = clips[int(rng.integers(len(clips)))]
    location, clip_id = calibration_clip
    return SplitPlan(
        test_subject=test_subject,
        training_subjects=training,
        calibration_location=location,
        calibration_clip=int(clip_id),
    )


@dataclass
class RunManifest:
    kind: str
    config: dict
    config_hash: str
    seed: int
    test_subject: str
    training_subjects: list[str]
    calibration_location: str
    calibration_clip: int
    training_sample_counts: dict[str, int]
    calibration_clip_samples: int = 0
    calibration_pool_samples: int = 0
    calibration_pool_counts: dict[str, int] = field(default_factory=dict)
    calibration_timestamps: int = 0
    eval_partitions: dict[str, list[list]] = field(default_factory=dict)
    epoch_losses: list[float] = field(default_factory=list)

    def to_json_dict(self) -> dict:
        return {"schema": SCHEMA, **asdict(self)}

    @classmethod
    def from_json_dict(cls, doc: dict) -> "RunManifest":
        doc = dict(doc)
        if doc.pop("schema", SCHEMA) != SCHEMA:
            raise ValueError("unsupported run manifest schema")
        return cls(**doc)


def eval_partition_clips(dataset: Dataset, split: SplitPlan) -> dict[str, list[tuple[str, int]]]:
    """Clip lists for the two evaluation partitions (calibration clip excluded)."""
    clips = sorted({(p.location, p.clip_id) for p in dataset.eval_pairs
                    if p.subject_id == split.test_subject})
    same = [(loc, cid) for loc, cid in clips
            if loc == split.calibration_location and cid != split.calibration_clip]
    another = [(loc, cid) for loc, cid in clips if loc != split.calibration_location]
    return {"same_location": same, "another_location": another}


def eval_partition_pairs(dataset: Dataset, split: SplitPlan) -> dict[str, list[EvalPair]]:
    parts = eval_partition_clips(dataset, split)
    out: dict[str, list[EvalPair]] = {}
    for name, clips in parts.items():
        allowed = set(clips)
        out[name] = [p for p in dataset.eval_pairs
                     if p.subject_id == split.test_subject and (p.location, p.clip_id) in allowed]
    return out


# ---------------------------------------------------------------------------
# Training loops
# ---------------------------------------------------------------------------

def _assemble_batch(samples: list[SyncedSample], config: TrainConfig, rng: np.random.Generator):
    """Stack images (augmented, normalized, resized) and targets for one batch."""
    n = len(samples)
    batch = np.empty((n, config.input_h, config.input_w, 3))
    labels = np.empty((n, N_HALF))
    for i, sample in enumerate(samples):
        image = sample.image
        if config.augment_enabled:
            image = white_balance_jitter(image, int(rng.integers(2**63)),
                                         (config.augment_gain_lo, config.augment_gain_hi))
        batch[i] = resize_normalize(image, config.input_h, config.input_w)
        labels[i] = sample.target
    return batch, labels


def _train_epochs(model: net.RegressorModel, samples: list[SyncedSample], epochs: int,
                  config: TrainConfig, rng: np.random.Generator) -> list[float]:
    state = net.adam_init(model, learning_rate=config.learning_rate)
    order = np.arange(len(samples))
    epoch_losses = []
    for _ in range(epochs):
        rng.shuffle(order)
        losses = []
        for start in range(0, len(order), config.batch_size):
            chunk = [samples[i] for i in order[start:start + config.batch_size]]
            batch, labels = _assemble_batch(chunk, config, rng)
            losses.append(net.train_step(model, state, batch, labels, config.loss_scale_base))
        epoch_losses.append(float(np.mean(losses)))
    return epoch_losses


def _count_by_subject(samples: list[SyncedSample]) -> dict[str, int]:
    counts: dict[str, int] = {}
    for s in samples:
        counts[s.subject_id] = counts.get(s.subject_id, 0) + 1
    return counts


def train_user_independent(dataset: Dataset, config: TrainConfig,
                           split: SplitPlan) -> tuple[net.RegressorModel, RunManifest]:
    """Train a fresh model on every subject except the held-out test subject."""
    samples = dataset.filter_samples(subjects=split.training_subjects)
    if not samples:
        raise ValueError("empty training set")
    if any(s.subject_id == split.test_subject for s in samples):
        raise AssertionError("leakage: test-subject sample in independent training set")

    model = net.RegressorModel(config.input_h, config.input_w).initialize(config.seed)
    rng = np.random.default_rng([config.seed, 1])
    epoch_losses = _train_epochs(model, samples, config.epochs_independent, config, rng)
    manifest = RunManifest(
        kind=KIND_INDEPENDENT,
        config=config.to_json_dict(),
        config_hash=config.hash(),
        seed=config.seed,
        test_subject=split.test_subject,
        training_subjects=sorted(split.training_subjects),
        calibration_location=split.calibration_location,
        calibration_clip=split.calibration_clip,
        training_sample_counts=_count_by_subject(samples),
        eval_partitions={k: [list(c) for c in v] for k, v in eval_partition_clips(dataset, split).items()},
        epoch_losses=epoch_losses,
    )
    return model, manifest


def select_calibration_samples(dataset: Dataset, config: TrainConfig, split: SplitPlan,
                               rng: np.random.Generator) -> list[SyncedSample]:
    """Draw the test-subject calibration set, limited to a fraction of the clip.

    The sampling unit is the frame timestamp (one stereo pair), so a fraction
    of 0.10 over a 2-minute 8 fps clip selects ~96 frame pairs (~12 s of
    footage); both side images of a drawn timestamp enter the set.
    """
    clip_samples = dataset.filter_samples(
        subjects=[split.test_subject], location=split.calibration_location,
        clip_id=split.calibration_clip,
    )
    if not clip_samples:
        raise ValueError("calibration clip has no samples")
    timestamps = sorted({s.timestamp_ms for s in clip_samples})
    n_draw = max(1, int(round(config.calibration_fraction * len(timestamps))))
    chosen = set(rng.choice(len(timestamps), size=n_draw, replace=False).tolist())
    chosen_ts = {timestamps[i] for i in chosen}
    return [s for s in clip_samples if s.timestamp_ms in chosen_ts]


def calibrate(base: net.RegressorModel, dataset: Dataset, config: TrainConfig,
              split: SplitPlan) -> tuple[net.RegressorModel, RunManifest]:
    """Fine-tune a copy of the base model on a 50/50 calibration/pool mix."""
    rng = np.random.default_rng([config.seed, 2])
    calib = select_calibration_samples(dataset, config, split, rng)
    pool = dataset.filter_samples(subjects=split.training_subjects)
    if not pool:
        raise ValueError("empty training pool for calibration mixing")
    take = len(calib)
    pool_idx = rng.choice(len(pool), size=take, replace=len(pool) < take)
    mixed = calib + [pool[i] for i in pool_idx]

    model = base.copy()
    epoch_losses = _train_epochs(model, mixed, config.epochs_calibration, config, rng)
    manifest = RunManifest(
        kind=KIND_CALIBRATED,
        config=config.to_json_dict(),
        config_hash=config.hash(),
        seed=config.seed,
        test_subject=split.test_subject,
        training_subjects=sorted(split.training_subjects),
        calibration_location=split.calibration_location,
        calibration_clip=split.calibration_clip,
        training_sample_counts=_count_by_subject(mixed),
        calibration_clip_samples=len(calib),
        calibration_pool_samples=int(take),
        calibration_pool_counts=_count_by_subject([pool[i] for i in pool_idx]),
        calibration_timestamps=len({s.timestamp_ms for s in calib}),
        eval_partitions={k: [list(c) for c in v] for k, v in eval_partition_clips(dataset, split).items()},
        epoch_losses=epoch_losses,
    )
    return model, manifest


def calibration_curve(base: net.RegressorModel, dataset: Dataset, config: TrainConfig,
                      split: SplitPlan, fractions: list[float], mesh: FaceMesh,
                      scale: MmScale, partition: str = "held_out") -> list[dict]:
    """Calibrate once per fraction and evaluate each model on one fixed partition.

    Fraction seeds derive from the master seed so runs are independent but
    reproducible. The default partition pools both held-out partitions, which
    averages location-specific fine-tuning drift out of the trend. Reported
    seconds measure the selected share of the clip's frame timeline.
    """
    if list(fractions) != sorted(fractions) or not all(0.0 < f <= 1.0 for f in fractions):
        raise ValueError("fractions must be ascending and in (0, 1]")
    parts = eval_partition_pairs(dataset, split)
    if partition == "held_out":
        pairs = parts["same_location"] + parts["another_location"]
    else:
        pairs = parts[partition]
    if not pairs:
        raise ValueError(f"evaluation partition {partition!r} is empty")
    clip_samples = dataset.filter_samples(
        subjects=[split.test_subject], location=split.calibration_location,
        clip_id=split.calibration_clip,
    )
    timestamps = sorted({s.timestamp_ms for s in clip_samples})
    clip_span_s = (timestamps[-1] - timestamps[0]) / 1000.0 if len(timestamps) > 1 else 0.0

    results = []
    for i, fraction in enumerate(fractions):
        run_config = replace(config, calibration_fraction=float(fraction),
                             seed=int(np.random.default_rng([config.seed, 3, i]).integers(2**31)))
        model, manifest = calibrate(base, dataset, run_config, split)
        report, _ = evaluate_model(model, pairs, mesh, scale)
        results.append({
            "fraction": float(fraction),
            "seconds": float(fraction * clip_span_s),
            "overall_mean_mm": report.overall_mean_mm,
            "calibration_clip_samples": manifest.calibration_clip_samples,
        })
    return results


# ---------------------------------------------------------------------------
# Inference and evaluation
# ---------------------------------------------------------------------------

def _preprocess_pair(pair: EvalPair, input_h: int, input_w: int):
    left = np.ascontiguousarray(pair.left_image[:, ::-1, :])
    return (resize_normalize(left, input_h, input_w),
            resize_normalize(pair.right_image, input_h, input_w))


def predict_full_face(model: net.RegressorModel, left_image: np.ndarray,
                      right_image: np.ndarray) -> np.ndarray:
    """Merge half-face predictions from one left/right image pair.

    The left image is flipped to canonical orientation; its center block comes
    back in mirrored space and is un-mirrored before averaging.
    """
    left = resize_normalize(np.ascontiguousarray(np.asarray(left_image)[:, ::-1, :]),
                            model.input_h, model.input_w)
    right = resize_normalize(right_image, model.input_h, model.input_w)
    out = model.forward(np.stack([left, right]))
    left_pred = HalfFacePrediction(Side.LEFT, out[0, :N_SIDE], mirror_center(out[0, N_SIDE:]))
    right_pred = HalfFacePrediction(Side.RIGHT, out[1, :N_SIDE], out[1, N_SIDE:])
    return merge_half_predictions(left_pred, right_pred)


def predict_pairs(model: net.RegressorModel, pairs: list[EvalPair],
                  batch_size: int = 64) -> np.ndarray:
    """Batched predict_full_face over evaluation pairs; returns (M, 52)."""
    m = len(pairs)
    preds = np.empty((m, 52))
    for start in range(0, m, batch_size):
        chunk = pairs[start:start + batch_size]
        batch = np.empty((2 * len(chunk), model.input_h, model.input_w, 3))
        for i, pair in enumerate(chunk):
            batch[2 * i], batch[2 * i + 1] = _preprocess_pair(pair, model.input_h, model.input_w)
        out = model.forward(batch)
        for i in range(len(chunk)):
            left_pred = HalfFacePrediction(Side.LEFT, out[2 * i, :N_SIDE],
                                           mirror_center(out[2 * i, N_SIDE:]))
            right_pred = HalfFacePrediction(Side.RIGHT, out[2 * i + 1, :N_SIDE],
                                            out[2 * i + 1, N_SIDE:])
            preds[start + i] = merge_half_predictions(left_pred, right_pred)
    return preds


def evaluate_model(model: net.RegressorModel, pairs: list[EvalPair], mesh: FaceMesh,
                   scale: MmScale) -> tuple[VertexErrorReport, CorrelationReport]:
    """Millimeter vertex-error report and Pearson report over evaluation pairs."""
    if not pairs:
        raise ValueError("no evaluation pairs")
    preds = predict_pairs(model, pairs)
    gts = np.stack([p.weights for p in pairs])
    errors = vertex_error_batch(mesh, scale, gts, preds)
    return (aggregate_errors(errors, mesh.eval_regions()),
            pearson_per_blendshape(preds, gts))


# ---------------------------------------------------------------------------
# Leakage audit
# ---------------------------------------------------------------------------

def audit_manifest(manifest: RunManifest) -> list[str]:
    """Return provenance violations (empty list = clean)."""
    problems = []
    if manifest.test_subject in manifest.training_subjects:
        problems.append("test subject listed among training subjects")
    if manifest.kind == KIND_INDEPENDENT:
        if manifest.training_sample_counts.get(manifest.test_subject, 0) > 0:
            problems.append("test-subject samples present in independent training")
    if manifest.kind == KIND_CALIBRATED:
        test_count = manifest.training_sample_counts.get(manifest.test_subject, 0)
        if test_count != manifest.calibration_clip_samples:
            problems.append(
                "test-subject sample count does not match the calibration clip draw "
                f"({test_count} vs {manifest.calibration_clip_samples})"
            )
        if manifest.calibration_pool_counts.get(manifest.test_subject, 0) > 0:
            problems.append("test-subject samples drawn from the training pool")
        calib_clip = [manifest.calibration_location, manifest.calibration_clip]
        for name, clips in manifest.eval_partitions.items():
            if calib_clip in clips:
                problems.append(f"calibration clip appears in evaluation partition {name!r}")
    for name, count in manifest.training_sample_counts.items():
        if name != manifest.test_subject and name not in manifest.training_subjects:
            problems.append(f"samples from undeclared subject {name!r}")
    return problems
