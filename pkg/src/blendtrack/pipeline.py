"""Recording ingestion: manifests, clock-offset estimation, alignment, cleaning.

Dataset layout on disk:

  manifest.json        {"schema": "btrk/1", "subjects": [{"subject_id", "clips":
                        [{"location", "clip_id", "left_frames_dir",
                          "right_frames_dir", "gt_csv"}]}]}  (paths relative to
                        the manifest directory)
  <frames dir>/        frame_000000.png ... plus timestamps.csv
                       ("seq_index,timestamp_ms")
  gt.csv               header "timestamp_ms,valid,<52 canonical names>",
                       one row per ground-truth frame

The two cameras share one recorder clock; the ground-truth stream runs on its
own clock. `estimate_offset` recovers the offset between the two from eye
blinks, `align` matches frames to the nearest ground-truth record, and `clean`
applies the exposure/validity cleaning rules.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from . import blendshapes as bs
from .blendshapes import Side, extract_half_target

log = logging.getLogger(__name__)

DEFAULT_TOLERANCE_MS = 17          # half the 30 fps ground-truth period
DEFAULT_SEARCH_RANGE_MS = 5000
FIRST_FRAMES_DROPPED = 3           # exposure settles during the first frames

# Fractional (x0, y0, x1, y1) crop that covers the rendered eye and brow
# across subject geometry jitter, in canonical (right-camera) orientation.
DEFAULT_EYE_REGION = (0.18, 0.14, 0.62, 0.50)


@dataclass(frozen=True)
class FrameRecord:
    timestamp_ms: int
    image: np.ndarray        # (H, W, 3) uint8
    side: Side
    seq_index: int


@dataclass(frozen=True)
class GroundTruthRecord:
    timestamp_ms: int
    weights: np.ndarray      # (52,)
    valid: bool


@dataclass(frozen=True)
class Series:
    """A scalar signal sampled at integer-millisecond timestamps."""

    timestamps_ms: np.ndarray
    values: np.ndarray


@dataclass(frozen=True)
class ClipRef:
    subject_id: str
    location: str
    clip_id: int
    left_frames_dir: Path
    right_frames_dir: Path
    gt_csv: Path

    @property
    def key(self) -> str:
        return f"{self.subject_id}/{self.location}/{self.clip_id}"


@dataclass(frozen=True)
class SyncedSample:
    image: np.ndarray        # uint8, flipped to canonical orientation if side == LEFT
    side: Side
    target: np.ndarray       # (34,)
    subject_id: str
    location: str
    clip_id: int
    timestamp_ms: int


@dataclass(frozen=True)
class EvalPair:
    """Raw (unflipped) left/right images time-aligned to one ground-truth vector."""

    left_image: np.ndarray
    right_image: np.ndarray
    weights: np.ndarray      # (52,)
    subject_id: str
    location: str
    clip_id: int
    timestamp_ms: int


@dataclass(frozen=True)
class ClipSyncReport:
    subject_id: str
    location: str
    clip_id: int
    offset_ms: int
    n_frames_left: int
    n_frames_right: int
    matched: int
    dropped_unmatched: int
    dropped_first_frames: int
    dropped_invalid: int

    def to_json_dict(self) -> dict:
        return {
            "subject_id": self.subject_id,
            "location": self.location,
            "clip_id": self.clip_id,
            "offset_ms": self.offset_ms,
            "n_frames_left": self.n_frames_left,
            "n_frames_right": self.n_frames_right,
            "matched": self.matched,
            "dropped_unmatched": self.dropped_unmatched,
            "dropped_first_frames": self.dropped_first_frames,
            "dropped_invalid": self.dropped_invalid,
        }


@dataclass(frozen=True)
class SyncConfig:
    eye_region: tuple[float, float, float, float] = DEFAULT_EYE_REGION
    search_range_ms: int = DEFAULT_SEARCH_RANGE_MS
    tolerance_ms: int = DEFAULT_TOLERANCE_MS


# ---------------------------------------------------------------------------
# File I/O
# ---------------------------------------------------------------------------

def load_manifest(path) -> list[ClipRef]:
    path = Path(path)
    with open(path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    if doc.get("schema") != "btrk/1":
        raise ValueError(f"{path}: unsupported manifest schema {doc.get('schema')!r}")
    root = path.parent
    clips: list[ClipRef] = []
    for subject in doc["subjects"]:
        sid = subject["subject_id"]
        locations = set()
        for clip in subject["clips"]:
            locations.add(clip["location"])
            clips.append(ClipRef(
                subject_id=sid,
                location=clip["location"],
                clip_id=int(clip["clip_id"]),
                left_frames_dir=root / clip["left_frames_dir"],
                right_frames_dir=root / clip["right_frames_dir"],
                gt_csv=root / clip["gt_csv"],
            ))
        if len(locations) < 2:
            log.warning("subject %s has clips at %d location(s); protocol expects both", sid, len(locations))
    return clips


def load_frames(frames_dir, side: Side) -> list[FrameRecord]:
    frames_dir = Path(frames_dir)
    ts_path = frames_dir / "timestamps.csv"
    records: list[FrameRecord] = []
    with open(ts_path, "r", encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if header != ["seq_index", "timestamp_ms"]:
            raise ValueError(f"{ts_path}: bad header {header}")
        prev_ts = None
        for row_i, row in enumerate(reader):
            seq, ts = int(row[0]), int(row[1])
            if seq != row_i:
                raise ValueError(f"{ts_path}: seq_index not contiguous at row {row_i}")
            if prev_ts is not None and ts <= prev_ts:
                raise ValueError(f"{ts_path}: timestamps not strictly increasing at row {row_i}")
            prev_ts = ts
            image = np.asarray(Image.open(frames_dir / f"frame_{seq:06d}.png").convert("RGB"))
            records.append(FrameRecord(timestamp_ms=ts, image=image, side=side, seq_index=seq))
    return records


def load_gt(csv_path) -> list[GroundTruthRecord]:
    csv_path = Path(csv_path)
    expected_header = ["timestamp_ms", "valid", *bs.ALL_NAMES]
    records: list[GroundTruthRecord] = []
    with open(csv_path, "r", encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if header != expected_header:
            raise ValueError(f"{csv_path}: header does not match the canonical blend-shape order")
        prev_ts = None
        for row_i, row in enumerate(reader):
            ts = int(row[0])
            if prev_ts is not None and ts <= prev_ts:
                raise ValueError(f"{csv_path}: timestamps not strictly increasing at row {row_i}")
            prev_ts = ts
            weights = np.array([float(v) for v in row[2:]], dtype=np.float64)
            if weights.shape != (bs.N_SHAPES,):
                raise ValueError(f"{csv_path}: row {row_i} has {weights.size} weights")
            records.append(GroundTruthRecord(timestamp_ms=ts, weights=weights, valid=row[1] == "1"))
    return records


def write_gt_csv(path, records: list[GroundTruthRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["timestamp_ms", "valid", *bs.ALL_NAMES])
        for rec in records:
            writer.writerow([rec.timestamp_ms, "1" if rec.valid else "0",
                             *(f"{w:.6f}" for w in rec.weights)])


def write_frames(frames_dir, frames: list[FrameRecord]) -> None:
    frames_dir = Path(frames_dir)
    frames_dir.mkdir(parents=True, exist_ok=True)
    with open(frames_dir / "timestamps.csv", "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["seq_index", "timestamp_ms"])
        for rec in frames:
            writer.writerow([rec.seq_index, rec.timestamp_ms])
    for rec in frames:
        Image.fromarray(rec.image).save(frames_dir / f"frame_{rec.seq_index:06d}.png")


# ---------------------------------------------------------------------------
# Synchronization
# ---------------------------------------------------------------------------

def blink_proxy(frames: list[FrameRecord], eye_region_px: tuple[int, int, int, int]) -> Series:
    """Per-frame eye-region darkness: 1 - mean normalized luminance of the crop.

    `eye_region_px` is (x0, y0, x1, y1) in pixels, end-exclusive.
    """
    if not frames:
        raise ValueError("blink_proxy requires a non-empty frame stream")
    x0, y0, x1, y1 = eye_region_px
    h, w = frames[0].image.shape[:2]
    if not (0 <= x0 < x1 <= w and 0 <= y0 < y1 <= h):
        raise ValueError(f"eye region {eye_region_px} outside image bounds {w}x{h} or empty")
    ts = np.array([f.timestamp_ms for f in frames], dtype=np.int64)
    vals = np.empty(len(frames))
    for i, f in enumerate(frames):
        crop = f.image[y0:y1, x0:x1]
        vals[i] = 1.0 - crop.mean() / 255.0
    return Series(timestamps_ms=ts, values=vals)


def eye_region_pixels(region_frac: tuple[float, float, float, float],
                      image_hw: tuple[int, int]) -> tuple[int, int, int, int]:
    h, w = image_hw
    x0, y0, x1, y1 = region_frac
    return (int(x0 * w), int(y0 * h), max(int(x1 * w), int(x0 * w) + 1), max(int(y1 * h), int(y0 * h) + 1))


def gt_blink_series(records: list[GroundTruthRecord]) -> Series:
    """Mean of the two eye-blink channels over valid records."""
    i_l = bs.INDEX["eyeBlinkLeft"]
    i_r = bs.INDEX["eyeBlinkRight"]
    valid = [r for r in records if r.valid]
    if not valid:
        raise ValueError("no valid ground-truth records")
    ts = np.array([r.timestamp_ms for r in valid], dtype=np.int64)
    vals = np.array([(r.weights[i_l] + r.weights[i_r]) / 2.0 for r in valid])
    return Series(timestamps_ms=ts, values=vals)


def estimate_offset(proxy: Series, gt_blink: Series, search_range_ms: int = DEFAULT_SEARCH_RANGE_MS) -> int:
    """Clock offset (gt time - frame time) maximizing normalized cross-correlation.

    Both series are resampled onto a shared 1 ms grid; the correlation is
    normalized per lag over the overlap window and searched over
    +-search_range_ms in 1 ms steps. Ties break toward the smallest |offset|.
    """
    if len(proxy.values) < 2 or len(gt_blink.values) < 2:
        raise ValueError("offset estimation requires at least 2 samples per series")
    if np.ptp(proxy.values) == 0.0 or np.ptp(gt_blink.values) == 0.0:
        raise ValueError("zero-variance series: no blinks to align")

    t0 = int(min(proxy.timestamps_ms[0], gt_blink.timestamps_ms[0]))
    t1 = int(max(proxy.timestamps_ms[-1], gt_blink.timestamps_ms[-1]))
    grid = np.arange(t0, t1 + 1, dtype=np.int64)
    n = grid.size
    r = int(search_range_ms)
    if r >= n - 1:
        raise ValueError(f"search range {r} ms exceeds signal span {n - 1} ms")
    p = np.interp(grid, proxy.timestamps_ms, proxy.values)
    g = np.interp(grid, gt_blink.timestamps_ms, gt_blink.values)

    # Cross term X[k] = sum_t p[t] * g[t + k] for k in [-r, r], via FFT.
    nfft = 1 << int(np.ceil(np.log2(n + r + 1)))
    fp = np.fft.rfft(p, nfft)
    fg = np.fft.rfft(g, nfft)
    corr = np.fft.irfft(fg * np.conj(fp), nfft)
    lags = np.arange(-r, r + 1)
    cross = corr[lags % nfft]

    # Windowed sums over the overlap region for per-lag normalization.
    cp = np.concatenate([[0.0], np.cumsum(p)])
    cp2 = np.concatenate([[0.0], np.cumsum(p * p)])
    cg = np.concatenate([[0.0], np.cumsum(g)])
    cg2 = np.concatenate([[0.0], np.cumsum(g * g)])
    # p index window [a, b), g window [a + k, b + k)
    a = np.maximum(0, -lags)
    b = np.minimum(n, n - lags)
    counts = (b - a).astype(np.float64)
    sp = cp[b] - cp[a]
    sp2 = cp2[b] - cp2[a]
    sg = cg[b + lags] - cg[a + lags]
    sg2 = cg2[b + lags] - cg2[a + lags]
    cov = cross - sp * sg / counts
    var_p = sp2 - sp * sp / counts
    var_g = sg2 - sg * sg / counts
    denom = np.sqrt(np.maximum(var_p, 0.0) * np.maximum(var_g, 0.0))
    with np.errstate(invalid="ignore", divide="ignore"):
        ncc = np.where(denom > 0.0, cov / denom, -np.inf)

    best = np.max(ncc)
    ties = lags[ncc >= best - 1e-12]
    return int(min(ties, key=lambda k: (abs(k), k)))


def align(frames: list[FrameRecord], gt: list[GroundTruthRecord], offset_ms: int,
          tolerance_ms: int = DEFAULT_TOLERANCE_MS) -> list[tuple[FrameRecord, GroundTruthRecord]]:
    """Match each frame to the nearest ground-truth record within tolerance.

    frame.timestamp_ms + offset_ms is compared against gt timestamps; frames
    with no record within `tolerance_ms` are dropped. Equidistant neighbors
    resolve to the earlier record.
    """
    if not frames or not gt:
        return []
    gt_ts = np.array([g.timestamp_ms for g in gt], dtype=np.int64)
    pairs = []
    for frame in frames:
        t = frame.timestamp_ms + offset_ms
        i = int(np.searchsorted(gt_ts, t))
        best_j, best_d = None, None
        for j in (i - 1, i):
            if 0 <= j < len(gt):
                d = abs(int(gt_ts[j]) - t)
                if best_d is None or d < best_d:
                    best_j, best_d = j, d
        if best_j is not None and best_d <= tolerance_ms:
            pairs.append((frame, gt[best_j]))
    return pairs


def clean(pairs: list[tuple[FrameRecord, GroundTruthRecord]]) -> list[tuple[FrameRecord, GroundTruthRecord]]:
    """Drop early-exposure frames (seq_index < 3) and invalid-gt pairs. Idempotent."""
    return [(f, g) for f, g in pairs if f.seq_index >= FIRST_FRAMES_DROPPED and g.valid]


def build_samples(pairs, side: Side, *, subject_id: str = "", location: str = "",
                  clip_id: int = 0) -> list[SyncedSample]:
    """Turn cleaned pairs into training samples.

    Left images are mirrored to the canonical orientation and their targets
    carry the mirrored center block (see `extract_half_target`).
    """
    samples = []
    for frame, gt in pairs:
        image = frame.image
        if side is Side.LEFT:
            image = np.ascontiguousarray(image[:, ::-1, :])
        samples.append(SyncedSample(
            image=image,
            side=side,
            target=extract_half_target(gt.weights, side),
            subject_id=subject_id,
            location=location,
            clip_id=clip_id,
            timestamp_ms=frame.timestamp_ms,
        ))
    return samples


# ---------------------------------------------------------------------------
# Clip / dataset ingestion
# ---------------------------------------------------------------------------

@dataclass
class Dataset:
    samples: list[SyncedSample]
    eval_pairs: list[EvalPair]
    reports: list[ClipSyncReport]

    def filter_samples(self, *, subjects=None, exclude_subjects=None, location=None,
                       clip_id=None) -> list[SyncedSample]:
        out = self.samples
        if subjects is not None:
            allowed = set(subjects)
            out = [s for s in out if s.subject_id in allowed]
        if exclude_subjects is not None:
            blocked = set(exclude_subjects)
            out = [s for s in out if s.subject_id not in blocked]
        if location is not None:
            out = [s for s in out if s.location == location]
        if clip_id is not None:
            out = [s for s in out if s.clip_id == clip_id]
        return out

    def filter_pairs(self, *, subject=None, location=None, clip_id=None,
                     exclude_clip=None) -> list[EvalPair]:
        out = self.eval_pairs
        if subject is not None:
            out = [p for p in out if p.subject_id == subject]
        if location is not None:
            out = [p for p in out if p.location == location]
        if clip_id is not None:
            out = [p for p in out if p.clip_id == clip_id]
        if exclude_clip is not None:
            loc, cid = exclude_clip
            out = [p for p in out if not (p.location == loc and p.clip_id == cid)]
        return out

    def subject_ids(self) -> list[str]:
        return sorted({s.subject_id for s in self.samples})


def ingest_clip(clip: ClipRef, config: SyncConfig = SyncConfig()):
    """Load, synchronize, clean, and sample one clip.

    Returns (samples, eval_pairs, report). The offset is estimated from the
    right stream; both cameras share the recorder clock.
    """
    left = load_frames(clip.left_frames_dir, Side.LEFT)
    right = load_frames(clip.right_frames_dir, Side.RIGHT)
    gt = load_gt(clip.gt_csv)

    region = eye_region_pixels(config.eye_region, right[0].image.shape[:2])
    proxy = blink_proxy(right, region)
    offset = estimate_offset(proxy, gt_blink_series(gt), config.search_range_ms)

    samples: list[SyncedSample] = []
    cleaned_by_side: dict[Side, list] = {}
    matched = dropped_unmatched = dropped_first = dropped_invalid = 0
    for side, frames in ((Side.LEFT, left), (Side.RIGHT, right)):
        pairs = align(frames, gt, offset, config.tolerance_ms)
        kept = clean(pairs)
        matched += len(pairs)
        dropped_unmatched += len(frames) - len(pairs)
        dropped_first += sum(1 for f, _ in pairs if f.seq_index < FIRST_FRAMES_DROPPED)
        dropped_invalid += sum(1 for f, g in pairs if f.seq_index >= FIRST_FRAMES_DROPPED and not g.valid)
        cleaned_by_side[side] = kept
        samples.extend(build_samples(kept, side, subject_id=clip.subject_id,
                                     location=clip.location, clip_id=clip.clip_id))

    # Join the two sides on their matched gt record to form evaluation pairs.
    right_by_gt = {id(g): f for f, g in cleaned_by_side[Side.RIGHT]}
    eval_pairs = []
    for f_left, g in cleaned_by_side[Side.LEFT]:
        f_right = right_by_gt.get(id(g))
        if f_right is None:
            continue
        eval_pairs.append(EvalPair(
            left_image=f_left.image,
            right_image=f_right.image,
            weights=g.weights,
            subject_id=clip.subject_id,
            location=clip.location,
            clip_id=clip.clip_id,
            timestamp_ms=f_right.timestamp_ms,
        ))

    report = ClipSyncReport(
        subject_id=clip.subject_id,
        location=clip.location,
        clip_id=clip.clip_id,
        offset_ms=offset,
        n_frames_left=len(left),
        n_frames_right=len(right),
        matched=matched,
        dropped_unmatched=dropped_unmatched,
        dropped_first_frames=dropped_first,
        dropped_invalid=dropped_invalid,
    )
    return samples, eval_pairs, report


def ingest_dataset(manifest_path, config: SyncConfig = SyncConfig()) -> Dataset:
    samples: list[SyncedSample] = []
    eval_pairs: list[EvalPair] = []
    reports: list[ClipSyncReport] = []
    for clip in load_manifest(manifest_path):
        s, p, r = ingest_clip(clip, config)
        samples.extend(s)
        eval_pairs.extend(p)
        reports.append(r)
    return Dataset(samples=samples, eval_pairs=eval_pairs, reports=reports)
