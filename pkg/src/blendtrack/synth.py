"""Deterministic synthetic side-view face generator.

Renders stylized 2D profile faces whose features move monotonically with the
driving blend-shape weights: eyelid aperture follows (1 - eyeBlink), mouth
opening follows jawOpen, lip protrusion follows mouthPucker, the tongue region
follows tongueOut, the brow line follows the brow shapes, and the cheek bulge
follows cheekPuff. Left views are exact mirrors of right views rendered with
mirrored weights, so the flip convention used in training holds by
construction.

A clip pairs an 8 fps two-camera frame stream against a 30 fps ground-truth
stream whose clock is offset by a configurable amount; a study is a set of
subjects, each with clips at an indoor and an outdoor location, emitted in the
exact on-disk layout the ingestion pipeline reads.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import blendshapes as bs
from .blendshapes import Side
from .mesh import default_face_mesh, save_mesh
from .pipeline import FrameRecord, GroundTruthRecord, write_frames, write_gt_csv

GT_FPS = 30.0
FRAME_FPS = 8.0
CLOCK_BASE_MS = 10_000           # keeps recorder timestamps positive for offsets within +-10 s

LOCATIONS = ("indoor", "outdoor")

_SIDE = {name[: -len("Left")]: i for i, name in enumerate(bs.LEFT_NAMES)}
_CENTER = {name: i for i, name in enumerate(bs.CENTER_NAMES)}

# Trajectory activity scale per channel (applied to both sides of a pair).
_ACTIVITY = {
    "eyeLookDown": 0.4, "eyeLookIn": 0.35, "eyeLookOut": 0.35, "eyeLookUp": 0.4,
    "eyeSquint": 0.45, "eyeWide": 0.5,
    "mouthSmile": 0.8, "mouthFrown": 0.5, "mouthDimple": 0.3, "mouthStretch": 0.6,
    "mouthPress": 0.3, "mouthLowerDown": 0.35, "mouthUpperUp": 0.35,
    "browDown": 0.6, "browOuterUp": 0.7, "cheekSquint": 0.4, "noseSneer": 0.45,
    "jawForward": 0.4, "jawLeft": 0.6, "jawRight": 0.6, "jawOpen": 0.9,
    "mouthClose": 0.4, "mouthFunnel": 0.5, "mouthPucker": 0.7,
    "mouthLeft": 0.25, "mouthRight": 0.25,
    "mouthRollLower": 0.3, "mouthRollUpper": 0.3,
    "mouthShrugLower": 0.3, "mouthShrugUpper": 0.3,
    "browInnerUp": 0.6, "cheekPuff": 0.7, "tongueOut": 0.7,
}

_SKIN_TONES = (
    (0.84, 0.68, 0.58),
    (0.78, 0.60, 0.48),
    (0.70, 0.52, 0.40),
    (0.58, 0.42, 0.32),
    (0.46, 0.32, 0.24),
    (0.36, 0.25, 0.19),
)


@dataclass(frozen=True)
class SubjectAppearance:
    skin_rgb: tuple[float, float, float]
    face_cx: float
    face_cy: float
    face_rx: float
    face_ry: float
    eye_cx: float
    eye_cy: float
    eye_r: float
    brow_y: float
    mouth_cx: float
    mouth_cy: float
    mouth_r: float
    seed: int

    @classmethod
    def from_seed(cls, seed: int) -> "SubjectAppearance":
        rng = np.random.default_rng([seed, 0xA11CE])
        tone = _SKIN_TONES[int(rng.integers(len(_SKIN_TONES)))]
        tone = tuple(float(np.clip(c + rng.uniform(-0.03, 0.03), 0.12, 0.88)) for c in tone)
        j = lambda lo, hi: float(rng.uniform(lo, hi))
        return cls(
            skin_rgb=tone,
            face_cx=j(0.41, 0.45), face_cy=j(0.51, 0.54),
            face_rx=j(0.31, 0.35), face_ry=j(0.38, 0.42),
            eye_cx=j(0.38, 0.43), eye_cy=j(0.34, 0.38), eye_r=j(0.075, 0.105),
            brow_y=j(0.25, 0.28),
            mouth_cx=j(0.18, 0.22), mouth_cy=j(0.65, 0.69), mouth_r=j(0.085, 0.115),
            seed=seed,
        )


@dataclass(frozen=True)
class SceneStyle:
    location: str
    bg_top: tuple[float, float, float]
    bg_bottom: tuple[float, float, float]
    illumination_gain: float
    flicker_amp: float

    def __post_init__(self):
        if self.illumination_gain <= 0.0:
            raise ValueError("illumination gain must be positive")

    @classmethod
    def for_location(cls, location: str, seed: int) -> "SceneStyle":
        rng = np.random.default_rng([seed, 0x5CE9E])
        if location == "indoor":
            return cls(
                location=location,
                bg_top=(0.32 + rng.uniform(-0.05, 0.05), 0.30, 0.28),
                bg_bottom=(0.22, 0.20 + rng.uniform(-0.04, 0.04), 0.18),
                illumination_gain=float(rng.uniform(0.85, 1.0)),
                flicker_amp=0.02,
            )
        if location == "outdoor":
            return cls(
                location=location,
                bg_top=(0.48, 0.62, 0.80 + rng.uniform(-0.05, 0.05)),
                bg_bottom=(0.35 + rng.uniform(-0.05, 0.05), 0.48, 0.30),
                illumination_gain=float(rng.uniform(1.05, 1.2)),
                flicker_amp=0.04,
            )
        raise ValueError(f"unknown location {location!r}")


def _blend(img, cov, color):
    img *= (1.0 - cov)[:, :, None]
    img += cov[:, :, None] * np.asarray(color)[None, None, :]


def _ellipse(uu, vv, cu, cv, ru, rv):
    """Soft coverage of an axis-aligned ellipse; edge band in normalized units."""
    d = ((uu - cu) / max(ru, 1e-6)) ** 2 + ((vv - cv) / max(rv, 1e-6)) ** 2
    return np.clip((1.0 - d) / 0.25, 0.0, 1.0)


def _render_canonical(appearance: SubjectAppearance, style: SceneStyle,
                      side_w: np.ndarray, center_w: np.ndarray,
                      rng: np.random.Generator, height: int, width: int) -> np.ndarray:
    a = appearance
    s = side_w
    c = center_w
    vv, uu = np.meshgrid((np.arange(height) + 0.5) / height,
                         (np.arange(width) + 0.5) / width, indexing="ij")

    illum = style.illumination_gain * (1.0 + style.flicker_amp * rng.uniform(-1.0, 1.0))
    img = np.empty((height, width, 3))
    top = np.asarray(style.bg_top)
    bottom = np.asarray(style.bg_bottom)
    img[:] = top[None, None, :] * (1.0 - vv)[:, :, None] + bottom[None, None, :] * vv[:, :, None]

    skin = np.asarray(a.skin_rgb)
    cheek_puff = c[_CENTER["cheekPuff"]]
    jaw_open = c[_CENTER["jawOpen"]]
    face_rx = a.face_rx * (1.0 + 0.07 * cheek_puff)
    _blend(img, _ellipse(uu, vv, a.face_cx, a.face_cy, face_rx, a.face_ry), skin)

    # jaw / chin extension drops with jawOpen, advances with jawForward
    jaw_cv = a.face_cy + a.face_ry * 0.80 + 0.055 * jaw_open
    jaw_cu = a.face_cx - 0.02 * c[_CENTER["jawForward"]] \
        + 0.045 * (c[_CENTER["jawRight"]] - c[_CENTER["jawLeft"]])
    _blend(img, _ellipse(uu, vv, jaw_cu, jaw_cv, 0.17, 0.075 + 0.05 * jaw_open), skin * 0.97)

    # cheek bulge
    cheek_cov = _ellipse(uu, vv, a.face_cx + 0.50 * face_rx, a.face_cy + 0.10,
                         0.05 + 0.07 * cheek_puff, 0.045 + 0.055 * cheek_puff)
    _blend(img, cheek_cov, np.clip(skin * 1.12, 0.0, 1.0))

    # brow bar (kept inside the blink-proxy crop at full lift)
    brow_lift = 0.7 * s[_SIDE["browOuterUp"]] + 0.5 * c[_CENTER["browInnerUp"]] - 0.8 * s[_SIDE["browDown"]]
    brow_cv = a.brow_y - 0.04 * brow_lift
    _blend(img, _ellipse(uu, vv, a.eye_cx + 0.01, brow_cv, 0.105, 0.018), skin * 0.38)

    # eye: bright sclera whose aperture closes with eyeBlink; a dark lid/lash
    # band thickens as the eye closes, so region darkness grows with blink
    aperture = np.clip(1.0 - s[_SIDE["eyeBlink"]] + 0.4 * s[_SIDE["eyeWide"]]
                       - 0.3 * s[_SIDE["eyeSquint"]], 0.04, 1.3)
    sclera_rv = a.eye_r * 0.62 * aperture
    _blend(img, _ellipse(uu, vv, a.eye_cx, a.eye_cy, a.eye_r * 1.45, sclera_rv),
           np.clip(np.array([0.93, 0.93, 0.96]) * illum, 0.0, 1.0))
    pupil_du = 0.5 * a.eye_r * (s[_SIDE["eyeLookIn"]] - s[_SIDE["eyeLookOut"]])
    pupil_dv = 0.35 * a.eye_r * (s[_SIDE["eyeLookDown"]] - s[_SIDE["eyeLookUp"]])
    pupil_r = a.eye_r * 0.40 * min(float(aperture), 1.0)
    _blend(img, _ellipse(uu, vv, a.eye_cx + pupil_du, a.eye_cy + pupil_dv, pupil_r, pupil_r),
           (0.09, 0.06, 0.05))
    closure = float(np.clip(1.0 - aperture, 0.0, 1.0))
    _blend(img, _ellipse(uu, vv, a.eye_cx, a.eye_cy, a.eye_r * 1.5,
                         0.010 + 0.034 * closure), skin * 0.40)

    # nose wedge at the profile edge
    nose_cv = a.face_cy - 0.02 - 0.025 * s[_SIDE["noseSneer"]]
    _blend(img, _ellipse(uu, vv, a.face_cx - face_rx * 0.97, nose_cv, 0.045, 0.055), skin * 0.86)

    # mouth
    pucker = c[_CENTER["mouthPucker"]]
    funnel = c[_CENTER["mouthFunnel"]]
    opening = jaw_open * (1.0 - 0.75 * c[_CENTER["mouthClose"]])
    m_cu = (a.mouth_cx
            - 0.05 * pucker - 0.03 * funnel
            + 0.05 * (c[_CENTER["jawRight"]] - c[_CENTER["jawLeft"]])
            + 0.035 * (c[_CENTER["mouthRight"]] - c[_CENTER["mouthLeft"]]))
    m_cv = a.mouth_cy + 0.055 * jaw_open
    m_ru = a.mouth_r * (1.0 + 0.25 * s[_SIDE["mouthStretch"]] + 0.1 * s[_SIDE["mouthSmile"]]
                        - 0.35 * pucker - 0.2 * funnel)
    m_rv = 0.010 + 0.075 * opening

    lip_pad = (0.020 * (1.0 - 0.4 * c[_CENTER["mouthRollLower"]] - 0.4 * c[_CENTER["mouthRollUpper"]])
               + 0.018 * pucker + 0.012 * funnel
               + 0.006 * (c[_CENTER["mouthShrugLower"]] + c[_CENTER["mouthShrugUpper"]])
               + 0.006 * s[_SIDE["mouthUpperUp"]] + 0.006 * s[_SIDE["mouthLowerDown"]])
    lip_color = np.clip(skin * np.array([0.85, 0.55, 0.55]), 0.0, 1.0)
    _blend(img, _ellipse(uu, vv, m_cu, m_cv, m_ru + 0.5 * lip_pad, m_rv + lip_pad), lip_color)
    _blend(img, _ellipse(uu, vv, m_cu, m_cv, m_ru, m_rv), (0.10, 0.04, 0.04))

    # mouth corner mark: rises with smile, falls with frown, deepens with dimple
    corner_dv = -0.035 * s[_SIDE["mouthSmile"]] + 0.035 * s[_SIDE["mouthFrown"]]
    corner_cov = _ellipse(uu, vv, m_cu + m_ru * 0.95 + 0.015 * s[_SIDE["mouthDimple"]],
                          m_cv + corner_dv, 0.020, 0.014 + 0.006 * s[_SIDE["mouthPress"]])
    _blend(img, corner_cov, skin * 0.55)

    # tongue extends out of the mouth toward the profile edge
    tongue = c[_CENTER["tongueOut"]]
    if tongue > 0.0:
        t_cov = _ellipse(uu, vv, m_cu - m_ru * 0.6 - 0.055 * tongue, m_cv + 0.012,
                         0.018 + 0.055 * tongue, 0.020 + 0.022 * tongue)
        _blend(img, t_cov, (0.80, 0.36, 0.40))

    np.clip(img * illum, 0.0, 1.0, out=img)
    return np.round(img * 255.0).astype(np.uint8)


def render_side_view(appearance: SubjectAppearance, style: SceneStyle, weights: np.ndarray,
                     side: Side, rng: np.random.Generator, height: int = 64,
                     width: int = 64) -> np.ndarray:
    """Render one camera view; left views mirror the canonical orientation."""
    w = bs.validate_vector(weights)
    center = w[bs.CENTER_SLICE]
    if side is Side.RIGHT:
        img = _render_canonical(appearance, style, w[bs.RIGHT_SLICE], center, rng, height, width)
        return img
    img = _render_canonical(appearance, style, w[bs.LEFT_SLICE], bs.mirror_center(center),
                            rng, height, width)
    return np.ascontiguousarray(img[:, ::-1, :])


# ---------------------------------------------------------------------------
# Trajectories
# ---------------------------------------------------------------------------

class TrajectorySet:
    """Smooth per-channel weight trajectories with explicit blink pulses."""

    def __init__(self, rng: np.random.Generator, duration_s: float):
        self.duration_ms = duration_s * 1000.0
        # control points every ~1.6 s bound the slope of each channel
        n_cp = max(int(duration_s / 1.6) + 2, 4)
        self.cp_t = np.linspace(0.0, self.duration_ms, n_cp)
        self.cp_v: dict[str, np.ndarray] = {}
        for base, scale in _ACTIVITY.items():
            names = [base + "Left", base + "Right"] if base in _SIDE else [base]
            shared = rng.uniform(0.0, scale, n_cp) * (rng.random(n_cp) < 0.6)
            for name in names:
                own = rng.uniform(0.0, 0.25 * scale, n_cp)
                self.cp_v[name] = np.clip(shared + own, 0.0, 1.0)
        # blinks: shared Gaussian pulses, 100-150 ms wide, gap < 5 s
        times = []
        t = rng.uniform(400.0, 1500.0)
        while t < self.duration_ms:
            times.append(t)
            t += rng.uniform(1500.0, 3200.0)
        self.blink_times = np.array(times)
        self.blink_amps = rng.uniform(0.85, 1.0, len(times))
        self.blink_sigmas = rng.uniform(48.0, 64.0, len(times))

    def eval(self, t_ms: np.ndarray) -> np.ndarray:
        """Weights at the given times: (len(t_ms), 52) in [0, 1]."""
        t = np.asarray(t_ms, dtype=np.float64)
        out = np.zeros((t.size, bs.N_SHAPES))
        for name, cp in self.cp_v.items():
            out[:, bs.INDEX[name]] = np.interp(t, self.cp_t, cp)
        blink = np.zeros(t.size)
        for bt, amp, sigma in zip(self.blink_times, self.blink_amps, self.blink_sigmas):
            blink += amp * np.exp(-0.5 * ((t - bt) / sigma) ** 2)
        blink = np.clip(blink, 0.0, 1.0)
        out[:, bs.INDEX["eyeBlinkLeft"]] = np.clip(out[:, bs.INDEX["eyeBlinkLeft"]] * 0.05 + blink, 0.0, 1.0)
        out[:, bs.INDEX["eyeBlinkRight"]] = np.clip(out[:, bs.INDEX["eyeBlinkRight"]] * 0.05 + blink, 0.0, 1.0)
        return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# Clip and study generation
# ---------------------------------------------------------------------------

@dataclass
class ClipData:
    left_frames: list[FrameRecord]
    right_frames: list[FrameRecord]
    gt_records: list[GroundTruthRecord]
    clock_offset_ms: int


def generate_clip(appearance: SubjectAppearance, style: SceneStyle, duration_s: float,
                  clock_offset_ms: int, rng: np.random.Generator,
                  image_hw: tuple[int, int] = (64, 64),
                  invalid_fraction: float = 0.02) -> ClipData:
    """Render one two-camera clip against an offset 30 fps ground-truth stream.

    Frame timestamps satisfy frame_ts + clock_offset_ms = gt_ts for the same
    instant. Invalid ground-truth rows (face-detection dropouts) keep their
    slot but carry zero weights.
    """
    if duration_s <= 0.0:
        raise ValueError("duration must be positive")
    traj = TrajectorySet(rng, duration_s)
    h, w = image_hw

    n_gt = int(duration_s * GT_FPS)
    gt_true_ms = np.round(np.arange(n_gt) * (1000.0 / GT_FPS)).astype(np.int64)
    gt_weights = traj.eval(gt_true_ms)
    invalid = rng.random(n_gt) < invalid_fraction
    gt_records = []
    for i in range(n_gt):
        weights = np.zeros(bs.N_SHAPES) if invalid[i] else gt_weights[i]
        gt_records.append(GroundTruthRecord(
            timestamp_ms=int(CLOCK_BASE_MS + gt_true_ms[i]),
            weights=weights,
            valid=not invalid[i],
        ))

    n_frames = int(duration_s * FRAME_FPS)
    frame_true_ms = np.round(np.arange(n_frames) * (1000.0 / FRAME_FPS)).astype(np.int64)
    frame_weights = traj.eval(frame_true_ms)
    left_frames, right_frames = [], []
    flicker_seed = int(rng.integers(0, 2**31))
    for j in range(n_frames):
        ts = int(CLOCK_BASE_MS + frame_true_ms[j] - clock_offset_ms)
        w_j = frame_weights[j]
        for side, bucket in ((Side.LEFT, left_frames), (Side.RIGHT, right_frames)):
            frame_rng = np.random.default_rng([flicker_seed, j])
            bucket.append(FrameRecord(
                timestamp_ms=ts,
                image=render_side_view(appearance, style, w_j, side, frame_rng, h, w),
                side=side,
                seq_index=j,
            ))
    return ClipData(left_frames=left_frames, right_frames=right_frames,
                    gt_records=gt_records, clock_offset_ms=clock_offset_ms)


def write_clip(clip_dir, clip: ClipData) -> dict:
    """Write one clip's frames and ground truth; returns manifest-relative entries."""
    clip_dir = Path(clip_dir)
    clip_dir.mkdir(parents=True, exist_ok=True)
    write_frames(clip_dir / "left", clip.left_frames)
    write_frames(clip_dir / "right", clip.right_frames)
    write_gt_csv(clip_dir / "gt.csv", clip.gt_records)
    return {
        "left_frames_dir": str(clip_dir.name) + "/left",
        "right_frames_dir": str(clip_dir.name) + "/right",
        "gt_csv": str(clip_dir.name) + "/gt.csv",
    }


def generate_study(out_dir, n_subjects: int, clips_per_location: int, seed: int,
                   duration_s: float = 20.0, image_hw: tuple[int, int] = (64, 64),
                   invalid_fraction: float = 0.02, offset_range_ms: int = 1500) -> Path:
    """Generate a complete study on disk and return the manifest path.

    Every subject records `clips_per_location` clips at each location, each
    with its own scene style and clock offset. The bundle also includes the
    default evaluation mesh (face.btmesh).
    """
    if n_subjects < 2:
        raise ValueError("a study needs at least 2 subjects")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    subjects = []
    for si in range(n_subjects):
        subject_id = f"s{si}"
        appearance = SubjectAppearance.from_seed(int(np.random.default_rng([seed, si]).integers(2**31)))
        clip_entries = []
        for li, location in enumerate(LOCATIONS):
            for ci in range(clips_per_location):
                clip_rng = np.random.default_rng([seed, si, li, ci])
                style = SceneStyle.for_location(location, int(clip_rng.integers(2**31)))
                offset = int(clip_rng.integers(-offset_range_ms, offset_range_ms + 1))
                clip = generate_clip(appearance, style, duration_s, offset, clip_rng,
                                     image_hw, invalid_fraction)
                rel = write_clip(out_dir / subject_id / f"{location}_{ci}", clip)
                clip_entries.append({
                    "location": location,
                    "clip_id": ci,
                    "left_frames_dir": f"{subject_id}/{rel['left_frames_dir']}",
                    "right_frames_dir": f"{subject_id}/{rel['right_frames_dir']}",
                    "gt_csv": f"{subject_id}/{rel['gt_csv']}",
                })
        subjects.append({"subject_id": subject_id, "clips": clip_entries})

    manifest = {"schema": "btrk/1", "seed": seed, "subjects": subjects}
    manifest_path = out_dir / "manifest.json"
    with open(manifest_path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    save_mesh(default_face_mesh(), out_dir / "face.btmesh")
    return manifest_path
