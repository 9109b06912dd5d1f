"""Command-line entry points tying the pipeline together.

Every subcommand writes a machine-readable JSON report (schema "btrk/1") to
its --out target and a short human summary to stdout. Exit codes: 0 success,
1 data error (with a JSON error report), 2 usage error. The BLENDTRACK_SEED
environment variable overrides config seeds.
"""

from __future__ import annotations

import argparse
import json
import os
import platform
import sys
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import net
from .mesh import canthal_scale, default_face_mesh, load_mesh
from .pipeline import SyncConfig, ingest_dataset
from .schemes import (
    RunManifest,
    TrainConfig,
    audit_manifest,
    calibrate,
    calibration_curve,
    eval_partition_pairs,
    evaluate_model,
    make_split,
    train_user_independent,
)
from .synth import generate_study

SCHEMA = "btrk/1"
ENV_SEED = "BLENDTRACK_SEED"
DEFAULT_BENCH_PAIRS = 400
BENCH_WARMUP_PAIRS = 10


@dataclass(frozen=True)
class BenchReport:
    platform: str
    mean_ms_per_pair: float
    expected_fps: float
    pairs_measured: int

    def to_json_dict(self) -> dict:
        return {
            "platform": self.platform,
            "mean_ms_per_pair": self.mean_ms_per_pair,
            "expected_fps": self.expected_fps,
            "pairs_measured": self.pairs_measured,
        }


def bench_forward(model: net.RegressorModel, n_pairs: int = DEFAULT_BENCH_PAIRS,
                  warmup_pairs: int = BENCH_WARMUP_PAIRS, seed: int = 0) -> BenchReport:
    """Time n_pairs single-pair forward passes (one left+right batch each).

    Warm-up pairs are excluded from the statistics; expected_fps is defined as
    1000 / mean_ms_per_pair.
    """
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    rng = np.random.default_rng(seed)
    pair = rng.random((2, model.input_h, model.input_w, 3))
    for _ in range(warmup_pairs):
        model.forward(pair)
    start = time.perf_counter()
    for _ in range(n_pairs):
        model.forward(pair)
    elapsed_ms = (time.perf_counter() - start) * 1000.0
    mean_ms = elapsed_ms / n_pairs
    return BenchReport(
        platform=f"{platform.platform()} / {platform.processor() or platform.machine()}",
        mean_ms_per_pair=mean_ms,
        expected_fps=1000.0 / mean_ms,
        pairs_measured=n_pairs,
    )


class DataError(Exception):
    """User-facing data problem mapped to exit code 1."""


def _write_json(path, doc: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump({"schema": SCHEMA, **doc}, f, indent=2, sort_keys=True)
        f.write("\n")


def _load_config(path: str | None) -> TrainConfig:
    if path is None:
        config = TrainConfig()
    else:
        try:
            with open(path, "r", encoding="utf-8") as f:
                config = TrainConfig.from_json_dict(json.load(f))
        except (OSError, ValueError, TypeError) as exc:
            raise DataError(f"bad config {path}: {exc}") from exc
    env_seed = os.environ.get(ENV_SEED)
    if env_seed is not None:
        config = replace(config, seed=int(env_seed))
    return config


def _ingest(data_dir: str, tolerance_ms: int = 17, search_range_ms: int = 5000):
    manifest = Path(data_dir) / "manifest.json"
    if not manifest.exists():
        raise DataError(f"no manifest.json under {data_dir}")
    try:
        return ingest_dataset(manifest, SyncConfig(tolerance_ms=tolerance_ms,
                                                   search_range_ms=search_range_ms))
    except (OSError, ValueError) as exc:
        raise DataError(f"failed to ingest {data_dir}: {exc}") from exc


def _load_model(path: str) -> net.RegressorModel:
    try:
        return net.load_weights(path)
    except (OSError, net.WeightFileError) as exc:
        raise DataError(f"failed to load model {path}: {exc}") from exc


def _load_eval_mesh(path: str | None):
    if path is None:
        return default_face_mesh()
    try:
        return load_mesh(path)
    except (OSError, ValueError) as exc:
        raise DataError(f"failed to load mesh {path}: {exc}") from exc


def _resolve_base_model(base: str) -> net.RegressorModel:
    path = Path(base)
    if path.is_dir():
        path = path / "model.btrk"
    return _load_model(path)


def _split_for(dataset, args, config) -> "SplitPlan":
    calib = None
    if args.calib_location is not None or args.calib_clip is not None:
        if args.calib_location is None or args.calib_clip is None:
            raise DataError("--calib-location and --calib-clip must be given together")
        calib = (args.calib_location, args.calib_clip)
    try:
        return make_split(dataset, args.test_subject, calib, seed=config.seed)
    except ValueError as exc:
        raise DataError(str(exc)) from exc


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> dict:
    out = Path(args.out)
    manifest = generate_study(
        out, n_subjects=args.subjects, clips_per_location=args.clips, seed=args.seed,
        duration_s=args.duration, image_hw=(args.size, args.size),
        invalid_fraction=args.invalid_fraction, offset_range_ms=args.offset_range_ms,
    )
    doc = {
        "manifest": str(manifest),
        "subjects": args.subjects,
        "clips_per_location": args.clips,
        "duration_s": args.duration,
        "seed": args.seed,
    }
    _write_json(out / "synth_report.json", doc)
    print(f"synth: wrote {args.subjects} subjects x {2 * args.clips} clips under {out}")
    return doc


def cmd_sync(args) -> dict:
    dataset = _ingest(args.data, args.tolerance_ms, args.search_range_ms)
    clips = [r.to_json_dict() for r in dataset.reports]
    doc = {"clips": clips}
    _write_json(args.out, doc)
    for r in dataset.reports:
        print(f"sync {r.subject_id}/{r.location}/{r.clip_id}: offset {r.offset_ms} ms, "
              f"matched {r.matched}, dropped {r.dropped_unmatched + r.dropped_first_frames + r.dropped_invalid}")
    return doc


def cmd_train(args) -> dict:
    config = _load_config(args.config)
    dataset = _ingest(args.data)
    split = _split_for(dataset, args, config)
    model, manifest = train_user_independent(dataset, config, split)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    net.save_weights(model, out / "model.btrk")
    _write_json(out / "run_manifest.json", manifest.to_json_dict())
    print(f"train: {manifest.kind} on {len(manifest.training_subjects)} subjects, "
          f"epoch losses {['%.3f' % l for l in manifest.epoch_losses]}")
    print(f"train: model -> {out / 'model.btrk'}")
    return manifest.to_json_dict()


def cmd_calibrate(args) -> dict:
    config = _load_config(args.config)
    dataset = _ingest(args.data)
    split = _split_for(dataset, args, config)
    base = _resolve_base_model(args.base)
    model, manifest = calibrate(base, dataset, config, split)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    net.save_weights(model, out / "model.btrk")
    _write_json(out / "run_manifest.json", manifest.to_json_dict())
    print(f"calibrate: clip ({split.calibration_location}, {split.calibration_clip}), "
          f"{manifest.calibration_clip_samples} clip samples + {manifest.calibration_pool_samples} pool samples")
    return manifest.to_json_dict()


def cmd_curve(args) -> dict:
    config = _load_config(args.config)
    dataset = _ingest(args.data)
    split = _split_for(dataset, args, config)
    base = _resolve_base_model(args.base)
    mesh = _load_eval_mesh(args.mesh)
    scale = canthal_scale(mesh, args.icd_mm)
    fractions = [float(v) for v in args.fractions.split(",")]
    try:
        points = calibration_curve(base, dataset, config, split, fractions, mesh, scale)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    doc = {"icd_mm": args.icd_mm, "points": points}
    _write_json(args.out, doc)
    for p in points:
        print(f"curve: fraction {p['fraction']:.2f} ({p['seconds']:.1f} s) -> "
              f"{p['overall_mean_mm']:.3f} mm")
    return doc


def cmd_eval(args) -> dict:
    dataset = _ingest(args.data)
    config = _load_config(args.config)
    model = _load_model(args.model)
    mesh = _load_eval_mesh(args.mesh)
    scale = canthal_scale(mesh, args.icd_mm)
    if args.partition == "all":
        pairs = [p for p in dataset.eval_pairs if p.subject_id == args.test_subject]
    else:
        split = _split_for(dataset, args, config)
        pairs = eval_partition_pairs(dataset, split)[args.partition]
    if not pairs:
        raise DataError(f"no evaluation pairs for subject {args.test_subject!r} "
                        f"partition {args.partition!r}")
    error_report, corr_report = evaluate_model(model, pairs, mesh, scale)
    doc = {
        "test_subject": args.test_subject,
        "partition": args.partition,
        "icd_mm": args.icd_mm,
        "vertex_error": error_report.to_json_dict(),
        "correlation": corr_report.to_json_dict(),
    }
    _write_json(args.out, doc)
    print(f"eval: {len(pairs)} pairs, overall {error_report.overall_mean_mm:.3f} mm "
          f"(eye {error_report.eye_mean_mm:.3f}, mouth {error_report.mouth_mean_mm:.3f}), "
          f"mean R {corr_report.overall_mean:.3f}")
    return doc


def cmd_bench(args) -> dict:
    model = _load_model(args.model) if args.model else net.RegressorModel(args.size, args.size).initialize(0)
    report = bench_forward(model, n_pairs=args.pairs)
    doc = report.to_json_dict()
    _write_json(args.out, doc)
    print(f"bench: {report.mean_ms_per_pair:.2f} ms/pair over {report.pairs_measured} pairs "
          f"({report.expected_fps:.1f} fps expected) on {report.platform}")
    return doc


def cmd_audit(args) -> dict:
    try:
        with open(args.manifest, "r", encoding="utf-8") as f:
            manifest = RunManifest.from_json_dict(json.load(f))
    except (OSError, ValueError, TypeError) as exc:
        raise DataError(f"bad run manifest {args.manifest}: {exc}") from exc
    problems = audit_manifest(manifest)
    doc = {"manifest": str(args.manifest), "violations": problems}
    if args.out:
        _write_json(args.out, doc)
    if problems:
        for p in problems:
            print(f"audit: VIOLATION: {p}")
        raise DataError(f"{len(problems)} leakage violation(s)")
    print("audit: clean")
    return doc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="blendtrack", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic study")
    p.add_argument("--subjects", type=int, default=4)
    p.add_argument("--clips", type=int, default=2, help="clips per location per subject")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--duration", type=float, default=20.0, help="clip length in seconds")
    p.add_argument("--size", type=int, default=64, help="square image size in pixels")
    p.add_argument("--invalid-fraction", type=float, default=0.02)
    p.add_argument("--offset-range-ms", type=int, default=1500)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("sync", help="estimate per-clip clock offsets")
    p.add_argument("--data", required=True)
    p.add_argument("--tolerance-ms", type=int, default=17)
    p.add_argument("--search-range-ms", type=int, default=5000)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_sync)

    def add_split_args(p):
        p.add_argument("--test-subject", required=True)
        p.add_argument("--calib-location", default=None)
        p.add_argument("--calib-clip", type=int, default=None)

    p = sub.add_parser("train", help="train a user-independent model")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None)
    add_split_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("calibrate", help="fine-tune a model for the test subject")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--base", required=True, help="base model file or run directory")
    add_split_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_calibrate)

    p = sub.add_parser("curve", help="calibration-amount sweep")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--base", required=True)
    add_split_args(p)
    p.add_argument("--fractions", default="0.05,0.1,0.25,0.5,1.0")
    p.add_argument("--mesh", default=None)
    p.add_argument("--icd-mm", type=float, default=32.0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_curve)

    p = sub.add_parser("eval", help="evaluate a model on a test subject")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None)
    add_split_args(p)
    p.add_argument("--partition", choices=("all", "same_location", "another_location"), default="all")
    p.add_argument("--mesh", default=None)
    p.add_argument("--icd-mm", type=float, default=32.0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("bench", help="forward-pass latency benchmark")
    p.add_argument("--model", default=None)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--pairs", type=int, default=DEFAULT_BENCH_PAIRS)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("audit", help="check a run manifest for leakage")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_audit)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.fn(args)
    except DataError as exc:
        report = {"error": {"category": "data", "message": str(exc)}}
        out = getattr(args, "out", None)
        if out is not None:
            target = Path(out)
            if target.suffix != ".json":
                target = target / "error.json"
            try:
                _write_json(target, report)
            except OSError:
                pass
        print(json.dumps({"schema": SCHEMA, **report}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
