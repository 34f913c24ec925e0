"""Command-line surface: phantom / preprocess / train / cv / report.

One JSON config document per run; every default is materialized and echoed
to resolved_config.json so artifacts are self-describing. Exit codes:
0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from .evaluate import (
    cross_validate,
    histogram_counts,
    kfold_split,
    record_for,
    render_report,
    summarize_report,
)
from .net import UNetConfig
from .numerics import NumericError
from .phantom import (
    OBSERVER_STRENGTH,
    PRESET_SIZES,
    PhantomSpec,
    Sample,
    cross_template,
    generate_dataset,
    preset_a,
    preset_b,
    preset_gated,
    simulate_observer,
)
from .preproc import DETECT_THRESHOLD, FovGeometry, preprocess_pipeline
from .storage import (
    load_dataset,
    load_sample,
    read_meta,
    save_dataset,
    save_weights,
    read_metrics_csv,
    write_hist_csv,
    write_metrics_csv,
    write_preproc_log_csv,
    write_train_log_csv,
)
from .train import TrainConfig, train_fold

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

_PRESETS = {"a": preset_a, "b": preset_b, "gated": preset_gated}
_OBSERVER_SEED_OFFSET = 71


@dataclass
class EvalOptions:
    k: int = 5
    observer_strength: float = OBSERVER_STRENGTH
    hist_bins: int = 10
    detect_threshold: float = DETECT_THRESHOLD


@dataclass
class RunConfig:
    seed: int = 0
    preset: str | None = "a"
    n: int | None = None
    spec: PhantomSpec = None
    net: UNetConfig = None
    train: TrainConfig = None
    eval: EvalOptions = None


def _coerce(cls, base, overrides: dict, section: str):
    """Apply a JSON override dict onto a dataclass, list->tuple as needed."""
    valid = {f.name for f in fields(cls)}
    clean = {}
    for key, value in overrides.items():
        if key not in valid:
            raise ValueError(f"unknown {section} option {key!r}")
        clean[key] = tuple(value) if isinstance(value, list) else value
    return replace(base, **clean) if base is not None else cls(**clean)


def load_run_config(path: str | None, seed_override: int | None) -> RunConfig:
    raw = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except OSError as e:
            raise ValueError(f"cannot read config {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise ValueError(f"config {path} is not valid JSON: {e}") from e
        if not isinstance(raw, dict):
            raise ValueError(f"config {path} must hold a JSON object")
    known = {"seed", "phantom", "net", "train", "eval"}
    unknown = set(raw) - known
    if unknown:
        raise ValueError(f"unknown config section(s): {sorted(unknown)}")
    seed = raw.get("seed", 0)
    if seed_override is not None:
        seed = seed_override
    phantom_raw = dict(raw.get("phantom", {}))
    preset = phantom_raw.pop("preset", "a")
    n = phantom_raw.pop("n", None)
    if preset is not None and preset not in _PRESETS:
        raise ValueError(f"unknown preset {preset!r}; choose from {sorted(_PRESETS)}")
    base_spec = _PRESETS[preset]() if preset is not None else PhantomSpec()
    spec = _coerce(PhantomSpec, base_spec, phantom_raw, "phantom")
    net = _coerce(UNetConfig, UNetConfig(), dict(raw.get("net", {})), "net")
    train_raw = dict(raw.get("train", {}))
    train_raw.setdefault("seed", seed)
    train = _coerce(TrainConfig, TrainConfig(), train_raw, "train")
    ev = _coerce(EvalOptions, EvalOptions(), dict(raw.get("eval", {})), "eval")
    return RunConfig(seed=seed, preset=preset, n=n, spec=spec, net=net,
                     train=train, eval=ev)


def write_resolved_config(cfg: RunConfig, out_dir: Path) -> None:
    doc = {
        "seed": cfg.seed,
        "phantom": {"preset": cfg.preset, "n": cfg.n,
                    **dataclasses.asdict(cfg.spec)},
        "net": dataclasses.asdict(cfg.net),
        "train": dataclasses.asdict(cfg.train),
        "eval": dataclasses.asdict(cfg.eval),
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "resolved_config.json").write_text(
        json.dumps(doc, indent=2, sort_keys=True) + "\n"
    )


def _dataset_size(cfg: RunConfig) -> int:
    if cfg.n is not None:
        return cfg.n
    if cfg.preset in PRESET_SIZES:
        return PRESET_SIZES[cfg.preset]
    if cfg.preset == "gated":
        return 100
    raise ValueError("dataset size: set phantom.n or use a preset with a default size")


def _geometry_for(sample: Sample, cfg: RunConfig) -> FovGeometry | None:
    if sample.probe == "curved":
        if sample.apex is None:
            raise ValueError(f"sample {sample.id}: curved probe but no apex in meta")
        return FovGeometry.cone(sample.apex, cfg.spec.half_angle_deg,
                                cfg.spec.rmin, cfg.spec.rmax)
    return None


def cmd_phantom(cfg: RunConfig, out_dir: Path) -> int:
    n = _dataset_size(cfg)
    samples = generate_dataset(n, cfg.spec, cfg.seed)
    save_dataset(out_dir, samples)
    write_resolved_config(cfg, out_dir)
    print(f"wrote {len(samples)} samples to {out_dir}")
    return EXIT_OK


def cmd_preprocess(cfg: RunConfig, in_dir: Path, out_dir: Path) -> int:
    template = cross_template(cfg.spec.cross_size, cfg.spec.cross_arm)
    half = cfg.spec.cross_size // 2
    cleaned, rows, failures = [], [], 0
    for row in read_meta(in_dir):
        try:
            s = load_sample(in_dir, row)
            res = preprocess_pipeline(s, _geometry_for(s, cfg), template,
                                      cfg.eval.detect_threshold)
        except ValueError as e:
            print(f"{row[0]}: {e}", file=sys.stderr)
            failures += 1
            continue
        (pt, pb), (pl, pr) = res.pad
        inner = res.image[pt : res.image.shape[0] - pb, pl : res.image.shape[1] - pr]
        restored = np.zeros_like(s.image)
        restored[res.crop[0] : res.crop[1], res.crop[2] : res.crop[3]] = inner
        foot = np.zeros(s.image.shape, dtype=bool)
        for r, c in res.detections:
            foot[max(0, r - half) : r + half + 1, max(0, c - half) : c + half + 1] = True
        diff = np.abs(restored[foot] - s.image[foot]) if foot.any() else np.zeros(1)
        cleaned.append(Sample(image=res.image, mask=res.mask, probe=s.probe,
                              apex=s.apex, cross_positions=[], id=s.id))
        rows.append({
            "id": s.id, "n_detections": len(res.detections),
            "detections": ";".join(f"{r}:{c}" for r, c in res.detections),
            "crop_r0": res.crop[0], "crop_r1": res.crop[1],
            "crop_c0": res.crop[2], "crop_c1": res.crop[3],
            "pad_top": pt, "pad_bottom": pb, "pad_left": pl, "pad_right": pr,
            "residual_mean": float(diff.mean()), "residual_max": float(diff.max()),
        })
    save_dataset(out_dir, cleaned)
    write_preproc_log_csv(out_dir / "preproc_log.csv", rows)
    write_resolved_config(cfg, out_dir)
    print(f"preprocessed {len(cleaned)} samples ({failures} failed) to {out_dir}")
    return EXIT_DATA if failures else EXIT_OK


def _train_one_fold(samples, cfg: RunConfig, unet: UNetConfig, fold: int):
    ids = sorted(s.id for s in samples)
    split = kfold_split(ids, k=cfg.eval.k, seed=cfg.train.seed)
    if not 0 <= fold < cfg.eval.k:
        raise IndexError(f"fold {fold} outside [0, {cfg.eval.k})")
    held = set(split.folds[fold])
    train_samples = [s for s in samples if s.id not in held]
    fold_config = replace(cfg.train, seed=cfg.train.seed + fold)
    return train_fold(train_samples, fold_config, unet)


def cmd_train(cfg: RunConfig, in_dir: Path, out_dir: Path, coordconv: bool,
              fold: int) -> int:
    samples = load_dataset(in_dir)
    unet = replace(cfg.net, coord_mode="cartesian", in_channels=None) if coordconv else cfg.net
    model, log = _train_one_fold(samples, cfg, unet, fold)
    out_dir.mkdir(parents=True, exist_ok=True)
    suffix = "coordconv" if coordconv else "baseline"
    save_weights(out_dir / f"weights_{suffix}_fold{fold}.efsg", model.params)
    write_train_log_csv(out_dir / f"train_log_{suffix}_fold{fold}.csv", log)
    write_resolved_config(cfg, out_dir)
    print(f"trained fold {fold} ({suffix}), final loss "
          f"{log.entries[-1].mean_loss:.4f}")
    return EXIT_OK


def _interobs_pairs(samples, cfg: RunConfig):
    return [
        (s.mask, simulate_observer(s.mask, cfg.eval.observer_strength,
                                   cfg.seed + _OBSERVER_SEED_OFFSET + i))
        for i, s in enumerate(samples)
    ]


def cmd_cv(cfg: RunConfig, in_dir: Path, out_dir: Path) -> int:
    samples = load_dataset(in_dir)
    base_net = replace(cfg.net, coord_mode="none", in_channels=None)
    coord_net = replace(cfg.net, coord_mode="cartesian", in_channels=None)
    base_records = cross_validate(samples, cfg.train, base_net, k=cfg.eval.k)
    coord_records = cross_validate(samples, cfg.train, coord_net, k=cfg.eval.k)
    pairs = _interobs_pairs(samples, cfg)
    inter_records = [
        record_for(s, obs, "interobs", -1)
        for s, (_, obs) in zip(samples, pairs)
    ]
    inter_records = sorted(inter_records, key=lambda r: r.id)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(out_dir / "metrics.csv", base_records + coord_records)
    write_metrics_csv(out_dir / "interobs.csv", inter_records)
    report = summarize_report(base_records, coord_records, pairs)
    (out_dir / "report.txt").write_text(report)
    for name, records in (("baseline", base_records), ("coordconv", coord_records)):
        counts, edges = histogram_counts([r.dsc for r in records],
                                         bins=cfg.eval.hist_bins)
        write_hist_csv(out_dir / f"hist_{name}.csv", counts, edges)
    write_resolved_config(cfg, out_dir)
    print(report, end="")
    return EXIT_OK


def cmd_report(cfg: RunConfig, paths: list[str], out_dir: Path) -> int:
    records = []
    for p in paths:
        records.extend(read_metrics_csv(p))
    base = [r for r in records if r.variant == "baseline"]
    coord = [r for r in records if r.variant == "coordconv"]
    inter = [r.dsc for r in records if r.variant == "interobs"]
    report = render_report(base, coord, inter)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.txt").write_text(report)
    for name, recs in (("baseline", base), ("coordconv", coord)):
        counts, edges = histogram_counts([r.dsc for r in recs],
                                         bins=cfg.eval.hist_bins)
        write_hist_csv(out_dir / f"hist_{name}.csv", counts, edges)
    print(report, end="")
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems exit 1, not argparse's 2
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> _Parser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="override the global seed")
    common.add_argument("--out", default="out", help="output directory")
    parser = _Parser(prog="effseg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("phantom", parents=[common],
                   help="generate a synthetic dataset")
    p = sub.add_parser("preprocess", parents=[common],
                       help="mask FOV and remove annotation crosses")
    p.add_argument("dataset", help="input dataset directory")
    p = sub.add_parser("train", parents=[common], help="train one CV fold")
    p.add_argument("dataset")
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--coordconv", action="store_true")
    p = sub.add_parser("cv", parents=[common],
                       help="full cross-validation, both variants")
    p.add_argument("dataset")
    p = sub.add_parser("report", parents=[common],
                       help="re-render reports from metrics.csv files")
    p.add_argument("metrics", nargs="+")
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        cfg = load_run_config(args.config, args.seed)
        out_dir = Path(args.out)
        if args.command == "phantom":
            return cmd_phantom(cfg, out_dir)
        if args.command == "preprocess":
            return cmd_preprocess(cfg, Path(args.dataset), out_dir)
        if args.command == "train":
            return cmd_train(cfg, Path(args.dataset), out_dir, args.coordconv, args.fold)
        if args.command == "cv":
            return cmd_cv(cfg, Path(args.dataset), out_dir)
        if args.command == "report":
            return cmd_report(cfg, args.metrics, out_dir)
        raise AssertionError(f"unhandled command {args.command}")
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except IndexError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
