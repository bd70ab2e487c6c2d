"""Batch command-line front-end wiring the modules into experiments.

Subcommands: synth, preprocess, train, ablate, eval, explain.  Every
writing command drops a resolved run_config.json next to its outputs so a
run can be audited and replayed; with a fixed config and seed the primary
outputs are byte-identical across reruns.

Exit codes: 0 success, 2 config or schema problems, 3 data problems
(missing or malformed inputs), 4 runtime failures.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, dataclass, fields as dc_fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import collab as co
from . import data as vdata
from . import geometry as geo
from . import interpret as vi
from . import model as vmodel

__all__ = ["ConfigError", "RunConfig", "load_run_config", "main",
           "EXIT_OK", "EXIT_CONFIG", "EXIT_DATA", "EXIT_RUNTIME"]

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_RUNTIME = 4

TOP_KEYS = {"seed", "out", "n_points", "branch", "cohort", "cnn", "gnn",
            "train"}
TUPLE_FIELDS = {"dims", "conv_widths", "fc_widths", "radii", "node_widths"}
FUSIONS = {"average": "average", "cnn": "cnn_only", "gnn": "gnn_only"}
BRANCH_FUSION = {"collab": "average", "cnn": "cnn_only", "gnn": "gnn_only"}

DATA_ERRORS = (FileNotFoundError, NotADirectoryError, IsADirectoryError,
               PermissionError, vdata.VolumeIOError, vmodel.CheckpointError,
               geo.EmptyMaskError, geo.DisconnectedMaskError)


class ConfigError(ValueError):
    """Run configuration missing, malformed, or schema-invalid."""


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------

@dataclass
class RunConfig:
    seed: int
    out: Optional[Path]
    n_points: int
    branch: str
    cohort: Optional[vdata.CohortSpec]
    cnn: vmodel.CnnConfig
    gnn: vmodel.GnnConfig
    train: co.TrainConfig

    def require_out(self) -> Path:
        if self.out is None:
            raise ConfigError("an output directory is required "
                              "(--out or the config's \"out\")")
        return self.out

    def require_cohort(self) -> vdata.CohortSpec:
        if self.cohort is None:
            raise ConfigError("the config needs a \"cohort\" section")
        return self.cohort

    def resolved(self) -> dict:
        doc = {
            "seed": self.seed,
            "out": None if self.out is None else str(self.out),
            "n_points": self.n_points,
            "branch": self.branch,
            "cnn": _jsonable(self.cnn),
            "gnn": _jsonable(self.gnn),
            "train": _jsonable(self.train),
        }
        if self.cohort is not None:
            doc["cohort"] = _jsonable(self.cohort)
        return doc


def _jsonable(cfg) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v
            for k, v in asdict(cfg).items()}


def _section(raw: dict, name: str, cls, defaults: dict = None):
    block = raw.get(name) or {}
    if not isinstance(block, dict):
        raise ConfigError(f"section {name!r} must be an object")
    block = dict(block)
    allowed = {f.name for f in dc_fields(cls)}
    unknown = sorted(set(block) - allowed)
    if unknown:
        raise ConfigError(f"unknown {name} keys: {unknown}")
    for key in TUPLE_FIELDS & set(block):
        if not isinstance(block[key], list):
            raise ConfigError(f"{name}.{key} must be an array")
        block[key] = tuple(block[key])
    for key, value in (defaults or {}).items():
        block.setdefault(key, value)
    try:
        return cls(**block)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {name} config: {exc}") from exc


def load_run_config(path, seed: Optional[int] = None, out=None,
                    points: Optional[int] = None) -> RunConfig:
    """Parse and schema-check a run config, applying flag overrides."""
    if path is None:
        raise ConfigError("--config is required for this command")
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    unknown = sorted(set(raw) - TOP_KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")

    run_seed = seed if seed is not None else raw.get("seed", 0)
    if not isinstance(run_seed, int) or run_seed < 0:
        raise ConfigError(f"seed must be a non-negative integer, "
                          f"got {run_seed!r}")
    n_points = points if points is not None else raw.get("n_points", 512)
    if not isinstance(n_points, int) or n_points < 16:
        raise ConfigError(f"n_points must be an integer >= 16, "
                          f"got {n_points!r}")
    branch = raw.get("branch", "collab")
    if branch not in BRANCH_FUSION:
        raise ConfigError(f"branch must be one of "
                          f"{sorted(BRANCH_FUSION)}, got {branch!r}")
    out_value = out if out is not None else raw.get("out")

    cohort = None
    if "cohort" in raw:
        cohort = _section(raw, "cohort", vdata.CohortSpec,
                          defaults={"seed": run_seed})
    return RunConfig(
        seed=run_seed,
        out=None if out_value is None else Path(out_value),
        n_points=n_points,
        branch=branch,
        cohort=cohort,
        cnn=_section(raw, "cnn", vmodel.CnnConfig),
        gnn=_section(raw, "gnn", vmodel.GnnConfig),
        train=_section(raw, "train", co.TrainConfig,
                       defaults={"seed": run_seed}),
    )


def _write_json(path: Path, document) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(document, indent=2, sort_keys=True) + "\n")
    return path


def _snapshot(cfg: RunConfig, out: Path) -> None:
    _write_json(out / "run_config.json", cfg.resolved())


def _emit(document) -> None:
    print(json.dumps(document, sort_keys=True))


# ---------------------------------------------------------------------------
# Data preparation shared by train/ablate
# ---------------------------------------------------------------------------

def _split_fit_val(samples, seed):
    ids = [s.sample_id for s in samples]
    labels = [s.label for s in samples]
    fit_ids, val_ids = vdata.split_dataset(ids, labels, stratify=True,
                                           seed=seed)
    by_id = {s.sample_id: s for s in samples}
    return [by_id[i] for i in fit_ids], [by_id[i] for i in val_ids]


def _sample_cloud(sample, n_points, seed, index):
    mesh = geo.marching_cubes(sample.mask)
    rng = np.random.default_rng([seed, index])
    raw = geo.sample_point_cloud(mesh, n_points, rng)
    transform = geo.cloud_normalization(raw)
    return mesh, transform.apply(raw), transform


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = load_run_config(args.config, args.seed, args.out, args.points)
    spec = cfg.require_cohort()
    out = cfg.require_out()
    samples = vdata.generate_cohort(spec)
    manifest = vdata.save_cohort(samples, out)
    _snapshot(cfg, out)
    _emit({"command": "synth", "samples": len(samples),
           "manifest": str(manifest)})
    return EXIT_OK


def cmd_preprocess(args) -> int:
    if args.config is not None:
        cfg = load_run_config(args.config, args.seed, args.out, args.points)
        crop_size = cfg.cnn.crop_size
    else:
        cfg = None
        crop_size = 32
    seed = args.seed if args.seed is not None else (cfg.seed if cfg else 0)
    n_points = args.points if args.points is not None \
        else (cfg.n_points if cfg else 512)
    out = Path(args.out) if args.out else (cfg.require_out() if cfg else None)
    if out is None:
        raise ConfigError("an output directory is required "
                          "(--out or the config's \"out\")")

    samples = vdata.load_cohort(args.cohort)
    out.mkdir(parents=True, exist_ok=True)
    processed, skipped = [], []
    for i, sample in enumerate(samples):
        try:
            mesh, cloud, _ = _sample_cloud(sample, n_points, seed, i)
            crop = vdata.extract_crop(sample, crop_size)
        except (geo.EmptyMaskError, geo.DisconnectedMaskError) as exc:
            skipped.append({"id": sample.sample_id, "reason": str(exc)})
            print(f"skipping {sample.sample_id}: {exc}", file=sys.stderr)
            continue
        geo.write_mesh_off(mesh, out / f"{sample.sample_id}.off")
        geo.write_cloud_csv(cloud, out / f"{sample.sample_id}.csv")
        np.save(out / f"{sample.sample_id}.crop.npy", crop)
        processed.append({
            "id": sample.sample_id,
            "label": int(sample.label),
            "dice": vdata.dice_score(sample.mask, sample.mask),
            "vertices": int(len(mesh.vertices)),
        })
    summary = {"n_points": n_points, "crop_size": crop_size,
               "samples": processed, "skipped": skipped,
               "skip_count": len(skipped)}
    _write_json(out / "preprocess.json", summary)
    if cfg is not None:
        _snapshot(cfg, out)
    _emit({"command": "preprocess", "processed": len(processed),
           "skipped": len(skipped)})
    return EXIT_OK


def _prepare_fit_val(cfg: RunConfig, samples):
    fit_samples, val_samples = _split_fit_val(samples, cfg.seed)
    fit_samples = vdata.balance_minority(fit_samples)
    fit = co.prepare_samples(fit_samples, cfg.cnn, cfg.gnn, cfg.n_points,
                             seed=cfg.seed)
    val = co.prepare_samples(val_samples, cfg.cnn, cfg.gnn, cfg.n_points,
                             seed=cfg.seed + 1)
    return fit, val


def cmd_train(args) -> int:
    cfg = load_run_config(args.config, args.seed, args.out, args.points)
    out = cfg.require_out()
    samples = vdata.generate_cohort(cfg.require_cohort())
    fit, val = _prepare_fit_val(cfg, samples)
    state, history = co.train(fit, val, cfg.cnn, cfg.gnn, cfg.train,
                              branch=cfg.branch)

    out.mkdir(parents=True, exist_ok=True)
    checkpoint = vmodel.save_state(state, out / "checkpoint.json")
    lines = [json.dumps(record, sort_keys=True) for record in history]
    (out / "history.jsonl").write_text("\n".join(lines) + "\n")
    report = co.evaluate(state, val, BRANCH_FUSION[cfg.branch])
    _write_json(out / "report.json", co.report_to_dict(report))
    _snapshot(cfg, out)
    _emit({"command": "train", "epochs": len(history),
           "checkpoint": str(checkpoint),
           "val_accuracy": round(report.accuracy, 1)})
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = load_run_config(args.config, args.seed, args.out, args.points)
    out = cfg.require_out()
    samples = vdata.generate_cohort(cfg.require_cohort())
    ids = [s.sample_id for s in samples]
    labels = [s.label for s in samples]
    train_ids, test_ids = vdata.split_dataset(ids, labels, stratify=True,
                                              seed=cfg.seed)
    by_id = {s.sample_id: s for s in samples}
    table = co.ablate([by_id[i] for i in train_ids],
                      [by_id[i] for i in test_ids],
                      cfg.cnn, cfg.gnn, cfg.train, n_points=cfg.n_points)
    rendered = {arm: {split: co.report_to_dict(entry[split])
                      for split in ("val", "test") if split in entry}
                for arm, entry in table.items()}
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "ablation.json", rendered)
    _snapshot(cfg, out)
    _emit({"command": "ablate", "table": rendered})
    return EXIT_OK


def cmd_eval(args) -> int:
    state = vmodel.load_state(args.checkpoint)
    samples = vdata.load_cohort(args.cohort)
    seed = args.seed if args.seed is not None else 0
    n_points = args.points if args.points is not None else 512
    prepared = co.prepare_samples(samples, state.cnn, state.gnn, n_points,
                                  seed=seed)
    report = co.evaluate(state, prepared, FUSIONS[args.fusion])
    rendered = co.report_to_dict(report)
    if args.out:
        out = Path(args.out)
        _write_json(out / "eval.json", rendered)
        _write_json(out / "run_config.json", {
            "checkpoint": str(args.checkpoint), "cohort": str(args.cohort),
            "fusion": args.fusion, "n_points": n_points, "seed": seed,
        })
    _emit({"command": "eval", "report": rendered})
    return EXIT_OK


def cmd_explain(args) -> int:
    state = vmodel.load_state(args.checkpoint)
    samples = vdata.load_cohort(args.cohort)
    by_id = {s.sample_id: s for s in samples}
    wanted = [x for x in (args.ids or "").split(",") if x]
    if not wanted:
        raise ConfigError("--ids needs at least one sample id")
    seed = args.seed if args.seed is not None else 0
    n_points = args.points if args.points is not None else 512
    out = Path(args.out) if args.out else None
    if out is None:
        raise ConfigError("an output directory is required (--out)")

    written = []
    for k, sample_id in enumerate(wanted):
        if sample_id not in by_id:
            raise FileNotFoundError(f"sample {sample_id!r} not in cohort "
                                    f"{args.cohort}")
        sample = by_id[sample_id]
        sdir = out / sample_id
        sdir.mkdir(parents=True, exist_ok=True)

        cam = vi.grad_cam_3d(state, sample)
        vi.write_cam_volume(cam, sdir)
        _, cloud, transform = _sample_cloud(sample, n_points, seed, k)
        grid = vdata.crop_grid(sample, state.cnn.crop_size)
        cam_points = vi.project_cam_to_points(cam, cloud, transform, grid)
        vi.write_point_importance(sdir / "cam_points.csv", cloud, cam_points)
        vi.write_cluster_report(sdir / "cam_clusters.json",
                                vi.threshold_report(cam_points, cloud))

        result = vi.gnn_explain(state, cloud, steps=args.steps,
                                sample_id=sample_id)
        vi.write_point_importance(sdir / "gnn_points.csv", cloud,
                                  result.points)
        vi.write_cluster_report(sdir / "gnn_clusters.json",
                                vi.threshold_report(result.points, cloud))
        written.append(sample_id)
    _write_json(out / "run_config.json", {
        "checkpoint": str(args.checkpoint), "cohort": str(args.cohort),
        "ids": written, "n_points": n_points, "seed": seed,
        "steps": args.steps,
    })
    _emit({"command": "explain", "samples": written, "out": str(out)})
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser and entry point
# ---------------------------------------------------------------------------

def _add_common(sub, config=False, cohort=False, checkpoint=False):
    if config:
        sub.add_argument("--config", help="run config JSON")
    if cohort:
        sub.add_argument("--cohort", required=True,
                         help="cohort directory with manifest.json")
    if checkpoint:
        sub.add_argument("--checkpoint", required=True,
                         help="checkpoint manifest path")
    sub.add_argument("--seed", type=int, default=None,
                     help="override the run seed")
    sub.add_argument("--out", default=None, help="output directory")
    sub.add_argument("--points", type=int, default=None,
                     help="points per sampled cloud")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="voxpoint",
        description="dual-branch volumetric classification experiments")
    commands = parser.add_subparsers(dest="command")

    p = commands.add_parser("synth", help="generate a synthetic cohort")
    _add_common(p, config=True)
    p.set_defaults(func=cmd_synth)

    p = commands.add_parser("preprocess",
                            help="meshes, clouds and crops for a cohort")
    _add_common(p, config=True, cohort=True)
    p.set_defaults(func=cmd_preprocess)

    p = commands.add_parser("train", help="train from a run config")
    _add_common(p, config=True)
    p.set_defaults(func=cmd_train)

    p = commands.add_parser("ablate",
                            help="single-branch and collaborative arms")
    _add_common(p, config=True)
    p.set_defaults(func=cmd_ablate)

    p = commands.add_parser("eval", help="score a checkpoint on a cohort")
    _add_common(p, cohort=True, checkpoint=True)
    p.add_argument("--fusion", choices=sorted(FUSIONS), default="average")
    p.set_defaults(func=cmd_eval)

    p = commands.add_parser("explain",
                            help="attribution exports for chosen samples")
    _add_common(p, cohort=True, checkpoint=True)
    p.add_argument("--ids", required=True,
                   help="comma-separated sample ids")
    p.add_argument("--steps", type=int, default=200,
                   help="edge-mask optimization steps")
    p.set_defaults(func=cmd_explain)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    if getattr(args, "func", None) is None:
        parser.print_help()
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:   # surfaced with a stable exit code
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
