"""Command-line entry point: ``inr-change {synth|fit|detect|eval|search}``.

Exit codes: 0 success, 2 configuration or usage error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import Optional

import numpy as np

from . import change, hypersearch, metrics, parallel, synth
from .config import ConfigError, from_mapping, read_config_file
from .core_types import PointCloudFormatError, load_xyz
from .network import NonFiniteError, load_checkpoint, save_checkpoint
from .training import TrainConfig, TrainingDivergedError, fit

log = logging.getLogger("inr_change")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
THREADS_ENV = "INR_CHANGE_THREADS"
CHECKPOINT_NAME = "model.npz"


class UsageError(ConfigError):
    pass


# -- helpers -----------------------------------------------------------------------

def _write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")
    return path


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


def _section(args, name: str, allowed: tuple = ()) -> dict:
    """The ``name`` section of ``--config``; a flat file is taken as that section."""
    if not args.config:
        return {}
    data = read_config_file(args.config)
    if not isinstance(data, dict):
        raise ConfigError(f"{args.config}: top level must be a mapping")
    sections = {"train", "search", "scene", "detect"}
    if set(data) & sections:
        unknown = sorted(set(data) - sections - set(allowed))
        if unknown:
            raise ConfigError(f"{args.config}: unknown sections {', '.join(unknown)}")
        out = dict(data.get(name, {}))
        out.update({k: data[k] for k in allowed if k in data})
        return out
    return dict(data)


def _overrides(pairs) -> dict:
    out = {}
    for item in pairs or ():
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        try:
            out[k.strip()] = json.loads(v)
        except json.JSONDecodeError:
            out[k.strip()] = v
    return out


def resolve_threads(value: Optional[int]) -> int:
    """``--threads``, else ``$INR_CHANGE_THREADS``, else the available core count."""
    if value is None:
        env = os.environ.get(THREADS_ENV)
        if env:
            try:
                value = int(env)
            except ValueError:
                raise UsageError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
        else:
            value = len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else os.cpu_count()
    if value < 1:
        raise UsageError("thread count must be >= 1")
    return int(value)


def _out_dir(args, default: str) -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _train_config(args) -> TrainConfig:
    data = _section(args, "train")
    data.update(_overrides(args.set))
    if args.seed is not None:
        data["seed"] = args.seed
    return from_mapping(TrainConfig, data)


def _checkpoint_path(p) -> Path:
    p = Path(p)
    return p / CHECKPOINT_NAME if p.is_dir() else p


# -- commands -------------------------------------------------------------------------

def cmd_synth(args) -> dict:
    data = _section(args, "scene", allowed=("preset",))
    data.update(_overrides(args.set))
    name = data.pop("preset", args.preset)
    if args.seed is not None:
        data["seed"] = args.seed
    if args.extent is not None:
        data["extent"] = args.extent
    if args.walls:
        data["walls"] = True
    try:
        extent = data.pop("extent", 100.0)
        spec = synth.preset(name, extent=extent, **data) if name else synth.SceneSpec(extent=extent, **data)
    except TypeError as exc:
        raise ConfigError(f"invalid scene settings: {exc}") from exc
    scene = synth.generate(spec)
    paths = synth.write_scene(scene, _out_dir(args, "scene"))
    return {"files": [str(p) for p in paths], "n_pc0": len(scene.pc0), "n_pc1": len(scene.pc1),
            "preset": name}


def cmd_fit(args) -> dict:
    cfg = _train_config(args)
    pc0, pc1 = load_xyz(args.pc0, timestamp=0), load_xyz(args.pc1, timestamp=1)
    out = _out_dir(args, "fit")
    _write_json(out / "resolved_config.json", {"command": "fit", "train": dataclasses.asdict(cfg),
                                              "pc0": str(args.pc0), "pc1": str(args.pc1),
                                              "threads": args.threads_resolved})
    result = fit([pc0, pc1], cfg)
    names = ["model"] if cfg.mode == "S" else ["t0", "t1"]
    save_checkpoint(out / CHECKPOINT_NAME, result.models, result.normalizer, cfg.mode,
                    {"train": dataclasses.asdict(cfg)})
    report = {"mode": cfg.mode, "val_mse": result.val_mse, "val_rmse_m": result.val_rmse_m,
              "models": {n: r.to_dict(include_time=False) for n, r in zip(names, result.reports)}}
    _write_json(out / "train_report.json", report)
    _write_json(out / "run_meta.json", {"wall_time": {n: r.wall_time for n, r in zip(names, result.reports)},
                                        "finished": time.strftime("%Y-%m-%dT%H:%M:%S")})
    if not args.no_figures:
        from . import plotting

        plotting.training_curves(result.reports, out / "training_curves.png", names)
    return {"checkpoint": str(out / CHECKPOINT_NAME), "val_mse": result.val_mse,
            "val_rmse_m": result.val_rmse_m, "epochs": [r.epochs for r in result.reports],
            "stop_reason": [r.stop_reason for r in result.reports]}


def _parse_bounds(text: str) -> tuple:
    try:
        vals = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise UsageError(f"--grid expects xmin,xmax,ymin,ymax, got {text!r}") from None
    if len(vals) != 4:
        raise UsageError(f"--grid expects 4 comma-separated numbers, got {len(vals)}")
    return vals


def cmd_detect(args) -> dict:
    models, norm, mode, _ = load_checkpoint(_checkpoint_path(args.checkpoint))
    if (args.support is None) == (args.grid is None):
        raise UsageError("give exactly one of --support PC1 or --grid xmin,xmax,ymin,ymax")
    out = _out_dir(args, "detect")
    min_dz = None if args.no_min_dz_filter else args.min_dz
    try:
        if args.grid is not None:
            grid = change.regular_grid(_parse_bounds(args.grid), args.resolution)
            support = grid.xy
        else:
            support = load_xyz(args.support, timestamp=1).xy
            if len(support) == 0:
                raise UsageError("support is empty")
            xmin, ymin = support.min(axis=0)
            xmax, ymax = support.max(axis=0)
            grid = change.regular_grid((xmin, xmax + 1e-9, ymin, ymax + 1e-9), args.resolution)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if len(support) == 0:
        raise UsageError("support is empty")
    field = change.decode_dz(models, norm, support, mode)
    gmm = change.fit_gmm3(field.dz, seed=args.seed or 0)
    labels = change.label_changes(field, gmm, min_dz)
    z1 = change.decode_heights(models, norm, support, 1, mode)
    change.write_change_csv(out / "changes.csv", field, labels, z1)

    # rasters always cover a grid; on point supports the grid spans the support bounds
    if args.grid is not None:
        gfield, glabels = field, labels
    else:
        gfield = change.decode_dz(models, norm, grid.xy, mode)
        glabels = change.label_changes(gfield, gmm, min_dz)
    lim = float(np.max(np.abs(gfield.dz)))
    change.write_pgm(out / "dz.pgm", gfield.dz, grid, -lim, lim, meta={"quantity": "dz_m"})
    change.write_pgm(out / "labels.pgm", glabels.labels, grid, 0, 255, maxval=255,
                     meta={"quantity": "label", "classes": {str(k): v for k, v in synth.CLASS_NAMES.items()}})
    gxy = grid.xy
    np.savetxt(out / "dz_grid.csv", np.column_stack([gxy, gfield.dz]), fmt="%.17g",
               delimiter=",", header="x,y,dz", comments="")
    np.savetxt(out / "labels_grid.csv", np.column_stack([gxy, glabels.labels]), fmt=["%.17g", "%.17g", "%d"],
               delimiter=",", header="x,y,label", comments="")
    _write_json(out / "gmm.json", gmm.to_dict())
    _write_json(out / "resolved_config.json", {
        "command": "detect", "checkpoint": str(args.checkpoint), "mode": mode,
        "support": str(args.support) if args.support else None, "grid": args.grid,
        "resolution": args.resolution, "min_abs_dz": min_dz, "seed": args.seed or 0,
        "threads": args.threads_resolved})
    if not args.no_figures:
        from . import plotting

        ext = (grid.bounds[0], grid.bounds[0] + grid.shape[1] * grid.resolution,
               grid.bounds[2], grid.bounds[2] + grid.shape[0] * grid.resolution)
        plotting.dz_map(gxy, gfield.dz, out / "dz_map.png", grid.shape, ext)
        plotting.label_map(gxy, glabels.labels, out / "labels_map.png", grid.shape, ext)
        plotting.dz_histogram(field.dz, out / "dz_hist.png", gmm, labels.labels, min_dz)
    counts = {synth.CLASS_NAMES[c]: int(np.count_nonzero(labels.labels == c)) for c in synth.CLASS_NAMES}
    return {"n_points": len(support), "grid_shape": list(grid.shape), "counts": counts,
            "gmm_means": gmm.means.tolist(), "out": str(out)}


def _read_truth(path) -> np.ndarray:
    try:
        truth = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    except ValueError as exc:
        raise UsageError(f"{path}: {exc}") from exc
    col = truth[:, -1]
    if not np.all(np.isin(col, list(synth.CLASS_NAMES))):
        raise UsageError(f"{path}: labels must be in {sorted(synth.CLASS_NAMES)}")
    return col.astype(np.int64)


def cmd_eval(args) -> dict:
    try:
        pred = change.read_change_csv(args.changes)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    truth = _read_truth(args.truth)
    if len(truth) != len(pred["label"]):
        raise UsageError(f"row count mismatch: {len(pred['label'])} predictions vs {len(truth)} labels")
    rmse = None
    if args.report:
        rmse = json.loads(Path(args.report).read_text()).get("val_rmse_m")
    res = metrics.evaluate(pred["label"], pred["dz"], truth, rmse)
    out = _out_dir(args, "eval")
    _write_json(out / "metrics.json", res.to_dict())
    table = metrics.format_table({args.name: res})
    (out / "table.txt").write_text(table + "\n")
    if not args.no_figures:
        from . import plotting

        plotting.dz_histogram(pred["dz"], out / "dz_by_truth.png", labels=truth)
    print(table)
    return res.to_dict()


def cmd_search(args) -> dict:
    data = _section(args, "search", allowed=("train",))
    train_base = data.pop("train", {})
    space_d = dict(data.pop("space", {}))
    opts = {k: data.pop(k) for k in ("budget", "strategy", "parallelism", "wave_size", "n_startup")
            if k in data}
    if data:
        raise ConfigError(f"unknown search keys: {', '.join(sorted(data))}")
    base = {**space_d.get("base", {}), **train_base, **_overrides(args.set)}
    space_d["base"] = base
    space = hypersearch.SearchSpace.from_dict(space_d)
    for k in ("budget", "strategy", "parallelism"):
        if getattr(args, k) is not None:
            opts[k] = getattr(args, k)
    opts.setdefault("budget", 20)
    opts.setdefault("strategy", "tpe-lite")
    opts.setdefault("parallelism", 1)
    seed = args.seed or 0
    pc0, pc1 = load_xyz(args.pc0, timestamp=0), load_xyz(args.pc1, timestamp=1)
    out = _out_dir(args, "search")
    _write_json(out / "resolved_config.json", {"command": "search", "space": space.to_dict(),
                                              "seed": seed, **opts, "threads": args.threads_resolved})
    objective = hypersearch.fit_objective([pc0, pc1], space)
    best, trials = hypersearch.run_search(space, objective, seed=seed, journal=out / "journal.jsonl", **opts)
    best_cfg = dataclasses.asdict(space.train_config({**best.config, "seed": best.seed}))
    _write_json(out / "best_config.json", {"trial": best.index, "val_mse": best.mse, "train": best_cfg})
    if not args.no_figures:
        from . import plotting

        plotting.search_trace(trials, out / "search_trace.png")
    status = {s: sum(t.status == s for t in trials) for s in hypersearch.STATUSES}
    return {"best_trial": best.index, "best_val_mse": best.mse, "n_trials": len(trials), **status}


# -- parser ------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON or TOML config file")
    common.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    common.add_argument("--threads", type=int, default=None,
                        help=f"numeric thread count (fallback ${THREADS_ENV}, then all cores)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("--no-figures", action="store_true", help="skip matplotlib figures")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="inr-change", description="Change detection with implicit height fields.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a labelled synthetic scene")
    s.add_argument("--preset", default="clean-hires",
                   help=f"scene preset ({', '.join(synth.PRESETS)})")
    s.add_argument("--extent", type=float, default=None)
    s.add_argument("--walls", action="store_true", help="add facade points")
    s.set_defaults(func=cmd_synth)

    f = sub.add_parser("fit", parents=[common], help="fit height field(s) to two clouds")
    f.add_argument("pc0")
    f.add_argument("pc1")
    f.set_defaults(func=cmd_fit)

    d = sub.add_parser("detect", parents=[common], help="decode dz and label changes")
    d.add_argument("checkpoint", help="fit output directory or checkpoint file")
    d.add_argument("--support", help="point cloud whose (x, y) are queried (usually pc1)")
    d.add_argument("--grid", help="query grid bounds xmin,xmax,ymin,ymax in meters")
    d.add_argument("--resolution", type=float, default=1.0, help="grid cell size in meters")
    d.add_argument("--min-dz", type=float, default=2.0, help="|dz| below this is Unchanged")
    d.add_argument("--no-min-dz-filter", action="store_true")
    d.set_defaults(func=cmd_detect)

    e = sub.add_parser("eval", parents=[common], help="score a change CSV against truth labels")
    e.add_argument("changes")
    e.add_argument("truth")
    e.add_argument("--report", help="train_report.json to include validation RMSE")
    e.add_argument("--name", default="run")
    e.set_defaults(func=cmd_eval)

    h = sub.add_parser("search", parents=[common], help="hyperparameter search on validation MSE")
    h.add_argument("pc0")
    h.add_argument("pc1")
    h.add_argument("--budget", type=int, default=None)
    h.add_argument("--strategy", choices=("random", "tpe-lite"), default=None)
    h.add_argument("--parallelism", type=int, default=None)
    h.set_defaults(func=cmd_search)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.threads_resolved = resolve_threads(args.threads)
        with parallel.workers(args.threads_resolved):
            summary = args.func(args)
    except (TrainingDivergedError, NonFiniteError, FloatingPointError, change.DegenerateDataError,
            change.AmbiguousOrderingError, hypersearch.SearchFailedError) as exc:
        print(f"error (numerical): {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, PointCloudFormatError, change.ModeMismatchError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.command != "eval":
        print(json.dumps(summary, sort_keys=True, default=_json_default))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
