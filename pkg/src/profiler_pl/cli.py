"""Command-line entry point.

    profiler-pl synth          terrain raster + synthetic measurement CSV
    profiler-pl extract        CSV + raster -> MIN1 input container
    profiler-pl train          one model trained on every region
    profiler-pl cv             leave-one-region-out report
    profiler-pl ensemble-eval  per-region / per-category RMSE of a checkpoint ensemble
    profiler-pl diagnose       feature-subset regression of per-region RMSE
    profiler-pl losscurve      per-epoch RMSE of one or more checkpoints

Settings come from a JSON ``--config`` file (copied into ``--out``); flags
override it. Failures print one JSON object on stderr and exit non-zero.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import shutil
import sys
from pathlib import Path

import numpy as np

from . import diagnostics as diag
from .geodata import load_raster, save_raster
from .inputs_io import load_inputs, save_inputs
from .nn import ArchSpec, load_checkpoint, predict, save_checkpoint
from .pipeline import (TrainPlan, build_datasets, cross_validate, ensemble_predict,
                       pool_datasets, split_and_pool, train_model)
from .profile import (DEFAULT_WIDTH, EARTH_RADIUS_M, ChannelConfig, NormalizationSpec,
                      build_profile, read_measurements, write_measurements)
from .synthgen import UK_BANDS_MHZ, GroundTruthModel, TerrainParams, generate_measurements, generate_terrain

log = logging.getLogger("profiler_pl")

LOG_ENV = "PROFILER_PL_LOG"
LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


class CliError(Exception):
    """A user-facing failure; ``kind`` becomes the JSON error tag."""

    def __init__(self, message: str, kind: str = "usage", code: int = 2):
        super().__init__(message)
        self.kind = kind
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


# ---------------------------------------------------------------------------
# Settings
# ---------------------------------------------------------------------------


def _load_config(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise CliError(f"config file not found: {p}", "missing_file")
    try:
        cfg = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CliError(f"{p}: invalid JSON ({exc})", "config") from exc
    if not isinstance(cfg, dict):
        raise CliError(f"{p}: top level must be an object", "config")
    # relative data paths are relative to the config file
    data = cfg.get("data", {})
    for key in ("measurements", "raster", "inputs", "predictions"):
        if isinstance(data.get(key), str):
            data[key] = str((p.parent / data[key]).resolve())
    for key in ("checkpoints",):
        if isinstance(data.get(key), list):
            data[key] = [str((p.parent / c).resolve()) for c in data[key]]
    return cfg


def _section(cfg: dict, name: str) -> dict:
    sec = cfg.get(name, {})
    if not isinstance(sec, dict):
        raise CliError(f"config section {name!r} must be an object", "config")
    return sec


def _plan(args, cfg) -> TrainPlan:
    sec = dict(_section(cfg, "plan"))
    for flag, key in (("seed", "seed"), ("runs", "runs"), ("epochs", "epochs"),
                      ("batch", "batch_size"), ("lr", "lr")):
        value = getattr(args, flag, None)
        if value is not None:
            sec[key] = value
    try:
        return TrainPlan(**sec)
    except TypeError as exc:
        raise CliError(f"bad plan section: {exc}", "config") from exc


def _config_kind(args, cfg) -> ChannelConfig:
    kind = args.model or _section(cfg, "model").get("kind") or "original"
    return ChannelConfig.of(kind)


def _arch(cfg, width: int) -> ArchSpec:
    sec = _section(cfg, "model")
    kw = {k: tuple(sec[k]) for k in ("conv_channels", "fc_widths") if k in sec}
    return ArchSpec(**kw, input_cols=width)


def _norm(cfg) -> NormalizationSpec:
    try:
        return NormalizationSpec(**_section(cfg, "norm"))
    except TypeError as exc:
        raise CliError(f"bad norm section: {exc}", "config") from exc


def _threads(args, cfg) -> int:
    n = args.threads if args.threads is not None else int(cfg.get("threads", 1))
    if n < 1:
        raise CliError("--threads must be >= 1")
    return n


def _data_path(args, cfg, key: str, required: bool = True):
    value = getattr(args, key, None) or _section(cfg, "data").get(key)
    if value is None:
        if required:
            raise CliError(f"no {key} given (flag --{key} or data.{key} in the config)")
        return None
    p = Path(value)
    if not p.exists():
        raise CliError(f"{key} file not found: {p}", "missing_file")
    return p


def _link_filter(cfg):
    """Configurable stand-in for a measurement noise filter."""
    sec = _section(cfg, "filter")
    lo = sec.get("min_path_loss_db", -math.inf)
    hi = sec.get("max_path_loss_db", math.inf)
    dmax = sec.get("max_distance_m", math.inf)
    if not sec:
        return None
    return lambda link: (link.path_loss is None or lo <= link.path_loss <= hi) \
        and link.ground_distance <= dmax


def _write_json(obj, path):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _prepare_out(args, cfg, effective: dict) -> Path:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create output dir {out}: {exc}", "io", 1) from exc
    if not os.access(out, os.W_OK):
        raise CliError(f"output dir {out} is not writable", "io", 1)
    if args.config:
        shutil.copyfile(args.config, out / "config.json")
    _write_json(effective, out / "effective_config.json")
    return out


def _load_datasets(args, cfg, config: ChannelConfig, norm: NormalizationSpec, width: int):
    """Datasets from a MIN1 container when given, else extracted from CSV + raster."""
    inputs = _data_path(args, cfg, "inputs", required=False)
    if inputs is not None:
        datasets, stored, stored_norm = load_inputs(inputs)
        if stored != config:
            raise CliError(f"{inputs} holds {stored.kind.value} inputs "
                           f"({stored.n_channels} channels) but --model is {config.kind.value}",
                           "config")
        if stored_norm != norm:
            raise CliError(f"{inputs} was extracted with a different normalization", "config")
        return datasets
    links = read_measurements(_data_path(args, cfg, "measurements"), _link_filter(cfg))
    raster = load_raster(_data_path(args, cfg, "raster"),
                         fill_value=_section(cfg, "data").get("fill_value"))
    return build_datasets(links, raster, config, norm, width, _radius(cfg))


def _radius(cfg) -> float:
    return float(_section(cfg, "extract").get("earth_radius_m", EARTH_RADIUS_M))


def _width(cfg) -> int:
    return int(_section(cfg, "extract").get("width", DEFAULT_WIDTH))


def _labelled(datasets):
    """Drop links without a measured target (they cannot be trained or scored)."""
    out = []
    for ds in datasets:
        keep = np.flatnonzero(np.isfinite(ds.targets))
        if len(keep):
            out.append(ds.subset(keep) if len(keep) < len(ds) else ds)
    if not out:
        raise CliError("no links with a measured path loss", "data", 1)
    return out


def _fmt(x) -> str:
    return repr(float(x))


def _write_curve(rows, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        keys = [k for k in rows[0] if k not in ("epoch", "train_rmse_db", "val_rmse_db")] if rows else []
        w.writerow(keys + ["epoch", "train_rmse_db", "val_rmse_db"])
        for r in rows:
            w.writerow([r[k] for k in keys] + [r["epoch"], _fmt(r["train_rmse_db"]),
                                               _fmt(r["val_rmse_db"])])


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args, cfg):
    sec = dict(_section(cfg, "synth"))
    seed = args.seed if args.seed is not None else int(sec.get("seed", 0))
    terrain = TerrainParams(
        seed=seed,
        size=int(sec.get("size", 512)),
        roughness_m=float(sec.get("roughness_m", 8.0)),
        building_density=float(sec.get("building_density", 0.2)),
        building_height_m=tuple(sec.get("building_height_m", (5.0, 25.0))),
        building_side_m=tuple(sec.get("building_side_m", (8, 30))),
        cell_size=float(sec.get("cell_size", 1.0)),
    )
    truth = GroundTruthModel(**sec.get("truth", {}))
    regions = list(sec.get("regions", ["a", "b"]))
    bands = list(sec.get("bands", UK_BANDS_MHZ[:3]))
    n_links = int(sec.get("n_links", 200))
    effective = {"command": "synth", "seed": seed, "terrain": terrain.__dict__, "truth": truth.__dict__,
                 "regions": regions, "bands": bands, "n_links": n_links,
                 "distance_range_m": list(sec.get("distance_range_m", (80.0, 400.0))),
                 "categories": sec.get("categories")}
    out = _prepare_out(args, cfg, effective)
    raster = generate_terrain(terrain)
    links = generate_measurements(raster, n_links, regions, bands, truth, seed + 1,
                                  distance_range_m=tuple(effective["distance_range_m"]),
                                  width=_width(cfg), categories=sec.get("categories"))
    save_raster(raster, out / "terrain.dsr")
    write_measurements(links, out / "measurements.csv")
    log.info("synth: %d links over %d regions", len(links), len(regions))


def cmd_extract(args, cfg):
    config, norm, width = _config_kind(args, cfg), _norm(cfg), _width(cfg)
    effective = {"command": "extract", "model": config.kind.value, "norm": norm.to_dict(),
                 "width": width, "earth_radius_m": _radius(cfg), "filter": _section(cfg, "filter")}
    out = _prepare_out(args, cfg, effective)
    links = read_measurements(_data_path(args, cfg, "measurements"), _link_filter(cfg))
    raster = load_raster(_data_path(args, cfg, "raster"),
                         fill_value=_section(cfg, "data").get("fill_value"))
    datasets = build_datasets(links, raster, config, norm, width, _radius(cfg))
    save_inputs(datasets, config, norm, out / "inputs.min1")
    log.info("extract: %d links", sum(len(d) for d in datasets))


def _train_setup(args, cfg, command):
    config, norm, width = _config_kind(args, cfg), _norm(cfg), _width(cfg)
    plan, arch = _plan(args, cfg), _arch(cfg, width)
    threads = _threads(args, cfg)
    effective = {"command": command, "model": config.kind.value, "norm": norm.to_dict(),
                 "arch": arch.to_dict(), "plan": plan.__dict__, "threads": threads, "width": width}
    return config, norm, width, plan, arch, threads, effective


def cmd_train(args, cfg):
    config, norm, width, plan, arch, _, effective = _train_setup(args, cfg, "train")
    out = _prepare_out(args, cfg, effective)
    datasets = _labelled(_load_datasets(args, cfg, config, norm, width))
    train, val = split_and_pool(datasets, plan)
    ckp = train_model(train, val, plan, config, plan.seed, arch, norm)
    save_checkpoint(ckp, out / "model.ckp")
    _write_curve(ckp.loss_curve, out / "loss_curve.csv")
    log.info("train: best epoch %d, validation %.3f dB", ckp.epoch,
             ckp.loss_curve[ckp.epoch - 1]["val_rmse_db"])


def cmd_cv(args, cfg):
    config, norm, width, plan, arch, threads, effective = _train_setup(args, cfg, "cv")
    out = _prepare_out(args, cfg, effective)
    datasets = _labelled(_load_datasets(args, cfg, config, norm, width))
    if plan.holdout is not None:
        names = [d.region for d in datasets]
        if plan.holdout not in names:
            raise CliError(f"holdout {plan.holdout!r} is not one of {names}", "config")
    report = cross_validate(datasets, plan, config, arch, norm, threads=threads)
    holdouts = report.holdouts if plan.holdout is None else [plan.holdout]
    sizes = {d.region: len(d) for d in datasets}
    with open(out / "cv_summary.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["holdout", "n_links", "runs", "mean_rmse_db", "sd_rmse_db"])
        for h in holdouts:
            w.writerow([h, sizes[h], plan.runs, _fmt(report.mean(h)), _fmt(report.sd(h))])
        sub = type(report)(holdouts, report.run_rmse)
        w.writerow(["mean", sum(sizes[h] for h in holdouts), plan.runs,
                    _fmt(sub.grand_mean), _fmt(sub.grand_sd)])
    with open(out / "cv_runs.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["holdout", "run", "seed", "rmse_db"])
        for h in holdouts:
            for r, score in enumerate(report.run_rmse[h]):
                w.writerow([h, r, plan.seed + r, _fmt(score)])
    rows = [dict(holdout=h, run=r, **c) for h in holdouts
            for r, curve in enumerate(report.loss_curves[h]) for c in curve]
    _write_curve(rows, out / "loss_curve.csv")


def _checkpoints(args, cfg):
    paths = args.checkpoints or _section(cfg, "data").get("checkpoints")
    if not paths:
        raise CliError("no checkpoints given (--checkpoints or data.checkpoints)")
    for p in paths:
        if not Path(p).is_file():
            raise CliError(f"checkpoint not found: {p}", "missing_file")
    return [str(p) for p in paths]


def cmd_ensemble_eval(args, cfg):
    paths = _checkpoints(args, cfg)
    ckps = [load_checkpoint(p) for p in paths]
    config, norm = ckps[0].config, ckps[0].norm
    if args.model and ChannelConfig.of(args.model) != config:
        raise CliError(f"--model {args.model} contradicts checkpoint configuration "
                       f"{config.kind.value}", "config")
    width = ckps[0].model.arch.input_cols
    effective = {"command": "ensemble-eval", "checkpoints": [Path(p).name for p in paths],
                 "model": config.kind.value, "norm": norm.to_dict(), "width": width}
    out = _prepare_out(args, cfg, effective)
    parts = _labelled(_load_datasets(args, cfg, config, norm, width))
    data = pool_datasets(parts)
    regions = [d.region for d in parts for _ in range(len(d))]
    pred = ensemble_predict(ckps, data.channels, data.scalars)
    truth = norm.denormalize_target(data.targets)
    report = diag.categorize_report(pred, truth, data.categories, regions)
    diag.write_category_csv(report, out / "ensemble_report.csv")
    with open(out / "predictions.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["link_id", "region", "category", "target_db", "predicted_db"])
        for i in np.argsort(data.ids, kind="stable"):
            w.writerow([int(data.ids[i]), regions[i], data.categories[i] or "", _fmt(truth[i]),
                        _fmt(pred[i])])
    with open(out / "members.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["checkpoint", "seed", "rmse_db"])
        for p, ckp in zip(paths, ckps):
            member = ckp.norm.denormalize_target(predict(ckp.model, data.channels, data.scalars))
            w.writerow([Path(p).name, ckp.seed, _fmt(diag.rmse(member, truth))])
        w.writerow(["ensemble", "", _fmt(report.overall.rmse_db)])


def _read_predictions(path):
    by_region: dict[str, list[tuple[float, float]]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        need = {"region", "target_db", "predicted_db"}
        if not need <= set(reader.fieldnames or []):
            raise CliError(f"{path}: predictions need columns {sorted(need)}", "data", 1)
        for row in reader:
            by_region.setdefault(row["region"], []).append((float(row["predicted_db"]),
                                                            float(row["target_db"])))
    return {r: diag.rmse(*zip(*v)) for r, v in by_region.items()}


def cmd_diagnose(args, cfg):
    sec = _section(cfg, "diagnose")
    mode = sec.get("depth_mode", "integrated")
    width = _width(cfg)
    effective = {"command": "diagnose", "depth_mode": mode, "width": width,
                 "earth_radius_m": _radius(cfg), "features": list(diag.FEATURES)}
    out = _prepare_out(args, cfg, effective)
    links = read_measurements(_data_path(args, cfg, "measurements"), _link_filter(cfg))
    raster = load_raster(_data_path(args, cfg, "raster"),
                         fill_value=_section(cfg, "data").get("fill_value"))
    region_rmse = _read_predictions(_data_path(args, cfg, "predictions"))
    grouped: dict[str, list] = {}
    for link in links:
        grouped.setdefault(link.region, []).append((link, build_profile(raster, link, width, _radius(cfg))))
    regions = sorted(r for r in grouped if r in region_rmse)
    if len(regions) < 2:
        raise CliError("diagnose needs predictions for at least 2 regions", "data", 1)
    stats = [diag.link_stats(grouped[r], mode) for r in regions]
    targets = [region_rmse[r] for r in regions]
    with open(out / "region_stats.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["region", "n_links", "p_LOS", "mu_o", "sigma_d", "rmse_db"])
        for r, s, t in zip(regions, stats, targets):
            w.writerow([r, s.n_links, _fmt(s.p_LOS), _fmt(s.mu_o), _fmt(s.sigma_d), _fmt(t)])
    diag.write_regression_csv(diag.exhaustive_regression(stats, targets), out / "regression.csv")


def cmd_losscurve(args, cfg):
    paths = _checkpoints(args, cfg)
    out = _prepare_out(args, cfg, {"command": "losscurve",
                                   "checkpoints": [Path(p).name for p in paths]})
    rows = []
    for p in paths:
        ckp = load_checkpoint(p)
        rows += [dict(checkpoint=Path(p).name, best_epoch=ckp.epoch, **c) for c in ckp.loss_curve]
    _write_curve(rows, out / "loss_curve.csv")


COMMANDS = {
    "synth": cmd_synth,
    "extract": cmd_extract,
    "train": cmd_train,
    "cv": cmd_cv,
    "ensemble-eval": cmd_ensemble_eval,
    "diagnose": cmd_diagnose,
    "losscurve": cmd_losscurve,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="profiler-pl", description="Map-based path-loss CNN toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON settings file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--threads", type=int)
        p.add_argument("--model", choices=["original", "fine", "flip"])
        p.add_argument("--runs", type=int)
        p.add_argument("--epochs", type=int)
        p.add_argument("--batch", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--measurements", help="measurement CSV")
        p.add_argument("--raster", help="DSR1 or ASCII-grid raster")
        p.add_argument("--inputs", help="MIN1 input container")
        p.add_argument("--checkpoints", nargs="+", help="CKP1 checkpoint files")
        p.add_argument("--predictions", help="predictions CSV from ensemble-eval")
    return parser


def _setup_logging():
    level = os.environ.get(LOG_ENV, "error").strip().lower()
    if level not in LOG_LEVELS:
        raise CliError(f"{LOG_ENV} must be one of {sorted(LOG_LEVELS)}, got {level!r}")
    logging.basicConfig(level=LOG_LEVELS[level], stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s", force=True)


def run(argv=None) -> int:
    try:
        _setup_logging()
        args = build_parser().parse_args(argv)
        cfg = _load_config(args.config)
        from threadpoolctl import threadpool_limits

        # one BLAS thread per process keeps every reduction order fixed;
        # --threads adds worker processes instead
        with threadpool_limits(limits=1):
            COMMANDS[args.command](args, cfg)
        return 0
    except CliError as exc:
        err = {"error": exc.kind, "message": str(exc)}
        code = exc.code
    except FileNotFoundError as exc:
        err = {"error": "missing_file", "message": str(exc)}
        code = 1
    except (ValueError, RuntimeError, OSError) as exc:
        err = {"error": type(exc).__name__, "message": str(exc)}
        code = 1
    print(json.dumps(err, sort_keys=True), file=sys.stderr)
    return code


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
