"""Command-line entry point.

Subcommands: synth, features, train, eval, predict, benchmark, optimize.
Every key of :mod:`floodfusion.config` is also a ``--flag``; flags override
the ``--config`` file. Exit codes: 0 success, 2 configuration error,
3 data or checkpoint error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import shutil
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import bayesopt, config, metrics, synthdata, terrain, trainer
from .autodiff.checkpoint import CheckpointError
from .autodiff.tensor import ShapeError
from .models import ALL_COMBOS, CNN_KINDS, RNN_KINDS, AssemblyError, ModelSpecError, load_model, save_model
from .raster import FEATURE_IDS, EmptyDomainError, GeometryError, RasterFormatError, read_grid, write_grid

log = logging.getLogger("floodfusion")

CHECKPOINT_FORMAT = 1
EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class OutputExists(config.ConfigError):
    pass


class CheckpointMismatch(AssemblyError):
    pass


CONFIG_ERRORS = (config.ConfigError, ModelSpecError)
DATA_ERRORS = (synthdata.DatasetError, RasterFormatError, GeometryError, EmptyDomainError,
               terrain.DrainageError, CheckpointError, AssemblyError, ShapeError, OSError)
NUMERIC_ERRORS = (trainer.TrainingDiverged, bayesopt.NumericalError, FloatingPointError)


# --------------------------------------------------------------------------
# Config-to-object helpers
# --------------------------------------------------------------------------

def storm_params(cfg) -> synthdata.StormParams:
    try:
        return synthdata.StormParams(A1=cfg["idf_a1"], C=cfg["idf_c"], b=cfg["idf_b"], n=cfg["idf_n"],
                                     r=cfg["peak_ratio"], step=cfg["rain_step"])
    except ValueError as exc:
        raise config.ConfigError(str(exc)) from None


def check_world(cfg):
    rows, cols = cfg["rows"], cfg["cols"]
    if rows < 16 or cols < 16 or rows % 16 or cols % 16:
        raise config.ConfigError(f"rows and cols must be multiples of 16 and at least 16, got {rows}x{cols}")
    if not cfg["cell_size"] > 0:
        raise config.ConfigError("cell_size must be positive")
    if any(d % cfg["rain_step"] for d in synthdata.DURATIONS):
        raise config.ConfigError(f"rain_step must divide the storm durations {synthdata.DURATIONS}")


def terrain_params(cfg) -> terrain.TerrainParams:
    try:
        return terrain.TerrainParams(cfg["focal_radius"], cfg["flacc_cutoff"],
                                     cfg["flimp_cutoff"], cfg["flslo_cutoff"])
    except ValueError as exc:
        raise config.ConfigError(str(exc)) from None


def train_config(cfg, epochs: int | None = None) -> trainer.TrainConfig:
    if cfg["clip_mode"] not in ("per_array", "global"):
        raise config.ConfigError("clip_mode must be per_array or global")
    try:
        return trainer.TrainConfig(epochs=cfg["epochs"] if epochs is None else epochs,
                                   batch_size=cfg["batch_size"], lr=cfg["lr"], clip=cfg["clip"],
                                   clip_mode=cfg["clip_mode"], split_fraction=cfg["split_fraction"],
                                   seed=cfg["seed"], mode=cfg["mode"])
    except ValueError as exc:
        raise config.ConfigError(str(exc)) from None


def model_kw(cfg) -> dict:
    return {"base_width": cfg["base_width"], "rnn_hidden": cfg["rnn_hidden"],
            "rnn_layers": cfg["rnn_layers"], "fusion_channels": cfg["fusion_channels"],
            "head_kind": cfg["head"], "dropout": cfg["dropout"]}


def feature_ids(cfg) -> tuple[str, ...]:
    ids = cfg["features"]
    bad = [f for f in ids if f not in FEATURE_IDS]
    if bad or not ids:
        raise config.ConfigError(f"features: unknown ids {bad}" if bad else "features: empty list")
    if len(set(ids)) != len(ids):
        raise config.ConfigError("features: duplicate ids")
    return ids


def check_kinds(cfg):
    if cfg["cnn"] not in CNN_KINDS:
        raise config.ConfigError(f"cnn must be one of {CNN_KINDS}")
    if cfg["rnn"] not in RNN_KINDS:
        raise config.ConfigError(f"rnn must be one of {RNN_KINDS}")


def prepare_dir(path, force: bool) -> Path:
    """Create ``path``; a non-empty existing directory needs ``force`` and is then cleared."""
    path = Path(path)
    if path.exists() and any(path.iterdir()):
        if not force:
            raise OutputExists(f"{path} exists and is not empty (use --force to overwrite)")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_resolved(cfg, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.txt").write_text(config.dump(cfg))


def load(cfg) -> synthdata.Dataset:
    ds = synthdata.load_dataset(cfg["dataset"])
    log.info("dataset %s: %d events, %dx%d", cfg["dataset"], len(ds), *ds.shape)
    return ds


def checkpoint_path(cfg) -> Path:
    return Path(cfg["checkpoint"]) if cfg["checkpoint"] else Path(cfg["out"]) / "model.ckpt"


def load_trained(cfg, ds):
    """Load a checkpoint written by ``train`` and rebuild its sample sets on ``ds``."""
    path = checkpoint_path(cfg)
    model, meta = load_model(path)
    version = meta.get("format_version")
    if version != CHECKPOINT_FORMAT:
        raise CheckpointMismatch(f"{path}: checkpoint format {version}, this version reads {CHECKPOINT_FORMAT}")
    tcfg = trainer.TrainConfig(**meta["train"])
    ids = tuple(meta["features"])
    spec = model.spec
    if (spec.in_channels, spec.height, spec.width) != (len(ids),) + ds.shape:
        raise CheckpointMismatch(f"{path}: model expects {spec.in_channels}x{spec.height}x{spec.width}, "
                                 f"dataset gives {len(ids)}x{ds.shape[0]}x{ds.shape[1]}")
    tr, te = trainer.build_sets(ds, tcfg, ids)
    if not np.isclose(tr.rain_scale, meta["rain_scale"], rtol=1e-12, atol=0):
        raise CheckpointMismatch(f"{path}: rainfall scale differs from the training run; "
                                 "was the checkpoint trained on another dataset?")
    model.eval()
    return model, meta, tcfg, tr, te


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------

def cmd_synth(cfg) -> int:
    check_world(cfg)
    storm, terr = storm_params(cfg), terrain_params(cfg)
    out = prepare_dir(cfg["dataset"], cfg["force"])
    ds = synthdata.build_dataset(cfg["seed"], storm, cfg["rows"], cfg["cols"], cfg["cell_size"], terrain=terr)
    synthdata.save_dataset(ds, out)
    print(out / "manifest.json")
    return EXIT_OK


def cmd_features(cfg) -> int:
    for k in ("dem", "landuse", "pipes"):
        if not cfg[k]:
            raise config.ConfigError(f"features needs --{k}")
    dem = read_grid(cfg["dem"])
    land = terrain.read_landuse_csv(cfg["landuse"], dem)
    pipes = terrain.read_pipes_csv(cfg["pipes"])
    fs = terrain.derive_all(dem, land, pipes, terrain_params(cfg))
    out = prepare_dir(cfg["out"], cfg["force"])
    for fid, g in fs.channels:
        write_grid(g, out / f"{fid}.asc")
    write_resolved(cfg, out)
    print(out)
    return EXIT_OK


def cmd_train(cfg) -> int:
    check_kinds(cfg)
    tcfg = train_config(cfg)
    ids = feature_ids(cfg)
    ckpt = checkpoint_path(cfg)
    if ckpt.exists() and not cfg["force"]:
        raise OutputExists(f"{ckpt} exists (use --force to overwrite)")
    ds = load(cfg)
    tr, _ = trainer.build_sets(ds, tcfg, ids)
    spec = trainer.model_spec_for(cfg["cnn"], cfg["rnn"], tr, **model_kw(cfg))
    model = trainer.assemble_hybrid(spec, trainer.sub_seed(tcfg.seed, "init"))

    def progress(epoch, loss, _model):
        log.info("epoch %d: mean loss %.6g", epoch, loss)

    res = trainer.train(model, tr, tcfg, progress)
    out = Path(cfg["out"])
    write_resolved(cfg, out)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    save_model(model, ckpt, {"format_version": CHECKPOINT_FORMAT, "train": asdict(tcfg),
                             "features": list(ids), "rain_scale": tr.rain_scale,
                             "dataset_seed": ds.seed, "loss_trace": res.loss_trace})
    trainer.write_loss_trace(res.loss_trace, out / "loss.csv")
    print(ckpt)
    return EXIT_OK


def _event_rows(test_set, preds) -> list[dict]:
    """Per-event metrics; dynamic runs pool the steps of each event."""
    groups: dict[int, list[int]] = {}
    for i, s in enumerate(test_set.samples):
        groups.setdefault(s.event, []).append(i)
    rows = []
    for ev, idx in sorted(groups.items()):
        ss = [test_set.samples[i] for i in idx]
        series = metrics.pooled([s.target for s in ss], [preds[i] for i in idx], [s.mask for s in ss])
        rows.append({"event": f"{ev:03d}", **trainer._safe_metrics(series)})
    return rows


def write_metric_table(rows, pooled, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("event",) + metrics.METRIC_NAMES)
        for r in rows + [{"event": "pooled", **pooled}]:
            w.writerow([r["event"]] + [repr(float(r[m])) for m in metrics.METRIC_NAMES])


def cmd_eval(cfg) -> int:
    ds = load(cfg)
    model, _, tcfg, _, te = load_trained(cfg, ds)
    out = Path(cfg["out"])
    rep = trainer.evaluate(model, te, tcfg.batch_size, scatter_dir=out / "scatter")
    write_metric_table(_event_rows(te, rep.predictions), rep.pooled, out / "eval_metrics.csv")
    metrics.write_return_period_csv(rep.per_return_period, out / "eval_by_return_period.csv")
    write_resolved(cfg, out)
    log.info("pooled test metrics: %s", rep.pooled)
    print(out / "eval_metrics.csv")
    return EXIT_OK


def cmd_predict(cfg) -> int:
    ds = load(cfg)
    model, meta, tcfg, tr, _ = load_trained(cfg, ds)
    by_index = {ev.index: ev for ev in ds.events}
    if cfg["event"] not in by_index:
        raise synthdata.DatasetError(f"no event {cfg['event']} in {cfg['dataset']}")
    ev = by_index[cfg["event"]]
    x = ds.features.array(tr.feature_ids)
    mask = ~ds.features.shared_mask
    samples = trainer.event_samples(ev, x, mask, tr.rain_scale, tcfg.mode)
    preds = trainer.predict_samples(model, samples, tcfg.batch_size)
    out = Path(cfg["out"]) / f"predict_{ev.index:03d}"
    out.mkdir(parents=True, exist_ok=True)
    for s, p in zip(samples, preds):
        name = "maxH.asc" if s.step < 0 else f"depth_{s.step:03d}.asc"
        write_grid(ds.dem.with_values(np.where(mask, p, 0.0), ~mask | ds.dem.nodata), out / name)
    write_resolved(cfg, Path(cfg["out"]))
    print(out)
    return EXIT_OK


def cmd_benchmark(cfg) -> int:
    tcfg = train_config(cfg)
    ids = feature_ids(cfg)
    out = Path(cfg["out"])
    cache = out / "checkpoints"
    if cfg["force"] and cache.exists():
        shutil.rmtree(cache)
    ds = load(cfg)
    tr, te = trainer.build_sets(ds, tcfg, ids)
    reports = trainer.benchmark_matrix(tr, te, tcfg, model_kw(cfg), ALL_COMBOS, cache, out)
    write_resolved(cfg, out)
    for m, combo in trainer.best_markers(reports).items():
        log.info("best %s: %s", m, combo)
    print(out / "benchmark.csv")
    return EXIT_OK


def cmd_optimize(cfg) -> int:
    check_kinds(cfg)
    tcfg = train_config(cfg, epochs=cfg["bo_epochs"])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    ledger_path = out / "bo_ledger.jsonl"
    if cfg["force"] and ledger_path.exists():
        ledger_path.unlink()
    ds = load(cfg)
    objective = bayesopt.make_training_objective(ds, tcfg, model_kw(cfg), cfg["cnn"], cfg["rnn"],
                                                 cfg["bo_val_fraction"])
    try:
        best, ledger = bayesopt.optimize(objective, cfg["bo_iterations"], cfg["seed"], cfg["bo_initial"],
                                         cfg["bo_lambda"], cfg["bo_noise"], cfg["bo_candidates"],
                                         cfg["bo_fixed_count"], ledger_path)
    except ValueError as exc:
        if isinstance(exc, DATA_ERRORS + CONFIG_ERRORS):
            raise
        raise config.ConfigError(f"{ledger_path}: {exc}") from None
    bayesopt.write_reports(ledger, out)
    write_resolved(cfg, out)
    log.info("incumbent: %s", ",".join(best.ids) if best else "none")
    print(ledger_path)
    return EXIT_OK


COMMANDS = {
    "synth": (cmd_synth, "generate a synthetic flood dataset"),
    "features": (cmd_features, "derive the 14 normalized feature rasters"),
    "train": (cmd_train, "train one hybrid model"),
    "eval": (cmd_eval, "evaluate a checkpoint on the test split"),
    "predict": (cmd_predict, "write predicted depth rasters for one event"),
    "benchmark": (cmd_benchmark, "train and evaluate all 12 combinations"),
    "optimize": (cmd_optimize, "Bayesian feature-subset search"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="floodfusion", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, text) in COMMANDS.items():
        sp = sub.add_parser(name, help=text)
        sp.add_argument("--config", help="key = value configuration file")
        sp.add_argument("-q", "--quiet", action="store_true", help="log warnings only")
        for k, key in config.SCHEMA.items():
            flag = "--" + k.replace("_", "-")
            if k == "force":
                sp.add_argument(flag, dest=k, action="store_const", const="true", default=None, help=key.help)
            else:
                sp.add_argument(flag, dest=k, default=None, help=key.help)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, stream=sys.stderr,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s", force=True)
    func = COMMANDS[args.command][0]
    try:
        file_values = config.parse_file(args.config) if args.config else {}
        overrides = {k: getattr(args, k) for k in config.SCHEMA}
        cfg = config.resolve(file_values, overrides)
        log.info("resolved config:\n%s", config.dump(cfg).rstrip())
        return func(cfg)
    except CONFIG_ERRORS as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except NUMERIC_ERRORS as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERIC
    except DATA_ERRORS as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
