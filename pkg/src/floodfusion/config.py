"""Run configuration: a flat ``key = value`` file plus command-line overrides.

Every tunable default of the pipeline has a key here. Unknown keys are
rejected; ``seed`` has no default and must be given.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable


class ConfigError(ValueError):
    pass


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _opt_int(s: str):
    return None if s.strip().lower() in ("", "none") else int(s)


def _ids(s: str) -> tuple[str, ...]:
    return tuple(x.strip() for x in s.split(",") if x.strip())


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], Any]
    default: Any
    help: str


MISSING = object()

SCHEMA: dict[str, Key] = {
    "seed": Key(int, MISSING, "run seed (required)"),
    # paths
    "dataset": Key(str, "dataset", "dataset directory"),
    "out": Key(str, "runs", "output directory"),
    "checkpoint": Key(str, "", "model checkpoint (eval/predict); default <out>/model.ckpt"),
    "event": Key(int, 0, "event index for predict"),
    "dem": Key(str, "", "DEM raster for the features command"),
    "landuse": Key(str, "", "land-use CSV for the features command"),
    "pipes": Key(str, "", "pipe CSV for the features command"),
    # world and storms
    "rows": Key(int, 64, "grid rows"),
    "cols": Key(int, 64, "grid columns"),
    "cell_size": Key(float, 10.0, "cell size in metres"),
    "idf_a1": Key(float, 10.0, "IDF A1 (mm/min^(1-n))"),
    "idf_c": Key(float, 0.8, "IDF C"),
    "idf_b": Key(float, 10.0, "IDF b (min)"),
    "idf_n": Key(float, 0.7, "IDF n"),
    "peak_ratio": Key(float, 0.4, "Chicago storm peak position"),
    "rain_step": Key(int, 10, "hyetograph step in minutes"),
    # terrain
    "focal_radius": Key(float, 100.0, "focal-mean radius in metres"),
    "flacc_cutoff": Key(float, 1.0, "FLACC cutoff in hectares"),
    "flimp_cutoff": Key(float, 35.0, "FLIMP cutoff in hectares"),
    "flslo_cutoff": Key(float, 10.0, "FLSLO cutoff in hectares"),
    # model
    "cnn": Key(str, "DeepLabv3plus", "CNN skeleton"),
    "rnn": Key(str, "LSTM", "recurrent encoder"),
    "base_width": Key(int, 16, "CNN width unit"),
    "rnn_hidden": Key(int, 64, "recurrent hidden size"),
    "rnn_layers": Key(int, 2, "recurrent layers"),
    "fusion_channels": Key(int, 16, "rainfall channels at the fusion junction"),
    "head": Key(str, "gap_fc", "output head: gap_fc or conv1x1"),
    "dropout": Key(float, 0.2, "dropout probability in the recurrent encoder"),
    "features": Key(_ids, ("DEM", "ASP", "SDEPTH", "TWI", "IMP_C", "FLIMP", "PIPE"),
                    "comma-separated feature ids"),
    # training
    "epochs": Key(int, 100, "training epochs"),
    "batch_size": Key(int, 8, "mini-batch size"),
    "lr": Key(float, 0.01, "Adam learning rate"),
    "clip": Key(float, 1.0, "gradient-norm clip"),
    "clip_mode": Key(str, "per_array", "per_array or global"),
    "split_fraction": Key(float, 0.9, "training fraction of events"),
    "mode": Key(str, "static", "static (maxH) or dynamic (per-step depth)"),
    # optimization
    "bo_iterations": Key(int, 100, "BO trial budget"),
    "bo_initial": Key(int, 10, "random trials before the GP"),
    "bo_lambda": Key(float, 0.5, "Hamming kernel length-scale"),
    "bo_noise": Key(float, 1e-4, "GP observation noise"),
    "bo_candidates": Key(int, 256, "random candidates per acquisition"),
    "bo_fixed_count": Key(_opt_int, None, "fix the subset size (none = free)"),
    "bo_epochs": Key(int, 20, "training epochs per BO trial"),
    "bo_val_fraction": Key(float, 0.8, "fit fraction of the training events inside a BO trial"),
    "force": Key(_bool, False, "overwrite a non-empty output directory"),
}


def parse_file(path) -> dict[str, str]:
    """Raw ``key = value`` pairs; ``#`` starts a comment."""
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    for no, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{no}: expected 'key = value'")
        k, v = (s.strip() for s in line.split("=", 1))
        if k not in SCHEMA:
            raise ConfigError(f"{path}:{no}: unknown key {k!r}")
        out[k] = v
    return out


def resolve(file_values: dict[str, str] | None = None,
            overrides: dict[str, str] | None = None) -> dict[str, Any]:
    """Defaults, then file values, then overrides; every value parsed and checked."""
    raw = dict(file_values or {})
    for k, v in (overrides or {}).items():
        if k not in SCHEMA:
            raise ConfigError(f"unknown key {k!r}")
        if v is not None:
            raw[k] = v
    cfg = {}
    for k, key in SCHEMA.items():
        if k in raw:
            try:
                cfg[k] = key.parse(raw[k]) if isinstance(raw[k], str) else raw[k]
            except ValueError as exc:
                raise ConfigError(f"{k}: {exc}") from None
        elif key.default is MISSING:
            raise ConfigError(f"missing required key {k!r}")
        else:
            cfg[k] = key.default
    return cfg


def _fmt(v) -> str:
    if isinstance(v, tuple):
        return ",".join(v)
    if v is None:
        return "none"
    if isinstance(v, bool):
        return str(v).lower()
    return str(v)


def dump(cfg: dict[str, Any]) -> str:
    """The resolved config in file syntax; reading it back reproduces ``cfg``."""
    return "".join(f"{k} = {_fmt(cfg[k])}\n" for k in SCHEMA if k in cfg)
