"""Flat ``key = value`` run configuration with dot-namespaced keys.

Example::

    seed = 7
    data.n_samples = 500
    train.mode = shortcut
    sample.condition = density=0.02..0.04

Blank lines and ``#`` comments are ignored. Unknown keys are rejected.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .material import PropertySet

SWEEP_STEPS = (1, 2, 3, 4, 5, 10, 25, 50, 100, 250)

# key -> (type, default); list types hold comma-separated values
DEFAULTS = {
    "seed": (int, 0),
    "data.n_samples": (int, 500),
    "data.edge": (float, 10.0),
    "data.atoms_min": (int, 32),
    "data.atoms_max": (int, 32),
    "data.frac_A_min": (float, 0.5),
    "data.frac_A_max": (float, 0.5),
    "data.r0": (float, 3.4),
    "data.rho_max": (float, 0.036),
    "data.relax_steps": (int, 20),
    "data.step_size": (float, 0.5),
    "model.properties": (list, ["density", "frac_A"]),
    "model.layers": (int, 3),
    "model.channels": (int, 8),
    "model.hidden": (int, 32),
    "model.prop_dim": (int, 16),
    "model.cutoff": (float, 4.5),
    "model.n_norm": (float, 15.0),
    "model.step_size_conditioned": (bool, False),
    # toy cells are small, so a wider position schedule brings the t = 1 marginal close to the uniform prior
    "schedule.sigma_max_X": (float, 3.0),
    "schedule.sigma_max_E": (float, 1.5),
    "train.mode": (str, "sde"),
    "train.elem_weight": (float, 0.5),
    "train.shortcut_fraction": (float, 0.25),
    "train.n_base": (int, 128),
    "train.batch_size": (int, 8),
    "train.lr": (float, 1e-3),
    "train.steps": (int, 1000),
    "train.checkpoint_every": (int, 500),
    "train.grad_clip": (float, 0.0),
    "sample.n_s": (int, 128),
    "sample.mode": (str, "sde"),
    "sample.n_samples": (int, 100),
    "sample.edge": (float, 10.0),
    "sample.rho_max": (float, 0.036),
    "sample.condition": (str, ""),
    "sample.batch_size": (int, 16),
    "sweep.steps": (list, [str(n) for n in SWEEP_STEPS]),
    "eval.rdf_cutoff": (float, 5.0),
    "eval.rdf_bins": (int, 100),
    "eval.adf_cutoff": (float, 3.0),
    "eval.adf_bins": (int, 180),
    "paths.dataset": (str, ""),
    "paths.checkpoint": (str, ""),
    "paths.samples": (str, ""),
    "paths.manifest": (str, ""),
    "paths.reference": (str, ""),
}


class ConfigError(ValueError):
    pass


def _convert(key, kind, raw: str):
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind is list:
            return [v.strip() for v in raw.split(",") if v.strip()]
        return kind(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind.__name__}") from None


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, list):
        return ",".join(value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config(text: str, source: str = "<config>") -> dict:
    """Defaults overlaid with the ``key = value`` lines of ``text``."""
    cfg = {k: (list(v) if isinstance(v, list) else v) for k, (_, v) in DEFAULTS.items()}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            cfg[key] = _convert(key, DEFAULTS[key][0], value)
        except ConfigError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from None
    return cfg


def load_config(path) -> dict:
    path = Path(path)
    return parse_config(path.read_text(), str(path))


def format_config(cfg: dict) -> str:
    return "".join(f"{k} = {_format(cfg[k])}\n" for k in DEFAULTS)


def write_config(cfg: dict, path) -> None:
    Path(path).write_text(format_config(cfg))


def parse_condition(spec: str, n: int, names) -> list:
    """Per-sample property targets from e.g. ``density=0.02..0.04,frac_A=0.5``.

    ``lo..hi`` spreads ``n`` targets linearly (inclusive); a single number is
    held fixed. Properties not mentioned are unavailable (null embedding).
    """
    names = list(names)
    columns = {}
    for item in filter(None, (s.strip() for s in spec.split(","))):
        if "=" not in item:
            raise ConfigError(f"condition {item!r}: expected name=value or name=lo..hi")
        name, rng = (s.strip() for s in item.split("=", 1))
        if name not in names:
            raise ConfigError(f"condition on unknown property {name!r}; model knows {names}")
        try:
            if ".." in rng:
                lo, hi = (float(v) for v in rng.split(".."))
                columns[name] = np.linspace(lo, hi, n)
            else:
                columns[name] = np.full(n, float(rng))
        except ValueError:
            raise ConfigError(f"condition {item!r}: bad number") from None
    out = []
    for i in range(n):
        out.append(PropertySet.from_dict(names, {k: v[i] for k, v in columns.items()}))
    return out
