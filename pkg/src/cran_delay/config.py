"""INI run configuration: [cluster], [solver] and [experiment] sections.

Values are plain ``key = value`` text. Vectors are comma separated, matrices
use ``;`` between rows (``L = 1, 0.1; 0.1, 1``). Any key can be overridden
from the environment as CRAN_DELAY__<SECTION>__<KEY>.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field

import numpy as np

from .model import ClusterConfig
from .sim import ExperimentConfig, Multipliers, TuneResult

ENV_PREFIX = "CRAN_DELAY__"
EXPERIMENT_TYPES = ("average", "finite", "pareto")

CLUSTER_KEYS = {
    "n": int, "W": float, "tau": float, "sigma2": float, "C_tot": float, "L": "matrix",
    "p0": "vector", "p_max": "vector", "lam": "vector", "beta": "vector", "seed": int,
    "p_peak": "vector", "fading_scale": float,
}
SOLVER_KEYS = {"Q_max": float, "crosslink": bool, "c_inf_mode": str}
EXPERIMENT_KEYS = {
    "type": str, "policies": "words", "horizon": str, "T": int, "mu": float, "trials": int,
    "seed_base": int, "sweep_name": str, "sweep_values": "vector", "C_tot": float,
    "power_target": "vector", "pilot_T": int, "pilot_trials": int, "tune_K": int,
    "tune_tol": float, "tune_corrections": int, "eps": float, "burn_in": int, "threads": int,
    "beta_grid": "matrix", "gamma": float, "mu_power": "vector", "trace": bool,
    "trace_T": int,
}
SECTIONS = {"cluster": CLUSTER_KEYS, "solver": SOLVER_KEYS, "experiment": EXPERIMENT_KEYS}


class ConfigError(ValueError):
    pass


def _parse(kind, text: str, where: str):
    text = text.strip()
    try:
        if kind == "vector":
            vals = [float(v) for v in text.split(",") if v.strip()]
            return vals[0] if len(vals) == 1 else np.array(vals)
        if kind == "matrix":
            return np.array([[float(v) for v in row.split(",")]
                             for row in text.split(";") if row.strip()])
        if kind == "words":
            return tuple(w.strip() for w in text.split(",") if w.strip())
        if kind is bool:
            low = text.lower()
            if low not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                raise ValueError(text)
            return low in ("1", "true", "yes", "on")
        if kind is int:
            return int(float(text)) if float(text).is_integer() else int(text)
        return kind(text)
    except ValueError as exc:
        raise ConfigError(f"{where}: cannot parse {text!r}") from exc


def _fmt(value) -> str:
    if isinstance(value, (tuple, list)) and value and isinstance(value[0], str):
        return ", ".join(value)
    arr = np.asarray(value)
    if arr.ndim == 2:
        return "; ".join(", ".join(repr(float(v)) for v in row) for row in arr)
    if arr.ndim == 1:
        return ", ".join(repr(float(v)) for v in arr)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class RunConfig:
    """Parsed configuration plus the raw text sections it came from."""

    cluster: ClusterConfig
    experiment: ExperimentConfig
    kind: str = "average"
    beta_grid: np.ndarray | None = None
    fixed: Multipliers | None = None
    trace: bool = False
    trace_T: int | None = None
    raw: dict = field(default_factory=dict)

    def fixed_tuning(self) -> dict | None:
        """Pre-tuned map for every point when the config pins the multipliers."""
        if self.fixed is None:
            return None
        exp = self.experiment
        count = len(self.beta_grid) if self.kind == "pareto" else \
            max(len(exp.sweep_values), 1)
        labels = {"average": exp.policies, "finite": ("discounted", "average_reward"),
                  "pareto": ("joint",)}[self.kind]
        res = TuneResult(self.fixed, np.nan, np.full(self.cluster.n, np.nan), np.nan, 0,
                         True, True)
        return {(i, k): res for i in range(count) for k in labels}


def read_sections(text: str | None = None, path=None) -> dict:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    if path is not None:
        if not os.path.isfile(path):
            raise ConfigError(f"config file not found: {path}")
        parser.read(path)
    if text is not None:
        parser.read_string(text)
    raw = {s: dict(parser[s]) for s in parser.sections()}
    for s in raw:
        if s not in SECTIONS:
            raise ConfigError(f"unknown section [{s}]")
    return raw


def apply_env(raw: dict, environ=None) -> dict:
    environ = os.environ if environ is None else environ
    out = {s: dict(v) for s, v in raw.items()}
    for name, value in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        parts = name[len(ENV_PREFIX):].split("__")
        if len(parts) != 2:
            raise ConfigError(f"{name}: expected {ENV_PREFIX}<SECTION>__<KEY>")
        section = parts[0].lower()
        keys = SECTIONS.get(section)
        if keys is None:
            raise ConfigError(f"{name}: unknown section {section!r}")
        match = {k.lower(): k for k in keys}.get(parts[1].lower())
        if match is None:
            raise ConfigError(f"{name}: unknown key {parts[1]!r}")
        out.setdefault(section, {})[match] = value
    return out


def build(raw: dict) -> RunConfig:
    vals = {}
    for section, keys in SECTIONS.items():
        vals[section] = {}
        for key, text in raw.get(section, {}).items():
            if key not in keys:
                raise ConfigError(f"[{section}] unknown key {key!r}")
            vals[section][key] = _parse(keys[key], text, f"[{section}] {key}")
    cl, so, ex = vals["cluster"], vals["solver"], vals["experiment"]
    try:
        cluster = ClusterConfig(**cl)
        kind = ex.pop("type", "average")
        if kind not in EXPERIMENT_TYPES:
            raise ConfigError(f"[experiment] type must be one of {EXPERIMENT_TYPES}")
        beta_grid = ex.pop("beta_grid", None)
        gamma = ex.pop("gamma", None)
        mu_power = ex.pop("mu_power", 0.0)
        trace = ex.pop("trace", False)
        trace_T = ex.pop("trace_T", None)
        if "sweep_values" in ex:
            ex["sweep_values"] = tuple(np.atleast_1d(ex["sweep_values"]).tolist())
        if kind == "finite":
            ex.setdefault("horizon", "geometric")
            ex.setdefault("policies", ("discounted", "fixed_power"))
            ex.setdefault("sweep_name", "mu")
        if kind == "pareto" and beta_grid is None:
            raise ConfigError("[experiment] pareto runs need beta_grid")
        experiment = ExperimentConfig(cluster=cluster, **so, **ex)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc
    fixed = None
    if gamma is not None:
        fixed = Multipliers(float(gamma), mu_power)
    return RunConfig(cluster, experiment, kind, beta_grid, fixed, trace, trace_T, raw)


def load(path=None, text: str | None = None, environ=None) -> RunConfig:
    return build(apply_env(read_sections(text, path), environ))


def dump(raw: dict) -> str:
    lines = []
    for section in SECTIONS:
        if section not in raw:
            continue
        lines.append(f"[{section}]")
        lines.extend(f"{k} = {v}" for k, v in raw[section].items())
        lines.append("")
    return "\n".join(lines)


def override(raw: dict, section: str, key: str, value) -> dict:
    out = {s: dict(v) for s, v in raw.items()}
    out.setdefault(section, {})[key] = _fmt(value)
    return out


# --- tuned multiplier files -------------------------------------------------------

def write_tuned(path, entries: dict) -> None:
    """Write {(point, policy): TuneResult} as INI sections [point.<i>.<policy>]."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for (i, label), t in sorted(entries.items(), key=lambda kv: (kv[0][0], kv[0][1])):
        m = t.mults
        parser[f"point.{i}.{label}"] = {
            "gamma": repr(float(m.gamma)),
            "mu_power": _fmt(np.atleast_1d(np.asarray(m.mu_power, float))),
            "p_fixed": "none" if m.p_fixed is None else
            _fmt(np.atleast_1d(np.asarray(m.p_fixed, float))),
            "usage": repr(float(t.usage)),
            "power": _fmt(np.atleast_1d(np.asarray(t.power, float))),
            "mean_Q": repr(float(t.mean_Q)),
            "evaluations": str(int(t.evaluations)),
            "converged": _fmt(bool(t.converged)),
            "feasible": _fmt(bool(t.feasible)),
        }
    with open(path, "w") as fh:
        parser.write(fh)


def read_tuned(path) -> dict:
    if not os.path.isfile(path):
        raise ConfigError(f"tuned multiplier file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    parser.read(path)
    out = {}
    for name in parser.sections():
        try:
            _, idx, label = name.split(".", 2)
            sec = parser[name]
            vec = lambda k: np.array([float(v) for v in sec[k].split(",")])
            p_fixed = None if sec["p_fixed"].strip() == "none" else vec("p_fixed")
            mults = Multipliers(float(sec["gamma"]), vec("mu_power"), p_fixed)
            out[(int(idx), label)] = TuneResult(
                mults, float(sec["usage"]), vec("power"), float(sec["mean_Q"]),
                int(sec["evaluations"]), _parse(bool, sec["converged"], name),
                _parse(bool, sec["feasible"], name))
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"{path}: malformed section [{name}]") from exc
    return out
