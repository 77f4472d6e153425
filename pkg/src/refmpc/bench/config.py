"""Run configuration files.

A configuration is a YAML mapping with optional sections ``synthesis``,
``certify`` and ``scenario`` next to the model name. Every numeric setting
of a benchmark lives in these files; the bundled ones sit in ``configs/``
and are addressed by stem (``car``, ``cstr``, ...).
"""

from __future__ import annotations

import copy
from pathlib import Path

import numpy as np
import yaml

from ..model import QuasiLPVModel, ReferenceTrajectory
from ..synthesis import MODES, GridSpec
from .models import REGISTRY, get_model
from .scenarios import ControllerSpec, cstr_periodic_reference, evasive_reference

CONFIG_DIR = Path(__file__).with_name("configs")


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "model": None,
    "model_params": {},
    "seed": 0,
    "synthesis": {"mode": "grid-discrete", "Q": None, "R": None, "epsilon": 0.1, "grid": None,
                  "box_mode": "box", "screen": 512},
    "certify": {"per_pair": 100, "sweep_density": 20, "taylor_samples": 100_000, "use_sampling": True,
                "iterations": 20, "rel_tol": 0.05, "grid": None, "random_pairs": None, "alpha": None,
                "robust": None},
    "scenario": None,
}


def bundled(name: str) -> Path:
    return CONFIG_DIR / f"{name}.yaml"


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path_or_name) -> dict:
    """Read a YAML file (or a bundled config by stem) and fill defaults."""
    p = Path(path_or_name)
    if not p.exists() and bundled(str(path_or_name)).exists():
        p = bundled(str(path_or_name))
    if not p.exists():
        raise ConfigError(f"config file {path_or_name} not found")
    try:
        raw = yaml.safe_load(p.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{p}: invalid YAML: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{p}: top level must be a mapping")
    cfg = from_dict(raw)
    cfg["_path"] = str(p)
    return cfg


def from_dict(raw: dict) -> dict:
    cfg = _merge(DEFAULTS, raw)
    validate(cfg)
    return cfg


def validate(cfg: dict):
    if cfg["model"] not in REGISTRY:
        raise ConfigError(f"unknown model {cfg['model']!r}; registered: {', '.join(sorted(REGISTRY))}")
    mode = cfg["synthesis"]["mode"]
    if mode not in MODES:
        raise ConfigError(f"unknown synthesis mode {mode!r}; choose one of {', '.join(MODES)}")
    sc = cfg.get("scenario")
    if sc is not None:
        if not sc.get("controllers"):
            raise ConfigError("scenario needs at least one controller")
        for c in sc["controllers"]:
            if c.get("N", 0) < 1:
                raise ConfigError(f"controller {c.get('label')}: horizon N must be >= 1")
            if c.get("scheme") not in ("QINF", "TEC", "UC", "ROBUST", "PERIODIC"):
                raise ConfigError(f"controller {c.get('label')}: unknown scheme {c.get('scheme')!r}")


def model_from(cfg: dict) -> QuasiLPVModel:
    return get_model(cfg["model"], **(cfg.get("model_params") or {}))


def weights(cfg: dict, model: QuasiLPVModel):
    s = cfg["synthesis"]

    def mat(v, dim):
        if v is None:
            return np.eye(dim)
        a = np.asarray(v, float)
        if a.ndim == 0:
            return a * np.eye(dim)
        return np.diag(a) if a.ndim == 1 else a

    return mat(s["Q"], model.n), mat(s["R"], model.m)


def grid_from(cfg: dict) -> GridSpec | None:
    g = cfg["synthesis"].get("grid")
    if g is None:
        return None
    return GridSpec({int(k): int(v) for k, v in g.items()})


def reference_from(spec: dict, model: QuasiLPVModel) -> ReferenceTrajectory:
    kind = spec.get("kind")
    params = {k: v for k, v in spec.items() if k != "kind"}
    if kind == "evasive":
        return evasive_reference(model, **params)
    if kind == "cstr-periodic":
        return cstr_periodic_reference(model, **params)
    if kind == "file":
        return ReferenceTrajectory.from_csv(params["path"], periodic=bool(params.get("periodic", False)))
    if kind == "constant":
        r = np.asarray(params["r"], float)
        steps = int(params.get("length", 1))
        return ReferenceTrajectory(np.tile(r[: model.n], (steps, 1)), np.tile(r[model.n:], (steps, 1)),
                                   h=model.h, periodic=True)
    raise ConfigError(f"unknown reference kind {kind!r}")


def controllers_from(spec: dict) -> list[ControllerSpec]:
    out = []
    for c in spec["controllers"]:
        c = dict(c)
        out.append(ControllerSpec(c.pop("label", c["scheme"]), c.pop("scheme"), int(c.pop("N")),
                                  int(c.pop("max_iter", 1)), c))
    return out
