"""Command-line pipeline: synthesize, certify, simulate, compare, report.

Numeric settings come from a YAML config (see ``refmpc.bench.config``);
flags only override. Every command writes a ``manifest_<command>.json``
next to its outputs that lists inputs, outputs, versions and wall time.
Wall-clock numbers live only in the manifest so that the other outputs are
byte-identical across runs with the same config and seed.

Exit codes: 0 success, 2 infeasible problem, 3 invalid input or config.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import certify as cf
from . import nmpc
from . import synthesis as syn
from .bench import config as bc
from .bench.harness import horizon_sweep, run_comparison, write_plot_data
from .bench.scenarios import ControllerSpec, GenerationFailed, Scenario
from .model import EmptyFeasibleSet

log = logging.getLogger("refmpc")

EXIT_INFEASIBLE = 2
EXIT_CONFIG = 3


class UsageError(Exception):
    pass


def _setup_logging():
    level = os.environ.get("REFMPC_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def _split_timing(obj, prefix="", acc=None):
    """Remove ``*wall_time`` entries from nested dicts; return them flattened."""
    acc = {} if acc is None else acc
    if isinstance(obj, dict):
        for k in list(obj):
            if k.endswith("wall_time"):
                acc[prefix + k] = obj.pop(k)
            else:
                _split_timing(obj[k], f"{prefix}{k}.", acc)
    return acc


def _dump(path: Path, data):
    with open(path, "w") as fh:
        json.dump(data, fh, indent=1, sort_keys=True, default=_json_default)


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"cannot serialize {type(o).__name__}")


class Run:
    """Collects the manifest of one command."""

    def __init__(self, args, command):
        self.command = command
        self.args = args
        self.out = Path(args.out)
        self.t0 = time.perf_counter()
        self.inputs: list[str] = []
        self.outputs: list[str] = []
        self.timings: dict = {}
        self.seed = args.seed

    def write_json(self, name, data):
        data = json.loads(json.dumps(data, default=_json_default))
        self.timings.update(_split_timing(data, f"{name}:"))
        path = self.out / name
        _dump(path, data)
        self.outputs.append(str(path))
        return path

    def finish(self):
        manifest = {
            "command": self.command, "config": getattr(self.args, "config", None), "seed": self.seed,
            "workers": self.args.workers, "inputs": self.inputs, "outputs": sorted(self.outputs),
            "versions": {"refmpc": __version__, "numpy": np.__version__, "python": platform.python_version()},
            "wall_time": time.perf_counter() - self.t0, "timings": self.timings,
        }
        _dump(self.out / f"manifest_{self.command}.json", manifest)


# --------------------------------------------------------------------------
# shared loading


def _config(args) -> dict:
    if args.config is None:
        if getattr(args, "model", None) is None:
            raise UsageError("either --config or --model is required")
        raw = {"model": args.model}
        if args.model in ("cstr", "car", "double-integrator", "cubic-toy") and bc.bundled(args.model).exists():
            return _override(bc.load_config(args.model), args)
        return _override(bc.from_dict(raw), args)
    return _override(bc.load_config(args.config), args)


def _override(cfg, args):
    if getattr(args, "model", None):
        cfg["model"] = args.model
    if getattr(args, "mode", None):
        cfg["synthesis"]["mode"] = args.mode
    if args.seed is not None:
        cfg["seed"] = args.seed
    bc.validate(cfg)
    return cfg


def _load_ingredients(args, run: Run, model):
    ing = syn.TerminalIngredients.load(_ingredients_path(args, run), model)
    if ing.model_name and ing.model_name != model.name:
        raise UsageError(f"ingredients were synthesized for {ing.model_name!r}, config model is {model.name!r}")
    return ing


def _ingredients_path(args, run: Run) -> Path:
    p = Path(args.ingredients) if getattr(args, "ingredients", None) else run.out / "ingredients.json"
    if not p.exists():
        raise UsageError(f"ingredients file {p} not found (run synthesize first)")
    run.inputs.append(str(p))
    return p


def _certificate(run: Run):
    p = run.out / "certificate.json"
    if not p.exists():
        return None
    run.inputs.append(str(p))
    with open(p) as fh:
        return json.load(fh)


# --------------------------------------------------------------------------
# commands


def cmd_synthesize(args) -> int:
    cfg = _config(args)
    run = Run(args, "synthesize")
    run.seed = cfg["seed"]
    run.out.mkdir(parents=True, exist_ok=True)
    model = bc.model_from(cfg)
    Q, R = bc.weights(cfg, model)
    s = cfg["synthesis"]
    ing = syn.synthesize(model, s["mode"], Q, R, float(s["epsilon"]), grid=bc.grid_from(cfg),
                         box_mode=s.get("box_mode", "box"), screen=s.get("screen"), seed=cfg["seed"])
    r = model.sample_box.grid(sorted(model.parameterization(ing.time_domain).depends_on), 10)
    r = r[model.Z_r.contains(r)]
    lam = syn.lambda_max(ing, r)
    run.write_json("ingredients.json", ing.to_json())
    run.write_json("synthesis.json", {"model": model.name, "mode": s["mode"], "p": ing.p,
                                      "lambda_max": lam, "audit": ing.audit})
    print(f"{model.name} {s['mode']}: p={ing.p} blocks={ing.audit.get('blocks')} max lambda_max(P_f)={lam:.4g}")
    run.finish()
    return 0


def cmd_certify(args) -> int:
    cfg = _config(args)
    run = Run(args, "certify")
    run.seed = cfg["seed"]
    model = bc.model_from(cfg)
    ing = _load_ingredients(args, run, model)
    c = cfg["certify"]
    spec = cf.SamplingSpec(per_pair=int(c["per_pair"]), grid=c.get("grid"), random_pairs=c.get("random_pairs"),
                           seed=int(cfg["seed"]), workers=max(1, args.workers))
    rep = cf.certify_alpha(ing, model, spec, int(c["sweep_density"]), int(c["taylor_samples"]),
                           int(c["iterations"]), float(c["rel_tol"]), bool(c["use_sampling"]))
    if c.get("alpha") is not None:
        # an explicitly configured alpha is verified by sampling, never trusted
        res = cf.alpha_decrease_sampling(ing, model, float(c["alpha"]), spec)
        if not res.passed:
            print(f"configured alpha={c['alpha']} fails the sampled decrease check "
                  f"(worst {res.worst_decrease:.3e}); keeping alpha={rep.alpha:.6g}")
        else:
            rep.alpha = min(float(c["alpha"]), rep.alpha2)
            ing.alpha = rep.alpha
    rob = c.get("robust")
    if rob:
        N = int(rob.get("N", 10))
        w = rob.get("w_hat", "certified")
        samples = int(rob.get("samples", 100_000))
        first = cf.robust_certificate(ing, model, 0.0 if w == "certified" else float(w), N, rep,
                                      samples=samples, seed=int(cfg["seed"]))
        if w == "certified":
            cf.robust_certificate(ing, model, first["w_bound"], N, rep, samples=samples, seed=int(cfg["seed"]))
    run.write_json("ingredients.json", ing.to_json())
    run.write_json("certificate.json", rep.to_json())
    print(rep.to_text())
    run.finish()
    return 0


def _scenario(cfg, ing, cert, steps=None) -> Scenario:
    sc = cfg["scenario"]
    if sc is None:
        raise UsageError("config has no scenario section")
    model = bc.model_from(cfg)
    ref = bc.reference_from(sc["reference"], model)
    x0 = ref.x[0] + np.asarray(sc.get("x0_offset") or np.zeros(model.n), float)
    rob = (cert or {}).get("robust") or {}
    w = sc.get("w_hat", 0.0)
    if w == "certified":
        if "w_bound" not in rob:
            raise UsageError("w_hat: certified needs a robust certificate (run certify with a robust section)")
        w = rob["w_bound"]
    tight = np.asarray(rob["schedule"], float) if "schedule" in rob else None
    if tight is not None and rob.get("w_hat", 0.0) > 0:
        # the stored schedule is linear in the disturbance bound it was computed for
        tight = tight * (float(w) / rob["w_hat"])
    n_steps = int(sc.get("steps", 100)) if steps is None else int(steps)
    if not ref.periodic:
        n_steps = min(n_steps, len(ref) - max(c.get("N", 1) for c in sc["controllers"]) - 1)
    return Scenario(sc.get("name", cfg["model"]), model, ref, x0, bc.controllers_from(sc), n_steps,
                    float(w), int(cfg["seed"]), ing, tight, rob.get("alpha_w"))


def _load_for_sim(args, run):
    cfg = _config(args)
    run.seed = cfg["seed"]
    model = bc.model_from(cfg)
    ing = _load_ingredients(args, run, model)
    if ing.alpha is None:
        raise UsageError("ingredients carry no alpha (run certify first)")
    return cfg, ing, _certificate(run)


def cmd_simulate(args) -> int:
    run = Run(args, "simulate")
    cfg, ing, cert = _load_for_sim(args, run)
    scen = _scenario(cfg, ing, cert, args.steps)
    specs = {c.label: c for c in scen.controllers}
    label = args.controller or scen.controllers[0].label
    if label not in specs:
        raise UsageError(f"unknown controller {label!r}; scenario has {', '.join(specs)}")
    from .bench.harness import run_controller

    tr = run_controller(scen, specs[label])
    run.out.mkdir(parents=True, exist_ok=True)
    path = run.out / f"trace_{label}.csv"
    tr.to_csv(path, timing=False)
    run.outputs.append(str(path))
    run.write_json(f"summary_{label}.json", tr.summary(timing=False))
    run.timings[f"{label}:mean_solve_time"] = tr.summary()["mean_solve_time"]
    print(f"{label}: steps={len(tr)} total cost={tr.total_cost:.6g} terminated={tr.terminated}")
    run.finish()
    return EXIT_INFEASIBLE if tr.terminated and "Infeasible" in tr.terminated else 0


def cmd_compare(args) -> int:
    run = Run(args, "compare")
    cfg, ing, cert = _load_for_sim(args, run)
    scen = _scenario(cfg, ing, cert, args.steps)
    rep = run_comparison(scen, workers=max(1, args.workers))
    specs = {c.label: c for c in scen.controllers}
    base = rep.metrics[rep.baseline]["total_cost"]
    for sw in (cfg["scenario"].get("sweeps") or []) if not args.no_sweep else []:
        s = specs[sw["controller"]]
        s = ControllerSpec(s.label, s.scheme, s.N, int(sw.get("max_iter", s.max_iter)), s.options)
        rep.sweeps[s.label] = horizon_sweep(scen, s, sw["horizons"], base, float(sw.get("tolerance", 0.2)))
    files = rep.save(run.out)
    run.outputs += [str(f) for f in files]
    run.timings.update({f"compare:{k}": v for k, v in rep.timings().items()})
    print(rep.table())
    for lab, sw in rep.sweeps.items():
        print(f"{lab}: parity horizon {sw['parity_horizon']} (costs {sw['costs']})")
    run.finish()
    return 0


def cmd_report(args) -> int:
    run = Run(args, "report")
    traces = {}
    for p in args.trace:
        path = Path(p)
        if not path.exists():
            raise UsageError(f"trace file {path} not found")
        try:
            traces[path.stem.removeprefix("trace_")] = nmpc.ClosedLoopTrace.from_csv(path)
        except (ValueError, KeyError, IndexError) as exc:
            raise UsageError(f"{path}: not a trace file ({exc})") from None
        run.inputs.append(str(path))
    run.out.mkdir(parents=True, exist_ok=True)
    rows = {lab: tr.summary(timing=False) for lab, tr in traces.items()}
    run.write_json("report.json", rows)
    write_plot_data(traces, run.out / "plot_data.csv")
    run.outputs.append(str(run.out / "plot_data.csv"))
    for lab, s in rows.items():
        print(f"{lab:<16} steps={s['steps']:<6} total cost={s['total_cost']:.6g}")
    run.finish()
    return 0


COMMANDS = {
    "synthesize": cmd_synthesize,
    "certify": cmd_certify,
    "simulate": cmd_simulate,
    "compare": cmd_compare,
    "report": cmd_report,
}


def parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="refmpc", description="Reference-generic terminal ingredients for tracking MPC.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file or bundled config name")
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--seed", type=int, default=None, help="random seed (overrides the config)")
    common.add_argument("--workers", type=int, default=os.cpu_count() or 1, help="worker threads")
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("synthesize", parents=[common], help="compute terminal ingredients")
    s.add_argument("--model", help="registered model name (overrides the config)")
    s.add_argument("--mode", choices=syn.MODES)
    c = sub.add_parser("certify", parents=[common], help="compute the terminal set size")
    c.add_argument("--model")
    c.add_argument("--ingredients", help="ingredients JSON (default OUT/ingredients.json)")
    for name in ("simulate", "compare"):
        q = sub.add_parser(name, parents=[common], help=f"{name} closed loops of the config scenario")
        q.add_argument("--model")
        q.add_argument("--ingredients")
        q.add_argument("--steps", type=int, default=None)
        if name == "simulate":
            q.add_argument("--controller", help="controller label (default: first)")
        else:
            q.add_argument("--no-sweep", action="store_true", help="skip the horizon sweeps")
    r = sub.add_parser("report", parents=[common], help="summaries and plot data from trace files")
    r.add_argument("trace", nargs="+")
    return p


def main(argv=None) -> int:
    _setup_logging()
    try:
        args = parser().parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else 0
    try:
        return COMMANDS[args.command](args)
    except (UsageError, bc.ConfigError, GenerationFailed, EmptyFeasibleSet, nmpc.ConfigError, KeyError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_CONFIG
    except (syn.Infeasible, nmpc.Infeasible, cf.ZeroSlack) as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE


if __name__ == "__main__":
    sys.exit(main())
