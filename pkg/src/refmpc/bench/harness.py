"""Comparison harness: closed-loop runs of several controllers on one scenario."""

from __future__ import annotations

import csv
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import synthesis as syn
from ..certify import constraint_rows
from ..model import QuasiLPVModel
from ..nmpc import ClosedLoopTrace, MPCConfig, Scheme, simulate
from .scenarios import ControllerSpec, Scenario


def closed_loop_violation(model: QuasiLPVModel, trace: ClosedLoopTrace) -> float:
    """Largest violation of the untightened constraints by the applied pairs (0 when satisfied)."""
    if not len(trace):
        return 0.0
    rows = constraint_rows(model)
    z = np.concatenate([np.asarray(trace.x), np.asarray(trace.u)], axis=1)
    r = np.asarray(trace.r)
    lhs = z @ rows.L.T - rows.relative * (r @ rows.L.T)
    return float(max(0.0, (lhs - rows.l).max()))


def build_config(spec: ControllerSpec, scenario: Scenario) -> MPCConfig:
    scheme = Scheme(spec.scheme)
    opts = dict(spec.options)
    tightened = opts.pop("tightened", scheme == Scheme.ROBUST)
    N = spec.N
    tightening = None
    if tightened and scenario.tightening is not None:
        sched = np.asarray(scenario.tightening, float)
        if sched.shape[0] < N + 1:
            raise ValueError(f"tightening schedule covers {sched.shape[0] - 1} steps, controller {spec.label} needs {N}")
        tightening = sched[: N + 1]
    return MPCConfig(
        N=N, scheme=scheme, ingredients=scenario.ingredients, max_iter=spec.max_iter,
        tightening=tightening, alpha_w=scenario.alpha_w if tightened else None, **opts,
    )


def metrics(model: QuasiLPVModel, trace: ClosedLoopTrace, Q, R) -> dict:
    s = trace.summary()
    return {
        "total_cost": trace.total_cost,
        "state_cost": trace.state_cost(Q),
        "input_cost": trace.input_cost(R),
        "max_violation": closed_loop_violation(model, trace),
        "max_solver_violation": s["max_violation"],
        "mean_solve_time": s["mean_solve_time"],
        "max_solve_time": s["max_solve_time"],
        "steps": len(trace),
        "terminated": trace.terminated,
    }


def _ratio(a: float, b: float):
    # undefined when the baseline incurs no cost at all
    if b <= 0.0:
        return None
    return a / b


@dataclass
class ComparisonReport:
    scenario: str
    baseline: str
    metrics: dict
    ratios: dict
    traces: dict = field(default_factory=dict, repr=False)
    sweeps: dict = field(default_factory=dict)
    wall_time: float = 0.0

    def to_json(self, timing: bool = False) -> dict:
        """Report as a dict; wall-clock fields are left out unless ``timing`` is set."""
        mets = self.metrics if timing else {
            lab: {k: v for k, v in m.items() if not k.endswith("_time")} for lab, m in self.metrics.items()}
        return {"scenario": self.scenario, "baseline": self.baseline, "metrics": mets,
                "ratios": self.ratios, "sweeps": self.sweeps}

    def timings(self) -> dict:
        return {"wall_time": self.wall_time,
                **{lab: {k: v for k, v in m.items() if k.endswith("_time")} for lab, m in self.metrics.items()}}

    def table(self) -> str:
        head = f"{'controller':<14}{'total':>13}{'state':>13}{'input':>13}{'ratio':>11}{'violation':>12}"
        lines = [head]
        for lab, m in self.metrics.items():
            r = self.ratios.get(lab)
            rs = "undefined" if r is None else f"{r:.3g}"
            lines.append(f"{lab:<14}{m['total_cost']:>13.4e}{m['state_cost']:>13.4e}{m['input_cost']:>13.4e}"
                         f"{rs:>11}{m['max_violation']:>12.2e}")
        return "\n".join(lines)

    def save(self, out_dir, timing: bool = False) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        files = [out / "comparison.json", out / "comparison.csv", out / "plot_data.csv"]
        with open(files[0], "w") as fh:
            json.dump(self.to_json(timing), fh, indent=1, sort_keys=True)
        with open(files[1], "w", newline="") as fh:
            w = csv.writer(fh)
            keys = ["total_cost", "state_cost", "input_cost", "max_violation", "steps"]
            w.writerow(["controller", *keys, "ratio"])
            for lab, m in self.metrics.items():
                r = self.ratios.get(lab)
                w.writerow([lab, *[repr(m[k]) for k in keys], "" if r is None else repr(r)])
        write_plot_data(self.traces, files[2])
        for lab, tr in self.traces.items():
            files.append(out / f"trace_{lab}.csv")
            tr.to_csv(files[-1], timing=timing)
        return files


def write_plot_data(traces: dict, path):
    """Long-format ``series,t,value`` rows: stage cost and states of every trace."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["series", "t", "value"])
        for lab, tr in traces.items():
            for k in range(len(tr)):
                w.writerow([f"{lab}/stage", repr(float(tr.t[k])), repr(float(tr.stage[k]))])
                for i, v in enumerate(tr.x[k]):
                    w.writerow([f"{lab}/x{i + 1}", repr(float(tr.t[k])), repr(float(v))])


def run_controller(scenario: Scenario, spec: ControllerSpec, W=None) -> ClosedLoopTrace:
    cfg = build_config(spec, scenario)
    W = scenario.disturbances() if W is None else W
    return simulate(cfg, scenario.model, scenario.x0, scenario.reference, steps=scenario.steps, disturbances=W)


def run_comparison(scenario: Scenario, baseline: str | None = None, workers: int = 1) -> ComparisonReport:
    """Run every controller of the scenario on one shared disturbance realization."""
    t0 = time.perf_counter()
    W = scenario.disturbances()
    specs = scenario.controllers
    baseline = baseline or specs[0].label
    with ThreadPoolExecutor(max_workers=max(1, workers)) as ex:
        traces = dict(zip([s.label for s in specs], ex.map(lambda s: run_controller(scenario, s, W), specs)))
    Q, R = _weights(scenario)
    mets = {lab: metrics(scenario.model, tr, Q, R) for lab, tr in traces.items()}
    base = mets[baseline]["total_cost"]
    ratios = {lab: _ratio(m["total_cost"], base) for lab, m in mets.items()}
    return ComparisonReport(scenario.name, baseline, mets, ratios, traces, wall_time=time.perf_counter() - t0)


def _weights(scenario: Scenario):
    ing = scenario.ingredients
    if ing is not None:
        return ing.Q, ing.R
    return np.eye(scenario.model.n), np.eye(scenario.model.m)


def horizon_sweep(scenario: Scenario, spec: ControllerSpec, horizons, target_cost: float,
                  tolerance: float = 0.2) -> dict:
    """Costs of ``spec`` over increasing horizons; parity is the first N within ``tolerance`` of the target.

    Horizons are evaluated in order and the sweep stops at parity.
    """
    W = scenario.disturbances()
    costs = {}
    parity = None
    for N in horizons:
        s = ControllerSpec(spec.label, spec.scheme, int(N), spec.max_iter, dict(spec.options))
        tr = run_controller(scenario, s, W)
        c = tr.total_cost if tr.terminated is None else float("inf")
        costs[int(N)] = c
        if abs(c - target_cost) <= tolerance * target_cost:
            parity = int(N)
            break
    return {"controller": spec.label, "target": target_cost, "tolerance": tolerance, "costs": costs,
            "parity_horizon": parity, "max_tested": int(max(costs))}


# --------------------------------------------------------------------------
# offline comparison


def table1_comparison(model: QuasiLPVModel, Q, R, eps: float, modes=("grid-continuous", "convex-continuous",
                      "grid-discrete", "convex-discrete"), settings=None, sample_density: int = 10,
                      **kw) -> dict:
    """Block count, wall time and the largest terminal-cost eigenvalue of each synthesis mode.

    Infeasible modes are reported with their status instead of a value.
    Continuous-time values are reported as ``lambda_max / h`` so that they
    compare with the sampled cost.
    """
    box = model.sample_box
    dims = sorted(set(model.parameterization("discrete").depends_on) | set(model.parameterization("continuous").depends_on))
    pts = box.grid(dims, sample_density)
    pts = pts[model.Z_r.contains(pts)]
    rows = {}
    for mode in modes:
        t0 = time.perf_counter()
        try:
            ing = syn.synthesize(model, mode, Q, R, eps, settings=settings, **kw)
        except syn.SynthesisError as exc:
            rows[mode] = {"status": type(exc).__name__, "message": str(exc), "wall_time": time.perf_counter() - t0}
            continue
        lam = syn.lambda_max(ing, pts)
        if ing.time_domain == "continuous":
            lam = lam / model.h
        rows[mode] = {
            "status": "ok", "blocks": ing.audit.get("blocks"), "pairs": ing.audit.get("pairs", ing.audit.get("points")),
            "vertices": ing.audit.get("vertices"), "wall_time": time.perf_counter() - t0, "lambda_max": lam,
        }
    return {"model": model.name, "rows": rows}
