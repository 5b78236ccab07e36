"""Command-line runner: ``kflow run|calibrate|sample|oracle CONFIG``.

Exit codes: 0 all checks pass, 1 some check failed, 2 bad configuration,
3 capacity exceeded.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
import time

import numpy as np

from . import BACKEND, __version__
from .consistency import (
    CheckReport, TensorFamily, build_tensor_from_sampler, check_chapman_kolmogorov,
    check_consistency, check_feller_small_time, check_feller_space,
)
from .core import CapacityError, StateSpace, encode
from .dyadic_flow import (
    TowerEnsemble, calibrate_schedule, check_evolution, check_increment_independence,
    check_projection_consistency, check_projection_law, check_stationarity,
    convergence_diagnostic, convergence_exceedance, dyadic_level, entry_probes, probe_values,
    sample_tower,
)
from .models import (
    CoalescingMapModel, PoissonProductModel, TanakaModel, coalescence_probability,
    model_from_config, tanaka_mass_statistic,
)
from .pi_functionals import check_diagonal_property, two_point_modulus
from .presentation import (
    DenseGrid, calibrate_eps_schedule, evaluate_e, interpolate_i, present_p,
)
from .stats import (
    TAG_SEMIGROUP, TestResult, moment_match, substream, two_sample_moment_test, worker_count,
)

REPORT_SCHEMA = "kflow.report/1"
EXIT_PASS, EXIT_FAIL, EXIT_CONFIG, EXIT_CAPACITY = 0, 1, 2, 3

DEFAULTS = {
    "model": {"kind": "poisson_p2", "params": {}},
    "space": {},
    "suite": "semigroup",
    "window": [0.0, 1.0],
    "depth": 8,
    "schedule_jmax": 6,
    "samples": 10_000,
    "seed": 20261014,
    "bands": {"single": 3.0, "max": 4.0},
    "output_dir": "kflow-out",
}

SUITES = ("semigroup", "consistency", "presentation", "tower", "evolution", "increments",
          "convergence", "tanaka", "coalescing", "negative", "full")
FULL = ("semigroup", "consistency", "presentation", "tower", "evolution", "increments", "convergence")


class ConfigError(Exception):
    pass


def load_config(path: str) -> dict:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(raw) - set(DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    cfg = json.loads(json.dumps(DEFAULTS))
    for k, v in raw.items():
        if isinstance(cfg[k], dict) and isinstance(v, dict):
            cfg[k].update(v)
        else:
            cfg[k] = v
    if cfg["suite"] not in SUITES:
        raise ConfigError(f"unknown suite {cfg['suite']!r}; choose from {', '.join(SUITES)}")
    try:
        cfg["depth"] = int(cfg["depth"])
        cfg["schedule_jmax"] = int(cfg["schedule_jmax"])
        cfg["samples"] = int(cfg["samples"])
        cfg["seed"] = int(cfg["seed"])
        cfg["window"] = [float(w) for w in cfg["window"]]
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad numeric config value: {exc}") from exc
    if len(cfg["window"]) != 2 or cfg["samples"] < 10 or cfg["depth"] < 1 or cfg["schedule_jmax"] < 2:
        raise ConfigError("need a 2-element window, samples >= 10, depth >= 1 and schedule_jmax >= 2")
    model_cfg = dict(cfg["model"])
    params = dict(model_cfg.get("params", {}))
    for k, v in cfg["space"].items():
        params.setdefault(k, v)
    model_cfg["params"] = params
    try:
        cfg["_model"] = model_from_config(model_cfg)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad model config: {exc}") from exc
    return cfg


class Run:
    """Collects records and tables for one invocation."""

    def __init__(self, cfg: dict):
        self.cfg = cfg
        self.model = cfg["_model"]
        self.records: list[dict] = []
        self.tables: dict[str, list[dict]] = {}
        self.single = float(cfg["bands"].get("single", 3.0))
        self.band_max = float(cfg["bands"].get("max", 4.0))

    def add(self, rec, warning: bool = False, expect_fail: bool = False, suite: str = ""):
        d = rec.to_dict()
        d["warning"] = bool(d.get("warning", False) or warning)
        d["suite"] = suite
        if expect_fail:
            d["planted_defect"] = True
        self.records.append(d)

    @property
    def passed(self) -> bool:
        return all(r["passed"] for r in self.records if not r["warning"])

    def cell_law(self):
        return self.model.law(1) if self.model.discrete_time else self.model

    def ensemble(self, N=None, law=None):
        return TowerEnsemble(law or self.cell_law(), tuple(self.cfg["window"]),
                             N or self.cfg["depth"], self.cfg["seed"])

    def times(self):
        return [1.0, 2.0] if self.model.discrete_time else [0.25, 0.5]


def _fraction_report(name, hits, total, need):
    frac = hits / total if total else 1.0
    return CheckReport(name, 1.0 - frac, 1.0 - need, [{"within": hits, "total": total}])


def suite_semigroup(run: Run):
    model, cfg = run.model, run.cfg
    t, s = run.times()
    S = cfg["samples"]
    rng = [substream(cfg["seed"], TAG_SEMIGROUP, k) for k in range(3)]
    direct = model.sample_batch(t + s, S, rng[0])
    composed = np.matmul(model.sample_batch(t, S, rng[1]), model.sample_batch(s, S, rng[2]))
    probes = entry_probes(model.m, points=range(min(model.m, 4)))
    res = two_sample_moment_test(probe_values(direct, probes), probe_values(composed, probes),
                                 band=run.band_max, seed=cfg["seed"], name="semigroup_law")
    run.add(res, suite="semigroup")
    if model.has_oracle and not model.discrete_time:
        fam = TensorFamily.from_oracle(model, 2, [0.0, 0.25, 0.5, 0.75, 1.0])
        for n in (1, 2):
            for a in (0.25, 0.5):
                for b in (0.25, 0.5):
                    run.add(check_chapman_kolmogorov(fam, n, a, b), suite="semigroup")


def suite_consistency(run: Run):
    model, cfg = run.model, run.cfg
    if model.has_oracle and not model.discrete_time:
        max_order = 3 if model.m ** 3 <= 4096 else 2
        fam = TensorFamily.from_oracle(model, max_order, [0.25, 0.5, 1.0])
        run.add(check_consistency(fam), suite="consistency")
        for x in range(min(model.m, 3)):
            run.add(check_diagonal_property(fam, x, 0.5), suite="consistency")
        emp = build_tensor_from_sampler(model, 1, 0.5, cfg["samples"], cfg["seed"])
        run.add(moment_match(emp.entries, emp.std_error, fam.get(1, 0.5), run.band_max,
                             cfg["samples"], cfg["seed"], "sampler_vs_oracle(n=1)"), suite="consistency")
    else:
        t = run.times()[0]
        fam = TensorFamily.from_sampler(model, 2, [t], cfg["samples"], cfg["seed"])
        se = max(float(v.max()) for v in fam.std_errors.values())
        rep = check_consistency(fam, tol=run.band_max * 2 * se + 1e-12)
        run.add(rep, suite="consistency")
    if not model.discrete_time:
        f = np.zeros(model.m)
        f[0] = 1.0
        run.add(check_feller_small_time(model, f, 0.5, [0.2, 0.1, 0.05, 0.01], min(cfg["samples"], 20_000),
                                        cfg["seed"]), warning=True, suite="consistency")
        if model.space.is_grid:
            run.add(check_feller_space(model, model.space.coords, 0.05, 0.25, min(cfg["samples"], 20_000),
                                       cfg["seed"]), warning=True, suite="consistency")


def _grid_for(space: StateSpace) -> DenseGrid:
    if space.is_grid and space.m >= 5 and space.m % 2 == 1:
        return DenseGrid(space, range(0, space.m, 2))
    return DenseGrid(space)


def suite_presentation(run: Run):
    model, cfg = run.model, run.cfg
    grid = _grid_for(model.space)
    rng = substream(cfg["seed"], TAG_SEMIGROUP, 99)
    count = min(cfg["samples"], 10_000)
    K = rng.dirichlet(np.ones(model.m), size=(count, model.m))
    mus = evaluate_e(grid, K)
    ei = evaluate_e(grid, interpolate_i(grid, mus))
    run.add(CheckReport("e_after_i_identity", float(np.abs(ei - mus).max()), 0.0), suite="presentation")
    P = present_p(grid, K)
    run.add(CheckReport("p_idempotent", float(np.sum(present_p(grid, P) != P)), 0.0), suite="presentation")
    I = np.eye(model.m)
    pI = present_p(grid, I)
    exact = grid.is_full
    dev = float(np.abs(pI - I).max()) if exact else 0.0
    run.add(CheckReport("delta_kernel_fixed", dev, 0.0,
                        [{"Z_full": exact, "note": "checked exactly when Z is the whole space"}]),
            suite="presentation")
    pP = present_p(grid, pI)
    run.add(CheckReport("p_of_presented_identity", float(np.sum(pP != pI)), 0.0), suite="presentation")


def suite_tower(run: Run):
    cfg = run.cfg
    tower = sample_tower(run.cell_law(), tuple(cfg["window"]), cfg["depth"], cfg["seed"])
    run.add(check_projection_consistency(tower), suite="tower")
    N = min(cfg["depth"], 4)
    ens = run.ensemble(N)
    n = ens.tower(0).n0 + 1
    reps = min(cfg["samples"], 10_000)
    run.add(check_projection_law(ens, n, reps, band=run.single), suite="tower")


def suite_evolution(run: Run):
    cfg = run.cfg
    N = cfg["depth"]
    T0, T1 = cfg["window"]
    ens = run.ensemble()
    tower = ens.tower(0)
    rng = substream(cfg["seed"], TAG_SEMIGROUP, 7)
    probes = min(cfg["samples"], 1000)
    L = int(round((T1 - T0) * 2 ** N))
    worst = 0.0
    for _ in range(probes):
        r, s, t = sorted(rng.integers(0, L + 1, size=3))
        rep = check_evolution(tower, T0 + r / 2 ** N, T0 + s / 2 ** N, T0 + t / 2 ** N)
        worst = max(worst, rep.max_abs_error)
    run.add(CheckReport("evolution(dyadic)", worst, 1e-12, [{"triples": probes}]), suite="evolution")
    if run.model.discrete_time:
        return
    J = cfg["schedule_jmax"]
    sched = calibrate_schedule(run.model, J, N, tower.n0, T1 - T0, seed=cfg["seed"])
    hits, rows = 0, []
    towers = [ens.tower(k) for k in range(10)]
    for k in range(probes):
        r, s, t = np.sort(T0 + (T1 - T0) * rng.random(3))
        rep = check_evolution(towers[k % 10], r, s, t, schedule=sched)
        hits += rep.passed
        rows.append({"r": r, "s": s, "t": t, "deviation": rep.max_abs_error})
    run.tables["evolution_real"] = rows
    run.add(_fraction_report("evolution(real) within budget", hits, probes, 0.95), suite="evolution")


def suite_increments(run: Run):
    cfg = run.cfg
    T0, T1 = cfg["window"]
    mid = (T0 + T1) / 2
    N = min(cfg["depth"], 4)
    ens = run.ensemble(N)
    reps = min(cfg["samples"], 10_000)
    run.add(check_increment_independence(ens, [(T0, mid), (mid, T1)], reps, band=run.single),
            suite="increments")
    tau = (T1 - T0) / 4
    run.add(check_stationarity(ens, tau, [T0 + k * tau for k in range(4)], reps, band=run.single),
            suite="increments")


def suite_convergence(run: Run):
    cfg = run.cfg
    if run.model.discrete_time:
        return
    T0, T1 = cfg["window"]
    N, J = cfg["depth"], cfg["schedule_jmax"]
    ens = run.ensemble()
    sched = calibrate_schedule(run.model, J, N, ens.tower(0).n0, T1 - T0, seed=cfg["seed"])
    s, t = T0 + 0.3 * (T1 - T0), T0 + 0.7 * (T1 - T0)
    reps = min(cfg["samples"], 1000)
    rep = convergence_exceedance(ens, s, t, 0, sched, reps, band=run.single)
    run.add(rep, suite="convergence")
    run.tables["convergence"] = rep.details
    run.tables["convergence_single"] = convergence_diagnostic(ens.tower(0), s, t, 0, sched)
    if run.model.space.is_grid:
        m = run.model.m
        run.tables["modulus"] = two_point_modulus(run.model, 0.5, 0.1, [(x, x + 1) for x in range(m - 1)],
                                                  min(cfg["samples"], 4000), cfg["seed"])
        run.tables["eps_schedule"] = [
            {"j": j + 1, "eps": float(e)} for j, e in enumerate(
                calibrate_eps_schedule(run.model, run.model.space, J, horizon=2.0 ** -N,
                                       seed=cfg["seed"]))]


def suite_tanaka(run: Run):
    cfg = run.cfg
    model = run.model if isinstance(run.model, TanakaModel) else TanakaModel(6)
    steps = 9
    reps = min(cfg["samples"], 100_000)
    rows = []
    for law in ("half", "coin", "uniform"):
        tm = TanakaModel(model.L, law)
        ms = tanaka_mass_statistic(tm, steps, reps, cfg["seed"])
        z = abs(ms.mean - 0.5) / ms.std_error if ms.std_error > 0 else (0.0 if abs(ms.mean - 0.5) < 1e-12 else math.inf)
        run.add(TestResult(f"tanaka_mean[{law}]", ms.mean - 0.5, ms.std_error, z, z <= run.single,
                           reps, cfg["seed"], run.single), suite="tanaka")
        rows.append({"m_law": law, "mean": ms.mean, "std_error": ms.std_error})
        if law == "coin":
            off = float(np.min(np.abs(ms.samples[:, None] - np.array([0.0, 1.0])), axis=1).max())
            run.add(CheckReport("tanaka_map_regime_in_{0,1}", off, 0.0), suite="tanaka")
    one = tanaka_mass_statistic(TanakaModel(model.L, "half"), 1, min(reps, 10_000), cfg["seed"])
    run.add(CheckReport("tanaka_one_step_half", float(np.abs(one.samples - 0.5).max()), 0.0), suite="tanaka")
    run.tables["tanaka"] = rows


def suite_coalescing(run: Run):
    cfg = run.cfg
    model = run.model if isinstance(run.model, CoalescingMapModel) and run.model.discrete_time \
        else CoalescingMapModel(4)
    reps = min(cfg["samples"], 100_000)
    rows, worst = [], 0.0
    for steps in range(1, 5):
        for y in range(1, model.m):
            b = coalescence_probability(model, 0, y, steps, "brute").value
            mc = coalescence_probability(model, 0, y, steps, "mc", replicas=reps, seed=cfg["seed"])
            z = abs(mc.value - b) / mc.std_error if mc.std_error > 0 else (0.0 if mc.value == b else math.inf)
            worst = max(worst, z)
            rows.append({"steps": steps, "x": 0, "y": y, "brute": b, "mc": mc.value, "se": mc.std_error, "z": z})
    run.tables["coalescence"] = rows
    run.add(TestResult("coalescence_brute_vs_mc", worst, 1.0, worst, worst <= run.band_max, reps,
                       cfg["seed"], run.band_max), suite="coalescing")
    emp = build_tensor_from_sampler(model, 2, 3, min(cfg["samples"], 20_000), cfg["seed"])
    off = 0.0
    m = model.m
    for x in range(m):
        row = emp.entries[encode((x, x), m)].reshape(m, m)
        off = max(off, float(row.sum() - np.trace(row)))
    run.add(CheckReport("coalescing_diagonal_support", off, 0.0), suite="coalescing")


def suite_negative(run: Run):
    cfg = run.cfg
    model = run.model
    if not isinstance(model, PoissonProductModel):
        raise ConfigError("negative-control suite needs a Poisson product model")
    reps = min(cfg["samples"], 10_000)
    wrong = PoissonProductModel(2 * model.rate, model.jumps, model.probs, model.space)
    ens = TowerEnsemble(wrong, tuple(cfg["window"]), min(cfg["depth"], 4), cfg["seed"])
    run.add(check_projection_law(ens, ens.tower(0).n0 + 1, reps, band=run.single, reference=model),
            expect_fail=True, suite="negative")
    fam = TensorFamily.from_oracle(model, 3, [0.5]).decorrelated(2)
    run.add(check_diagonal_property(fam, 0, 0.5), expect_fail=True, suite="negative")
    T0, T1 = cfg["window"]
    L = T1 - T0
    ens = run.ensemble(min(cfg["depth"], 4))
    run.add(check_increment_independence(ens, [(T0, T0 + 0.75 * L), (T0 + 0.5 * L, T1)], reps,
                                         band=run.single, allow_overlap=True),
            expect_fail=True, suite="negative")


SUITE_FUNCS = {
    "semigroup": suite_semigroup, "consistency": suite_consistency,
    "presentation": suite_presentation, "tower": suite_tower, "evolution": suite_evolution,
    "increments": suite_increments, "convergence": suite_convergence, "tanaka": suite_tanaka,
    "coalescing": suite_coalescing, "negative": suite_negative,
}


def _write_tables(outdir: str, tables: dict):
    tdir = os.path.join(outdir, "tables")
    os.makedirs(tdir, exist_ok=True)
    for name, rows in tables.items():
        if not rows:
            continue
        keys = list(dict.fromkeys(k for r in rows for k in r))
        with open(os.path.join(tdir, f"{name}.csv"), "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=keys)
            w.writeheader()
            for r in rows:
                w.writerow({k: (json.dumps(v) if isinstance(v, (list, dict)) else v) for k, v in r.items()})


def _public_config(cfg):
    return {k: v for k, v in cfg.items() if not k.startswith("_")}


def cmd_run(cfg: dict, out=None) -> int:
    out = out or sys.stdout
    start = time.time()
    run = Run(cfg)
    names = FULL if cfg["suite"] == "full" else (cfg["suite"],)
    for name in names:
        SUITE_FUNCS[name](run)
    outdir = cfg["output_dir"]
    os.makedirs(outdir, exist_ok=True)
    report = {
        "schema": REPORT_SCHEMA, "version": __version__, "backend": BACKEND,
        "threads": worker_count(), "config": _public_config(cfg), "model": run.model.to_dict(),
        "passed": run.passed, "runtime_s": round(time.time() - start, 3),
        "records": run.records, "tables": sorted(run.tables),
    }
    with open(os.path.join(outdir, "report.json"), "w") as fh:
        json.dump(report, fh, indent=2)
    _write_tables(outdir, run.tables)
    failed = [r["name"] for r in run.records if not r["passed"] and not r["warning"]]
    status = "PASS" if run.passed else "FAIL"
    tail = f" failed: {', '.join(failed)}" if failed else ""
    print(f"{status} suite={cfg['suite']} model={run.model.kind} checks={len(run.records)} "
          f"time={report['runtime_s']:.1f}s{tail}", file=out)
    return EXIT_PASS if run.passed else EXIT_FAIL


def cmd_calibrate(cfg: dict, out=None) -> int:
    out = out or sys.stdout
    model = cfg["_model"]
    T0, T1 = cfg["window"]
    N, J = cfg["depth"], cfg["schedule_jmax"]
    result = {"schema": "kflow.schedule/1", "model": model.to_dict()}
    if not model.discrete_time:
        n0 = max(dyadic_level(T0), dyadic_level(T1))
        sched = calibrate_schedule(model, J, N, n0, T1 - T0, seed=cfg["seed"])
        result["n_j"] = list(sched.n)
    if model.space.is_grid and not model.discrete_time:
        result["eps_j"] = calibrate_eps_schedule(model, model.space, J, horizon=2.0 ** -N,
                                                 seed=cfg["seed"]).tolist()
    os.makedirs(cfg["output_dir"], exist_ok=True)
    with open(os.path.join(cfg["output_dir"], "schedule.json"), "w") as fh:
        json.dump(result, fh, indent=2)
    print(json.dumps({k: v for k, v in result.items() if k != "model"}), file=out)
    return EXIT_PASS


def cmd_sample(cfg: dict, towers: int, kernels: int, t: float | None, out=None) -> int:
    out = out or sys.stdout
    model = cfg["_model"]
    outdir = cfg["output_dir"]
    os.makedirs(outdir, exist_ok=True)
    if kernels:
        t = (1.0 if model.discrete_time else 0.5) if t is None else t
        K = model.sample_batch(t, kernels, substream(cfg["seed"], TAG_SEMIGROUP, 1000))
        np.save(os.path.join(outdir, "kernels.npy"), K)
    law = model.law(1) if model.discrete_time else model
    for r in range(towers):
        tw = sample_tower(law, tuple(cfg["window"]), cfg["depth"], cfg["seed"], replica=r)
        tw.save_npz(os.path.join(outdir, f"tower_{r}.npz"))
    print(f"wrote {kernels} kernels and {towers} towers to {outdir}", file=out)
    return EXIT_PASS


def cmd_oracle(cfg: dict, order: int, t: float, out=None) -> int:
    out = out or sys.stdout
    model = cfg["_model"]
    if not model.has_oracle:
        raise ConfigError(f"model {model.kind} has no exact moment oracle")
    T = model.exact_moment_tensor(order, t)
    os.makedirs(cfg["output_dir"], exist_ok=True)
    base = os.path.join(cfg["output_dir"], f"tensor_n{order}_t{t:g}")
    with open(base + ".json", "w") as fh:
        fh.write(T.to_json())
    with open(base + ".csv", "w") as fh:
        fh.write(T.to_csv())
    print(f"wrote order-{order} tensor at t={t:g} ({T.size}x{T.size}) to {base}.json", file=out)
    return EXIT_PASS


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kflow", description="Stochastic flows of kernels: experiments and checks.")
    p.add_argument("--version", action="version", version=f"kflow {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run a verification suite")
    r.add_argument("config")
    r.add_argument("--suite", choices=SUITES)
    r.add_argument("--output-dir")
    c = sub.add_parser("calibrate", help="calibrate n_j and eps_j schedules")
    c.add_argument("config")
    c.add_argument("--output-dir")
    s = sub.add_parser("sample", help="dump sampled kernels and towers")
    s.add_argument("config")
    s.add_argument("--towers", type=int, default=1)
    s.add_argument("--kernels", type=int, default=0)
    s.add_argument("--t", type=float)
    s.add_argument("--output-dir")
    o = sub.add_parser("oracle", help="dump an exact moment tensor")
    o.add_argument("config")
    o.add_argument("--order", type=int, default=2)
    o.add_argument("--t", type=float, default=1.0)
    o.add_argument("--output-dir")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if getattr(args, "suite", None):
            cfg["suite"] = args.suite
        if args.output_dir:
            cfg["output_dir"] = args.output_dir
        if args.command == "run":
            return cmd_run(cfg)
        if args.command == "calibrate":
            return cmd_calibrate(cfg)
        if args.command == "sample":
            return cmd_sample(cfg, args.towers, args.kernels, args.t)
        return cmd_oracle(cfg, args.order, args.t)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CapacityError as exc:
        print(f"capacity error: {exc}", file=sys.stderr)
        return EXIT_CAPACITY


if __name__ == "__main__":
    sys.exit(main())
