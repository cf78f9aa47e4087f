"""Batch experiment runner.

One JSON config per experiment; outputs are CSV for sweeps and JSON for
single solutions, plus a manifest listing every written file with a sha256
checksum.  Exit codes: 0 ok, 1 suite incomplete, 2 config error,
3 numerical failure (manifest still written).  Reproducibility contract:
identical config + seed produce byte-identical CSV output.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__, bounds, schrodinger, sde, transport
from .errors import ConfigInvalid, SotlabError
from .kernels import HeatKernel, aronson_fit, kernel_from_json
from .measures import (
    DiscreteMeasure,
    GaussianSpec,
    GridMeasure,
    GridSpec,
    discretize_gaussian,
    measure_from_json,
)
from .rng import child_seed

EXPERIMENTS = (
    "transport",
    "schrodinger",
    "bridge",
    "bounds-sweep",
    "longtime",
    "zero-noise",
    "explosion",
    "collapse-r-lt-1",
)

_MEASURE_SCHEMA = {
    "type": "object",
    "properties": {
        "type": {"enum": ["discrete", "grid", "gaussian"]},
        "points": {"type": "array"},
        "weights": {"type": "array"},
        "origin": {"type": "array"},
        "spacing": {"type": "number"},
        "counts": {"type": "array"},
        "density": {"type": "array"},
        "mean": {"type": "array"},
        "cov": {"type": "array"},
        "grid": {
            "type": "object",
            "properties": {"cells": {"type": "integer"}, "cover": {"type": "number"}},
            "additionalProperties": False,
        },
    },
    "required": ["type"],
    "additionalProperties": False,
}

CONFIG_SCHEMA = {
    "type": "object",
    "properties": {
        "experiment": {"enum": list(EXPERIMENTS)},
        "P": _MEASURE_SCHEMA,
        "Q": _MEASURE_SCHEMA,
        "kernel": {
            "type": "object",
            "properties": {
                "variant": {"enum": ["heat", "ou"]},
                "sigma": {"type": "number"},
                "theta": {"type": "number"},
                "d": {"type": "integer"},
            },
            "required": ["variant"],
            "additionalProperties": False,
        },
        "r": {"anyOf": [{"type": "number"}, {"type": "array", "items": {"type": "number"}}]},
        "sigma": {"type": "number"},
        "T": {"type": "number"},
        "times": {"type": "array", "items": {"type": "number"}},
        "eps_list": {"type": "array", "items": {"type": "number"}},
        "delta_list": {"type": "array", "items": {"type": "number"}},
        "factors": {"type": "array", "items": {"type": "integer"}},
        "n_paths": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer", "minimum": 0},
        "yz": {
            "type": "object",
            "properties": {"y": {"type": "array"}, "z": {"type": "array"}},
            "required": ["y", "z"],
            "additionalProperties": False,
        },
        "tolerances": {"type": "object"},
        "checks": {"type": "object"},
        "envelope": {
            "type": "object",
            "properties": {"c_rt": {"type": "number"}, "c_rt_prime": {"type": "number"}},
            "additionalProperties": False,
        },
        "sinkhorn": {
            "type": "object",
            "properties": {
                "tol": {"type": "number"},
                "max_iter": {"type": "integer"},
            },
            "additionalProperties": False,
        },
        "probes": {"type": "integer"},
        "name": {"type": "string"},
    },
    "required": ["experiment", "seed"],
    "additionalProperties": False,
}

_REQUIRED_KEYS = {
    "transport": ["P", "Q", "r"],
    "schrodinger": ["P", "Q", "kernel", "times"],
    "bridge": ["sigma", "T", "r", "n_paths", "yz"],
    "bounds-sweep": ["P", "Q", "r", "sigma", "times", "n_paths"],
    "longtime": ["P", "Q", "kernel", "times"],
    "zero-noise": ["P", "Q", "r", "sigma", "T", "eps_list", "n_paths"],
    "explosion": ["P", "Q", "r", "sigma", "times", "n_paths"],
    "collapse-r-lt-1": ["P", "Q", "r", "sigma", "T", "delta_list", "factors", "n_paths"],
}


def load_config(path: str | Path) -> dict:
    try:
        raw = Path(path).read_text()
    except OSError as exc:
        raise ConfigInvalid(f"cannot read config: {exc}") from exc
    try:
        cfg = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ConfigInvalid(f"malformed JSON: {exc}") from exc
    try:
        jsonschema.validate(cfg, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise ConfigInvalid(f"schema violation: {exc.message}") from exc
    missing = [k for k in _REQUIRED_KEYS[cfg["experiment"]] if k not in cfg]
    if missing:
        raise ConfigInvalid(f"experiment {cfg['experiment']!r} needs keys {missing}")
    return cfg


def _as_measure(spec: dict, want_grid: bool, cells: int = 240, cover: float = 8.0):
    m = measure_from_json({k: v for k, v in spec.items() if k != "grid"})
    if want_grid and isinstance(m, GaussianSpec):
        hints = spec.get("grid", {})
        cells = hints.get("cells", cells)
        cover = hints.get("cover", cover)
        std = m.std_axes()
        grid = GridSpec.from_bounds(m.mean - cover * std, m.mean + cover * std, cells)
        return discretize_gaussian(m, grid)
    return m


def _rs(cfg) -> list[float]:
    r = cfg["r"]
    return [float(v) for v in r] if isinstance(r, list) else [float(r)]


# ---------------------------------------------------------------------------
# writers

def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    if v is None:
        return ""
    return str(v)


def write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    h.update(path.read_bytes())
    return h.hexdigest()


def _report_rows(reports: list[bounds.BoundReport]) -> list[list]:
    return [
        [rep.name, rep.t, rep.params.get("r"), rep.lhs, rep.stderr, rep.rhs, rep.direction, rep.satisfied]
        for rep in reports
    ]


REPORT_HEADER = ["name", "t", "r", "lhs", "stderr", "rhs", "direction", "satisfied"]


# ---------------------------------------------------------------------------
# experiment runners: each returns (reports, outputs)

def _run_transport(cfg, out, seed, pool, dump_paths):
    P = _as_measure(cfg["P"], want_grid=True)
    Q = _as_measure(cfg["Q"], want_grid=True)
    outputs, reports = [], []
    for r in _rs(cfg):
        results = {}
        if isinstance(P, DiscreteMeasure) and isinstance(Q, DiscreteMeasure):
            results["exact_lp"] = transport.solve_exact(P, Q, r)
        if (P.d if hasattr(P, "d") else 1) == 1:
            results["quantile_1d"] = transport.solve_quantile_1d(P, Q, r)
        for method, res in results.items():
            f = out / f"transport_r{r}_{method}.json"
            write_json(f, res.to_json())
            outputs.append(f)
        if len(results) == 2:
            a, b = results["exact_lp"].value, results["quantile_1d"].value
            reports.append(bounds.make_report("cross_method_agreement", 0.0, abs(a - b), 0.0, 1e-6, "upper", {"r": r}))
    return reports, outputs


def _run_bridge(cfg, out, seed, pool, dump_paths):
    T, r = float(cfg["T"]), float(cfg["r"])
    grid = sde.default_bridge_grid(T)
    y = np.asarray(cfg["yz"]["y"], dtype=float)
    z = np.asarray(cfg["yz"]["z"], dtype=float)
    ens = sde.simulate_bridge(sde.constant_yz(y, z), cfg["sigma"], T, grid, cfg["n_paths"], seed)
    est = sde.cost_r(ens, r, tail_sigma=float(cfg["sigma"]))
    reports = []
    checks = cfg.get("checks", {})
    if "closed_form" in checks:
        ref = float(checks["closed_form"])
        reports.append(bounds.make_report("bridge_cost_closed_form_upper", T, est.mean, est.stderr, ref, "upper"))
        reports.append(bounds.make_report("bridge_cost_closed_form_lower", T, est.mean, est.stderr, ref, "lower"))
    pin_gap = float(np.max(np.abs(ens.states[:, -1, :] - z)))
    reports.append(bounds.make_report("terminal_pinning_exact", T, pin_gap, 0.0, 0.0, "upper"))
    payload = {
        "cost": {"mean": est.mean, "stderr": est.stderr, "r": r, "n_paths": est.n_paths,
                 "truncation_time": est.truncation_time, "truncation_bias": est.truncation_bias},
        "ensemble": ens.summary(),
    }
    f = out / "bridge_summary.json"
    write_json(f, payload)
    outputs = [f]
    if dump_paths:
        p = out / "bridge_paths.bin"
        sde.dump_paths(ens, p)
        outputs.append(p)
    return reports, outputs


def _run_bounds_sweep(cfg, out, seed, pool, dump_paths):
    P = _as_measure(cfg["P"], want_grid=True)
    Q = _as_measure(cfg["Q"], want_grid=True)
    sigma = float(cfg["sigma"])
    ts = [float(t) for t in cfg["times"]]
    reports = []

    def one(args):
        idx, r = args
        return bounds.sandwich_reports(P, Q, r, sigma, ts, cfg["n_paths"], child_seed(seed, idx))

    for chunk in pool.map(one, list(enumerate(_rs(cfg)))):
        reports.extend(chunk)
    f = out / "bounds_sweep.csv"
    write_csv(f, REPORT_HEADER, _report_rows(reports))
    return reports, [f]


def _run_schrodinger(cfg, out, seed, pool, dump_paths):
    P = _as_measure(cfg["P"], want_grid=True)
    Q = _as_measure(cfg["Q"], want_grid=True)
    kernel = kernel_from_json(cfg["kernel"])
    ts = [float(t) for t in cfg["times"]]
    skw = cfg.get("sinkhorn", {})
    tol = skw.get("tol", 1e-9)
    max_iter = skw.get("max_iter", 50_000)
    fit = aronson_fit(kernel, max(ts), cfg.get("probes", 10_000), seed)

    def solve(args):
        i, t = args
        return schrodinger.sinkhorn_solve(P, Q, kernel, t, tol=tol, max_iter=max_iter)

    sols = list(pool.map(solve, list(enumerate(ts))))
    pxq = np.outer(P.masses(), Q.masses())
    rows, reports = [], []
    t2 = transport.cross_second_moment(P, Q)  # not T_2; used only by upper RHS
    for t, sol in zip(ts, sols):
        h = schrodinger.relative_entropy(pxq, sol.coupling.mass).value
        tv = 0.5 * float(np.abs(sol.coupling.mass - pxq).sum())
        rows.append([t, sol.value, t * sol.value, h, tv, None, sol.iterations, sol.marginal_residual])
        up = schrodinger.schrodinger_upper_rhs(t, P, Q, fit.c_tilde, kernel.d)
        reports.append(bounds.make_report("schrodinger_upper", t, sol.value, 0.0, up, "upper", {"c_tilde": fit.c_tilde}))
        if isinstance(kernel, HeatKernel):
            eps = min(t**0.25, 0.9)
            lam = kernel.sigma_sup(t) ** 2
            tr2 = transport.solve_quantile_1d(P, Q, 2.0).value if P.d == 1 else None
            if tr2 is not None:
                lo = schrodinger.schrodinger_lower_rhs(t, tr2, lam, kernel.sigma_sup(t), 0.0, eps)
                reports.append(bounds.make_report("schrodinger_lower", t, sol.value, 0.0, lo, "lower", {"eps": eps}))
        if not sol.converged:
            reports.append(bounds.make_report("sinkhorn_converged", t, sol.marginal_residual, 0.0, tol, "upper"))
    tvals = [t * sol.value for t, sol in zip(ts, sols)]
    ratio = max(tvals) / min(tvals) if min(tvals) > 0 else math.inf
    ratio_max = cfg.get("tolerances", {}).get("t_value_ratio_max", 10.0)
    reports.append(bounds.make_report("t_value_bounded", max(ts), ratio, 0.0, ratio_max, "upper", {"cross_m2": t2}))
    f = out / "schrodinger_sweep.csv"
    write_csv(f, ["t", "vS", "t_vS", "H_PxQ_mu", "TV", "HQ_m", "iterations", "residual"], rows)
    fj = out / "aronson_fit.json"
    write_json(fj, {"c_tilde": fit.c_tilde, "horizon": fit.horizon, "residual": fit.residual, "probes": fit.probes})
    return reports, [f, fj]


def _run_longtime(cfg, out, seed, pool, dump_paths):
    P = _as_measure(cfg["P"], want_grid=True)
    Q = _as_measure(cfg["Q"], want_grid=True)
    kernel = kernel_from_json(cfg["kernel"])
    ts = [float(t) for t in cfg["times"]]
    skw = cfg.get("sinkhorn", {})
    rows_data = schrodinger.longtime_limits(P, Q, kernel, ts, tol=skw.get("tol", 1e-9), max_iter=skw.get("max_iter", 50_000))
    rows = [[x.t, x.v_value, x.t * x.v_value, x.h_pxq_mu, x.tv, x.h_q_m, x.iterations, x.residual] for x in rows_data]
    reports = []
    for a, b in zip(rows_data, rows_data[1:]):
        reports.append(bounds.make_report("h_pxq_decreasing", b.t, b.h_pxq_mu, 0.0, a.h_pxq_mu, "upper"))
    for x in rows_data:
        reports.append(bounds.make_report("ckp_tv_le_sqrt_2h", x.t, x.tv, 0.0, math.sqrt(2.0 * x.h_pxq_mu) + 1e-9, "upper"))
    tol_limit = cfg.get("tolerances", {}).get("limit_abs", 0.05)
    last = rows_data[-1]
    reports.append(bounds.make_report("v_to_h_q_m", last.t, abs(last.v_value - last.h_q_m), 0.0, tol_limit, "upper"))
    f = out / "longtime_sweep.csv"
    write_csv(f, ["t", "vS", "t_vS", "H_PxQ_mu", "TV", "HQ_m", "iterations", "residual"], rows)
    return reports, [f]


def _run_zero_noise(cfg, out, seed, pool, dump_paths):
    P = _as_measure(cfg["P"], want_grid=True)
    Q = _as_measure(cfg["Q"], want_grid=True)
    r = float(cfg["r"]) if not isinstance(cfg["r"], list) else float(cfg["r"][0])
    diagonal = cfg["P"] == cfg["Q"]
    rep = bounds.zero_noise_report(P, Q, r, float(cfg["sigma"]), float(cfg["T"]), cfg["eps_list"], cfg["n_paths"], seed, diagonal=diagonal)
    rows = [[e, est.mean, est.stderr] for e, est in zip(rep.eps_list, rep.estimates)]
    f = out / "zero_noise.csv"
    write_csv(f, ["eps", "estimate", "stderr"], rows)
    reports = []
    if diagonal:
        reports.append(bounds.make_report("zero_noise_exponent_hi", 0.0, rep.exponent_fit.exponent, 0.0, r / 2.0 + 0.1, "upper"))
        reports.append(bounds.make_report("zero_noise_exponent_lo", 0.0, rep.exponent_fit.exponent, 0.0, r / 2.0 - 0.1, "lower"))
        fj = out / "zero_noise_fit.json"
        write_json(fj, rep.exponent_fit.to_json())
        return reports, [f, fj]
    reports.append(bounds.make_report("zero_noise_limit", 0.0, abs(rep.intercept - rep.target), rep.intercept_stderr, 0.0, "upper"))
    fj = out / "zero_noise_fit.json"
    write_json(fj, {"intercept": rep.intercept, "intercept_stderr": rep.intercept_stderr, "target": rep.target})
    return reports, [f, fj]


def _run_explosion(cfg, out, seed, pool, dump_paths):
    P = _as_measure(cfg["P"], want_grid=True)
    Q = _as_measure(cfg["Q"], want_grid=True)
    sigma = float(cfg["sigma"])
    ts = [float(t) for t in cfg["times"]]
    reports, rows, fits = [], [], {}
    for r in _rs(cfg):
        rep = bounds.explosion_report(P, Q, r, sigma, ts, cfg["n_paths"], seed)
        fits[f"r{r}"] = {"upper": rep.upper_fit.to_json(), "lower": rep.lower_fit.to_json(), "expected": rep.expected_slope}
        for t, u, lo in zip(rep.ts, rep.upper_values, rep.lower_values):
            rows.append([t, r, u, lo])
        for name, fit in (("upper", rep.upper_fit), ("lower", rep.lower_fit)):
            reports.append(bounds.make_report(f"explosion_slope_{name}_hi", 0.0, fit.exponent, 0.0, rep.expected_slope + 0.1, "upper", {"r": r}))
            reports.append(bounds.make_report(f"explosion_slope_{name}_lo", 0.0, fit.exponent, 0.0, rep.expected_slope - 0.1, "lower", {"r": r}))
    f = out / "explosion.csv"
    write_csv(f, ["t", "r", "upper_estimate", "lower_bound"], rows)
    fj = out / "explosion_fits.json"
    write_json(fj, fits)
    return reports, [f, fj]


def _run_collapse(cfg, out, seed, pool, dump_paths):
    P = _as_measure(cfg["P"], want_grid=True)
    Q = _as_measure(cfg["Q"], want_grid=True)
    r = float(cfg["r"]) if not isinstance(cfg["r"], list) else float(cfg["r"][0])
    sigma, T = float(cfg["sigma"]), float(cfg["T"])
    coupling = bounds.optimal_coupling(P, Q, max(r, 1.0))
    deltas = [float(d) for d in cfg["delta_list"]]
    ests = [sde.delayed_bridge_cost(P, Q, coupling, sigma, T, dl, r, cfg["n_paths"], child_seed(seed, i)) for i, dl in enumerate(deltas)]
    rows = [[dl, e.mean, e.stderr] for dl, e in zip(deltas, ests)]
    reports = []
    for (d1, e1), (d2, e2) in zip(zip(deltas, ests), list(zip(deltas, ests))[1:]):
        slack = 2.0 * math.hypot(e1.stderr, e2.stderr)
        reports.append(bounds.BoundReport(
            name="delayed_cost_decreasing", t=d2, lhs=e2.mean, stderr=math.hypot(e1.stderr, e2.stderr),
            rhs=e1.mean, direction="upper", satisfied=e2.mean < e1.mean + slack, params={"delta_from": d1}))
    env = cfg.get("envelope", {})
    c_rt, c_rt_p = env.get("c_rt", 1.0), env.get("c_rt_prime", 4.0)
    base = sde.simulate_bridge(sde.coupling_sampler(coupling), sigma, T, sde.default_bridge_grid(T), cfg["n_paths"], seed)
    factors = [int(n) for n in cfg["factors"]]
    comp = [sde.compressed_control_cost(base, n, r, c_rt, c_rt_p) for n in factors]
    crow = [[c.factor, c.envelope, c.simulated.mean, c.simulated.stderr] for c in comp]
    for c in comp:
        reports.append(bounds.make_report("compressed_le_envelope", float(c.factor), c.simulated.mean, c.simulated.stderr, c.envelope, "upper"))
    decline = cfg.get("tolerances", {}).get("envelope_decline", 0.1)
    reports.append(bounds.make_report("envelope_decline", float(factors[-1]), comp[-1].envelope, 0.0, decline * comp[0].envelope, "upper",
                                      {"c_rt": c_rt, "c_rt_prime": c_rt_p}))
    f1 = out / "collapse_delayed.csv"
    write_csv(f1, ["delta", "cost", "stderr"], rows)
    f2 = out / "collapse_compressed.csv"
    write_csv(f2, ["n", "envelope", "simulated", "stderr"], crow)
    return reports, [f1, f2]


_RUNNERS = {
    "transport": _run_transport,
    "bridge": _run_bridge,
    "bounds-sweep": _run_bounds_sweep,
    "schrodinger": _run_schrodinger,
    "longtime": _run_longtime,
    "zero-noise": _run_zero_noise,
    "explosion": _run_explosion,
    "collapse-r-lt-1": _run_collapse,
}


def run_config(
    config_path: str | Path,
    out_dir: str | Path,
    seed_override: int | None = None,
    threads: int | None = None,
    dump_paths_flag: bool = False,
) -> int:
    """Execute one experiment; returns the process exit code."""
    try:
        cfg = load_config(config_path)
    except ConfigInvalid as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seed = int(seed_override) if seed_override is not None else int(cfg["seed"])
    threads = threads or int(os.environ.get("SOTLAB_THREADS", "0")) or (os.cpu_count() or 1)
    start = time.time()
    status = "ok"
    reports: list[bounds.BoundReport] = []
    outputs: list[Path] = []
    try:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            reports, outputs = _RUNNERS[cfg["experiment"]](cfg, out, seed, pool, dump_paths_flag)
    except SotlabError as exc:
        status = f"numerical failure: {exc}"
    except Exception as exc:  # noqa: BLE001 - manifest must still be written
        status = f"error: {type(exc).__name__}: {exc}"

    unsatisfied = [r for r in reports if not r.satisfied]
    rep_file = out / "reports.csv"
    write_csv(rep_file, REPORT_HEADER, _report_rows(reports))
    outputs.append(rep_file)
    manifest = {
        "artifact_version": __version__,
        "config_sha256": hashlib.sha256(Path(config_path).read_bytes()).hexdigest(),
        "experiment": cfg["experiment"],
        "seed": seed,
        "wall_time_s": time.time() - start,
        "status": status,
        "unsatisfied_reports": [r.name for r in unsatisfied],
        "outputs": [{"path": p.name, "sha256": _sha256(p)} for p in outputs],
    }
    write_json(out / "manifest.json", manifest)
    if status != "ok":
        print(f"[{cfg['experiment']}] {status}", file=sys.stderr)
        return 3
    if unsatisfied:
        print(f"[{cfg['experiment']}] {len(unsatisfied)} bound report(s) unsatisfied", file=sys.stderr)
        return 3
    return 0


def verify_all(suite_dir: str | Path, out_dir: str | Path, seed_override=None, threads=None) -> int:
    """Run every config listed in suite.json; exit 0 iff all pass."""
    suite_dir = Path(suite_dir)
    index = suite_dir / "suite.json"
    if not index.exists():
        print(f"missing suite index {index}", file=sys.stderr)
        return 1
    names = json.loads(index.read_text())["configs"]
    missing = [n for n in names if not (suite_dir / n).exists()]
    results = {}
    for name in names:
        if name in missing:
            results[name] = "MISSING"
            continue
        code = run_config(suite_dir / name, Path(out_dir) / Path(name).stem, seed_override, threads)
        results[name] = "PASS" if code == 0 else f"FAIL({code})"
    width = max(len(n) for n in names)
    for name in names:
        print(f"{name:<{width}}  {results[name]}")
    if missing:
        return 1
    codes = [v for v in results.values() if v != "PASS"]
    if any(v.startswith("FAIL(2") for v in codes):
        return 2
    if codes:
        return 3
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="sotlab", description="stochastic optimal transport laboratory")
    sub = parser.add_subparsers(dest="command", required=True)

    runp = sub.add_parser("run", help="run one experiment config")
    runp.add_argument("--config", required=True)
    runp.add_argument("--seed", type=int, default=None, help="override the config seed")
    runp.add_argument("--out", default="sotlab-out")
    runp.add_argument("--threads", type=int, default=None)
    runp.add_argument("--dump-paths", action="store_true")

    verp = sub.add_parser("verify-all", help="run the bundled experiment suite")
    verp.add_argument("suite_dir")
    verp.add_argument("--seed", type=int, default=None)
    verp.add_argument("--out", default="sotlab-out")
    verp.add_argument("--threads", type=int, default=None)

    args = parser.parse_args(argv)
    if args.command == "run":
        return run_config(args.config, args.out, args.seed, args.threads, args.dump_paths)
    return verify_all(args.suite_dir, args.out, args.seed, args.threads)


if __name__ == "__main__":
    sys.exit(main())
