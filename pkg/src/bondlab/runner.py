"""Run one configured experiment, write its CSVs and a JSON manifest."""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .completeness import claim_library, replicate_claim, replication_convergence
from .config import ExperimentConfig
from .counterexample import dual_representation_report, expectation_gap, sample_counterexample
from .incompleteness import (BASEL, claim_chunk, divergence_profile, harmonic_indicator_base,
                             sign_switching_admissibility, sign_switching_chunk, validate_switching_base)
from .market_model import (ConstantSingle, SignSwitching, SineGaussian, TimeGrid, discounted_bond_chunk,
                           load_initial_curve, martingale_table, rate_path, simulate_forward_surface,
                           write_surface_csv)
from .operator_lab import assemble_gamma, hs_norm, column_bound_report, spectrum_rows
from .parallel import map_paths


@dataclass
class RunManifest:
    config: dict
    version: str
    wall_time: float = 0.0
    files: dict = field(default_factory=dict)      # name -> row count (None for figures)
    summary: dict = field(default_factory=dict)
    checks: dict = field(default_factory=dict)     # name -> {"passed": bool, "value": float}

    @property
    def passed(self) -> bool:
        return all(c["passed"] for c in self.checks.values())

    def check(self, name: str, passed: bool, value=None):
        self.checks[name] = {"passed": bool(passed), "value": _plain(value)}

    def to_json(self) -> str:
        return json.dumps({"config": self.config, "version": self.version, "wall_time": self.wall_time,
                           "files": self.files, "summary": self.summary, "checks": self.checks,
                           "passed": self.passed}, indent=2, sort_keys=True)


def _plain(v):
    if isinstance(v, (np.floating, np.integer)):
        v = v.item()
    if isinstance(v, float) and not math.isfinite(v):
        return str(v)
    return v


def _fmt(v):
    if isinstance(v, str):
        return v
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_csv(path: Path, header, rows) -> int:
    n = 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
            n += 1
    return n


# ----------------------------------------------------------------------------
# model setup
# ----------------------------------------------------------------------------

def make_grid(cfg: ExperimentConfig, steps: int | None = None) -> TimeGrid:
    return TimeGrid(cfg.horizon, steps or cfg.steps, cfg.maturity_refine)


def make_spec(cfg: ExperimentConfig, grid: TimeGrid):
    if cfg.volatility == "constant":
        return ConstantSingle(cfg.sigma0)
    if cfg.volatility == "sine":
        return SineGaussian.harmonic(cfg.factors, cfg.gamma_scale, cfg.gamma_power)
    base = harmonic_indicator_base(cfg.factors, grid)
    return SignSwitching(base, cfg.switch_source)


def make_curve(cfg: ExperimentConfig, grid: TimeGrid):
    if cfg.initial_curve:
        return load_initial_curve(cfg.initial_curve, grid)
    return cfg.initial_rate


# ----------------------------------------------------------------------------
# experiments
# ----------------------------------------------------------------------------

def _simulate(cfg, out, man):
    grid = make_grid(cfg)
    spec = make_spec(cfg, grid)
    curve = make_curve(cfg, grid)
    surface = simulate_forward_surface(spec, grid, curve, cfg.seed)
    man.files["surface.csv"] = write_surface_csv(surface, out / "surface.csv")
    rates = rate_path(surface)
    man.files["rates.csv"] = write_csv(out / "rates.csv", ["t", "short_rate", "bank_account"],
                                       zip(rates.times, rates.short_rate, rates.bank_account))
    frozen = all(np.array_equal(surface.f[k:, grid.maturity_index(k)],
                                np.full(grid.steps + 1 - k, surface.f[k, grid.maturity_index(k)]))
                 for k in range(grid.steps + 1))
    man.check("frozen_after_maturity", frozen)
    man.check("bank_account_positive", bool(np.all(rates.bank_account > 0)))
    samples = map_paths(discounted_bond_chunk, cfg.paths, cfg.workers, spec=spec, grid=grid,
                        initial_curve=curve, seed=cfg.seed, maturity=cfg.horizon)["discounted"]
    table = martingale_table(samples, grid)
    man.files["martingale.csv"] = write_csv(out / "martingale.csv", ["k", "t", "mean", "std_err", "target", "z"],
                                            ([r[c] for c in ("k", "t", "mean", "std_err", "target", "z")]
                                             for r in table))
    if cfg.paths > 1:
        zmax = max(abs(r["z"]) for r in table)
        man.check("martingale_within_3se", zmax <= 3.0, zmax)
    man.summary["max_abs_f"] = float(np.abs(surface.f).max())
    return {"surface": surface, "rates": rates, "martingale": table}


def _spectrum(cfg, out, man):
    grid = make_grid(cfg)
    spec = make_spec(cfg, grid)
    surface = simulate_forward_surface(spec, grid, make_curve(cfg, grid), cfg.seed)
    rows, trace_err, ordered, margins = [], 0.0, True, []
    for k in range(grid.steps):
        gamma = assemble_gamma(surface, spec, k)
        lam = gamma.spectrum.values
        rows.extend(spectrum_rows(gamma))
        hs = hs_norm(gamma)
        if hs > 0:
            trace_err = max(trace_err, abs(np.sum(lam**2) - hs**2) / hs**2)
        ordered &= bool(np.all(np.diff(lam) <= 0))
        margins.append(lam[-1] / lam[0] if lam[0] > 0 else 0.0)
    man.files["spectrum.csv"] = write_csv(out / "spectrum.csv", ["k", "i", "lambda"], rows)
    man.check("trace_identity", trace_err <= 1e-8, trace_err)
    man.check("nonincreasing", ordered)
    report = column_bound_report(surface, spec)
    man.files["bound.csv"] = write_csv(
        out / "bound.csv", ["k", "i", "lhs", "rhs"],
        ((k, i + 1, report.lhs[k, i], report.rhs[k, i]) for k in range(grid.steps + 1)
         for i in range(spec.n_factors)))
    man.check("column_bound", report.passed, report.slack_needed)
    man.summary.update({"A": report.A, "B": report.B, "hs_integral": report.hs_integral,
                        "injective_steps": int(np.sum(np.array(margins) > 1e-12))})
    return {"rows": rows, "margins": np.array(margins)}


def _nonreplicable(cfg, out, man):
    grid = make_grid(cfg)
    spec = make_spec(cfg, grid)
    res = map_paths(claim_chunk, cfg.paths, cfg.workers, spec=spec, grid=grid,
                    initial_curve=make_curve(cfg, grid), seed=cfg.seed, mode=cfg.psi_mode)
    man.files["claims.csv"] = write_csv(out / "claims.csv", ["path", "xi", "tau", "overshoot"],
                                        zip(range(cfg.paths), res["xi"], res["tau"], res["overshoot"]))
    bounded = np.abs(res["xi"]) <= 1.0 + res["max_increment"] + 1e-12
    man.check("bounded_claim", bool(bounded.all()), int((~bounded).sum()))
    man.check("psi_norm_bound", bool(np.all(res["psi_norm_sq"] <= BASEL + 1e-12)), float(res["psi_norm_sq"].max()))
    if cfg.paths > 1:
        se = res["xi"].std(ddof=1) / math.sqrt(cfg.paths)
        z = res["xi"].mean() / se if se > 0 else 0.0
        man.check("zero_mean_3se", abs(z) <= 3.0, z)
    hits = res["hit"]
    man.summary.update({"hit_fraction": float(hits.mean()),
                        "median_overshoot_hit": float(np.median(res["overshoot"][hits])) if hits.any() else 0.0})
    return res


def _divergence(cfg, out, man):
    grid = make_grid(cfg)
    spec = make_spec(cfg, grid)
    surface = simulate_forward_surface(spec, grid, make_curve(cfg, grid), cfg.seed)
    rows = divergence_profile(surface, range(1, cfg.k_max + 1), spec, cfg.spectrum_step)
    man.files["divergence.csv"] = write_csv(out / "divergence.csv", ["K", "min_norm_sq"],
                                            ((r["K"], r["min_norm_sq"]) for r in rows))
    vals = np.array([r["min_norm_sq"] for r in rows])
    lower = np.array([r["K"] - 1 for r in rows], dtype=float)
    man.check("lower_bound", bool(np.all(vals >= lower * (1 - 1e-8))), float(np.min(vals - lower)))
    man.check("nondecreasing", bool(np.all(np.diff(vals) >= 0)))
    return {"rows": rows}


def _replicate(cfg, out, man):
    grid = make_grid(cfg)
    spec = make_spec(cfg, grid)
    curve = make_curve(cfg, grid)
    claim = claim_library(cfg.claim, spec.n_factors, cfg.claim_a)
    rep = replicate_claim(spec, claim, grid, cfg.seed, cfg.paths, curve, workers=cfg.workers)
    man.files["hedge.csv"] = write_csv(out / "hedge.csv", ["path", "claim", "hedge_terminal", "residual"],
                                       zip(range(cfg.paths), rep.claim, rep.terminal, rep.residual))
    man.check("linearized_identity", rep.linearized_error <= 1e-8, rep.linearized_error)
    man.summary["rms_error"] = rep.rms
    conv = []
    if len(cfg.steps_list) >= 2:
        conv = replication_convergence(spec, claim, cfg.horizon, cfg.steps_list, cfg.paths, cfg.seed,
                                       cfg.maturity_refine, curve, cfg.workers)
        man.files["convergence.csv"] = write_csv(out / "convergence.csv", ["dt", "rms_error"],
                                                 ((r["dt"], r["rms_error"]) for r in conv))
        rms = [r["rms_error"] for r in conv]
        ratios = [a / b if b > 0 else math.inf for a, b in zip(rms[:-1], rms[1:])]
        exact = all(r == 0 for r in rms)
        man.check("convergence_ratio", exact or min(ratios) >= 1.3, 0.0 if exact else min(ratios))
    return {"report": rep, "convergence": conv}


def _sign_switching(cfg, out, man):
    grid = make_grid(cfg)
    spec = make_spec(cfg, grid)
    if not isinstance(spec, SignSwitching):
        raise ValueError("sign-switching experiment needs volatility: sign-switching")
    man.summary["base_sup"] = validate_switching_base(spec.base, grid)
    samples = map_paths(sign_switching_chunk, cfg.paths, cfg.workers, spec=spec, grid=grid,
                        initial_curve=make_curve(cfg, grid), seed=cfg.seed)
    rows = sign_switching_admissibility(samples, spec, grid)
    man.files["checks.csv"] = write_csv(out / "checks.csv", ["check", "passed", "margin"],
                                        ((r.check, r.passed, r.margin) for r in rows))
    for r in rows:
        man.check(r.check, r.passed, r.margin)
        man.summary[f"{r.check}_violations"] = r.violations
    return {"rows": rows, "samples": samples}


def _counterexample(cfg, out, man):
    fine = sample_counterexample(cfg.paths, cfg.steps, cfg.counterexample_eps, cfg.seed, cfg.workers)
    man.files["counterexample.csv"] = write_csv(out / "counterexample.csv", ["path", "tau", "L", "M1"],
                                                zip(range(cfg.paths), fine["tau"], fine["L"], fine["M1"]))
    gap = expectation_gap(fine["M1"])
    # exp(L) underflows to 0.0 for L below about -745, so positivity is checked on L
    man.check("M1_positive", bool(np.all(np.isfinite(fine["L"]))), float(np.min(fine["L"])))
    frac = float(np.mean(fine["L"] < -1 + 0.05))
    man.check("L_below_minus_one", frac >= 0.99, frac)
    man.check("mean_below_inv_e", gap.estimate.upper <= math.exp(-1) + 0.02, gap.estimate.upper)
    man.check("mean_below_one", gap.below_one, gap.sigmas_below_one)
    man.check("tau_inside", bool(np.all((fine["tau"] > 0) & (fine["tau"] <= 1))))
    coarse = sample_counterexample(cfg.paths, cfg.coarse_steps, cfg.counterexample_eps, cfg.seed, cfg.workers)
    dual = dual_representation_report(fine, coarse)
    man.check("control_mean_one", dual.control_ok, dual.control.mean)
    man.summary.update({"mean_M1": gap.estimate.mean, "std_err": gap.estimate.std_err,
                        "ci_upper": gap.estimate.upper, "separation_ci_units": dual.separation_ci,
                        "x2_mean_coarse": dual.x2_coarse, "x2_mean_fine": dual.x2_fine,
                        "x2_growth": dual.x2_growth})
    return {"samples": fine, "dual": dual}


RUNNERS = {"simulate": _simulate, "spectrum": _spectrum, "nonreplicable": _nonreplicable,
           "divergence": _divergence, "replicate": _replicate, "sign-switching": _sign_switching,
           "counterexample": _counterexample}


def run_experiment(cfg: ExperimentConfig) -> RunManifest:
    """Run ``cfg``; CSVs, optional figures and ``manifest.json`` go to ``cfg.out``."""
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    man = RunManifest(cfg.as_dict(), __version__)
    start = time.perf_counter()
    result = RUNNERS[cfg.experiment](cfg, out, man)
    if cfg.figures:
        from .plotting import render_figures
        for name in render_figures(cfg.experiment, result, out):
            man.files[name] = None
    man.wall_time = time.perf_counter() - start
    (out / "manifest.json").write_text(man.to_json() + "\n")
    return man
