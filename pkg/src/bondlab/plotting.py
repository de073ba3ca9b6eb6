"""Figures written next to an experiment's CSV files (``--figures``)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, out: Path, name: str) -> str:
    fig.tight_layout()
    fig.savefig(out / name, dpi=120)
    plt.close(fig)
    return name


def _simulate(result, out):
    s = result["surface"]
    fig, ax = plt.subplots(1, 2, figsize=(10, 4))
    T = s.grid.maturities
    for k in np.linspace(0, s.grid.steps, 5).astype(int):
        ax[0].plot(T, s.f[k], label=f"t={s.grid.times[k]:.2f}")
    ax[0].set(xlabel="maturity T", ylabel="f(t, T)", title="forward curves")
    ax[0].legend(fontsize=8)
    table = result["martingale"]
    t = [r["t"] for r in table]
    mean = np.array([r["mean"] for r in table])
    se = np.array([r["std_err"] for r in table])
    ax[1].plot(t, mean, label="MC mean")
    ax[1].fill_between(t, mean - 3 * se, mean + 3 * se, alpha=0.3, label="3 s.e.")
    ax[1].axhline(table[0]["target"], color="k", lw=0.8)
    ax[1].set(xlabel="t", ylabel="discounted bond", title="martingale check")
    ax[1].legend(fontsize=8)
    return [_save(fig, out, "simulate.png")]


def _spectrum(result, out):
    rows = np.array(result["rows"], dtype=float)
    fig, ax = plt.subplots(figsize=(6, 4))
    for k in np.unique(rows[:, 0])[:: max(1, len(np.unique(rows[:, 0])) // 5)]:
        sel = rows[:, 0] == k
        ax.semilogy(rows[sel, 1], np.maximum(rows[sel, 2], 1e-300), marker=".", label=f"k={int(k)}")
    ax.set(xlabel="i", ylabel="lambda_i", title="singular values of Gamma")
    ax.legend(fontsize=8)
    return [_save(fig, out, "spectrum.png")]


def _nonreplicable(result, out):
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.hist(result["xi"], bins=60)
    ax.set(xlabel="xi", ylabel="paths", title="stopped claim")
    return [_save(fig, out, "claims.png")]


def _divergence(result, out):
    rows = result["rows"]
    K = [r["K"] for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(K, [r["min_norm_sq"] for r in rows], marker="o", label="min norm^2")
    ax.plot(K, [k - 1 for k in K], ls="--", label="K - 1")
    ax.set(xlabel="K", ylabel="squared portfolio norm", title="divergence")
    ax.legend()
    return [_save(fig, out, "divergence.png")]


def _replicate(result, out):
    rep = result["report"]
    fig, ax = plt.subplots(1, 2, figsize=(10, 4))
    ax[0].scatter(rep.claim, rep.terminal, s=4)
    lo, hi = float(np.min(rep.claim)), float(np.max(rep.claim))
    ax[0].plot([lo, hi], [lo, hi], color="k", lw=0.8)
    ax[0].set(xlabel="claim", ylabel="hedge terminal", title="replication")
    conv = result["convergence"]
    if conv:
        ax[1].loglog([r["dt"] for r in conv], [max(r["rms_error"], 1e-300) for r in conv], marker="o")
    ax[1].set(xlabel="dt", ylabel="RMS hedge error", title="convergence")
    return [_save(fig, out, "replicate.png")]


def _sign_switching(result, out):
    s = result["samples"]
    fig, ax = plt.subplots(1, 2, figsize=(10, 4))
    ax[0].hist(s["min_f"], bins=40)
    ax[0].set(xlabel="path minimum of f", ylabel="paths")
    ax[1].hist(s["max_discounted"], bins=40)
    ax[1].axvline(1.0, color="k", lw=0.8)
    ax[1].set(xlabel="path maximum of discounted bond", ylabel="paths")
    return [_save(fig, out, "sign_switching.png")]


def _counterexample(result, out):
    s = result["samples"]
    fig, ax = plt.subplots(1, 2, figsize=(10, 4))
    ax[0].hist(s["L"], bins=60)
    ax[0].axvline(-1.0, color="k", lw=0.8)
    ax[0].set(xlabel="L = log M(1)", ylabel="paths")
    ax[1].hist(s["tau"], bins=60)
    ax[1].set(xlabel="tau", ylabel="paths")
    return [_save(fig, out, "counterexample.png")]


_FIGURES = {"simulate": _simulate, "spectrum": _spectrum, "nonreplicable": _nonreplicable,
            "divergence": _divergence, "replicate": _replicate, "sign-switching": _sign_switching,
            "counterexample": _counterexample}


def render_figures(experiment: str, result: dict, out) -> list[str]:
    """Write the experiment's PNG figures into ``out``; returns their file names."""
    return _FIGURES[experiment](result, Path(out))
