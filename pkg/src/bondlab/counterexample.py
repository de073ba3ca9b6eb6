"""A bounded terminal value with two integral representations.

With a scalar Brownian motion ``B`` let ``tau = inf{t : B(t)^2 + t >= 1}`` and
``X(t) = -2 B(t) / (1 - t)^2`` on ``[0, tau]``.  Ito's formula gives

    L = int X dB - 1/2 int X^2 dt = -1 - 2 int_0^tau B^2 ((1-s)^-4 - (1-s)^-3) ds < -1,

so ``M(1) = exp(L) < 1/e`` although ``M(0) = 1``.  The exponential ``M`` is a
strict local martingale: ``M(1) = 1 + int M X dB = E M(1) + int psi dB`` are two
different representations of one bounded variable.

Time is discretized on a geometric grid that crowds toward ``t = 1`` where
``X`` blows up; all integrals are left-point (Ito) sums stopped at ``tau``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from . import rng as _rng
from .parallel import map_paths

DEFAULT_EPS = 1e-6


def geometric_grid(steps: int, eps: float = DEFAULT_EPS) -> np.ndarray:
    """``steps + 1`` nodes: ``1 - eps^(j/(steps-1))`` for ``j < steps``, then 1."""
    if steps < 2:
        raise ValueError("need at least 2 steps")
    if not 0 < eps < 1:
        raise ValueError("eps must lie in (0, 1)")
    j = np.arange(steps) / (steps - 1)
    t = 1.0 - eps**j
    t[0] = 0.0
    return np.append(t, 1.0)


@dataclass(frozen=True)
class CounterexamplePath:
    times: np.ndarray
    B: np.ndarray
    tau_index: int
    X: np.ndarray       # left-point integrand, zero from tau on
    L: float
    L_ito: float        # closed-form exponent evaluated with the same sums
    X2: float           # int_0^tau X^2 dt

    @property
    def tau(self) -> float:
        return float(self.times[self.tau_index])

    @property
    def M1(self) -> float:
        return math.exp(self.L)


def _paths(dB: np.ndarray, t: np.ndarray) -> dict:
    P = dB.shape[0]
    dt = np.diff(t)
    B = np.concatenate([np.zeros((P, 1)), np.cumsum(dB, axis=1)], axis=1)
    hit = B**2 + t >= 1.0
    hit[:, 0] = False
    hit[:, -1] = True      # B(1)^2 + 1 >= 1 always
    k_tau = np.argmax(hit, axis=1)
    left = t[:-1]
    active = np.arange(dt.size)[None, :] < k_tau[:, None]
    X = np.where(active, -2.0 * B[:, :-1] / (1.0 - left) ** 2, 0.0)
    X2 = np.sum(X**2 * dt, axis=1)
    L = np.sum(X * dB, axis=1) - 0.5 * X2
    weight = (1.0 - left) ** -4 - (1.0 - left) ** -3
    L_ito = -1.0 - 2.0 * np.sum(np.where(active, B[:, :-1] ** 2 * weight * dt, 0.0), axis=1)
    # control: bounded deterministic integrand x = 1, a true martingale
    control = np.exp(B[:, -1] - 0.5)
    return {"B": B, "X": X, "k_tau": k_tau, "L": L, "L_ito": L_ito, "X2": X2, "control": control}


def simulate_counterexample(seed: int = 0, path: int = 0, steps: int = 10_000, eps: float = DEFAULT_EPS,
                            normals: np.ndarray | None = None) -> CounterexamplePath:
    """One path; ``normals`` (length ``steps``) overrides the seeded stream."""
    t = geometric_grid(steps, eps)
    if normals is None:
        normals = _rng.path_rng(seed, path, _rng.COUNTEREXAMPLE).standard_normal(steps)
    normals = np.asarray(normals, dtype=float)
    if normals.shape != (steps,):
        raise ValueError(f"normals must have shape ({steps},)")
    r = _paths((normals * np.sqrt(np.diff(t)))[None], t)
    return CounterexamplePath(t, r["B"][0], int(r["k_tau"][0]), r["X"][0], float(r["L"][0]),
                              float(r["L_ito"][0]), float(r["X2"][0]))


def counterexample_chunk(start: int, stop: int, *, steps: int, eps: float, seed: int) -> dict:
    t = geometric_grid(steps, eps)
    Z = _rng.path_normals(seed, start, stop, (steps,), stream=_rng.COUNTEREXAMPLE)
    r = _paths(Z * np.sqrt(np.diff(t)), t)
    return {"tau": t[r["k_tau"]], "L": r["L"], "M1": np.exp(r["L"]), "L_ito": r["L_ito"], "X2": r["X2"],
            "control": r["control"]}


def sample_counterexample(paths: int, steps: int = 10_000, eps: float = DEFAULT_EPS, seed: int = 0,
                          workers: int = 1) -> dict:
    return map_paths(counterexample_chunk, paths, workers, steps=steps, eps=eps, seed=seed)


@dataclass(frozen=True)
class MeanEstimate:
    mean: float
    std_err: float
    level: float = 0.99

    @property
    def half_width(self) -> float:
        return float(stats.norm.ppf(0.5 + self.level / 2) * self.std_err)

    @property
    def lower(self) -> float:
        return self.mean - self.half_width

    @property
    def upper(self) -> float:
        return self.mean + self.half_width


def mean_estimate(values: np.ndarray, level: float = 0.99) -> MeanEstimate:
    values = np.asarray(values, dtype=float)
    se = values.std(ddof=1) / math.sqrt(values.size) if values.size > 1 else 0.0
    return MeanEstimate(float(values.mean()), float(se), level)


@dataclass(frozen=True)
class ExpectationGap:
    estimate: MeanEstimate
    gap_to_inv_e: float     # e^-1 - upper CI
    sigmas_below_one: float

    @property
    def below_one(self) -> bool:
        return self.estimate.mean + 3 * self.estimate.std_err < 1.0


def expectation_gap(M1: np.ndarray, level: float = 0.99) -> ExpectationGap:
    est = mean_estimate(M1, level)
    below = (1.0 - est.mean) / est.std_err if est.std_err > 0 else math.inf
    return ExpectationGap(est, math.exp(-1) - est.upper, below)


@dataclass(frozen=True)
class DualRepresentation:
    """The constants ``x = E M(1)`` and ``y = M(0) = 1`` of the two representations."""

    x: MeanEstimate
    y: float
    separation_ci: float        # (y - x) in units of the CI half-width
    x2_coarse: float
    x2_fine: float
    control: MeanEstimate

    @property
    def x2_growth(self) -> float:
        return self.x2_fine / self.x2_coarse if self.x2_coarse > 0 else math.inf

    @property
    def control_ok(self) -> bool:
        return abs(self.control.mean - 1.0) <= 3 * self.control.std_err


def dual_representation_report(fine: dict, coarse: dict, level: float = 0.99) -> DualRepresentation:
    """Compare representation constants; ``fine`` and ``coarse`` are sample dicts at two refinements."""
    x = mean_estimate(fine["M1"], level)
    sep = (1.0 - x.mean) / x.half_width if x.half_width > 0 else math.inf
    return DualRepresentation(x, 1.0, sep, float(np.mean(coarse["X2"])), float(np.mean(fine["X2"])),
                              mean_estimate(fine["control"], level))
