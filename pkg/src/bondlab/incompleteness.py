"""A bounded claim that no G*-valued strategy replicates.

From the singular values ``lambda_i`` of Gamma_t pick indices

    i_1 = inf{i : 1/lambda_i >= 1},   i_{k+1} = inf{i > i_k : 1/lambda_i >= k}

and put ``psi~^{i_k} = 1/k``.  Then ``|psi~|^2 <= pi^2/6`` while the minimal
portfolio norm ``sum (psi~^i / lambda_i)^2`` diverges, so ``psi~`` lies outside
the range of Gamma*.  Stopping the integral ``int <psi~, dW>`` when it reaches
``+-1`` makes the claim bounded.

The module also checks the L2 admissibility bounds of the sign-switching model,
where volatility is switched off wherever the accumulated noise of a maturity
is negative.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import rng as _rng
from .errors import InsufficientTruncationError
from .market_model import (ForwardSurface, SignSwitching, TimeGrid, VolatilitySpec, discounted_from_forward,
                           evolve, initial_curve_on_grid)
from .operator_lab import (RANK_TOL, GammaOperator, GMetric, SpectralData, assemble_gamma, h_norm_sq,
                           svd_weighted)

BASEL = math.pi**2 / 6


# ----------------------------------------------------------------------------
# psi~ construction
# ----------------------------------------------------------------------------

def psi_tilde_coefficients(values: np.ndarray, tolerance: float = RANK_TOL) -> np.ndarray:
    """Spectral coefficients of psi~ for singular values ``(..., N)``.

    Values at or below ``tolerance * values[..., 0]`` count as zero, i.e. their
    reciprocal is infinite and passes every threshold.
    """
    lam = np.asarray(values, dtype=float)
    cutoff = tolerance * lam[..., :1]
    with np.errstate(divide="ignore"):
        inv = np.where(lam > cutoff, 1.0 / np.where(lam > cutoff, lam, 1.0), np.inf)
    out = np.zeros_like(lam)
    found = np.zeros(lam.shape[:-1])
    for i in range(lam.shape[-1]):
        threshold = np.maximum(found, 1.0)
        hit = inv[..., i] >= threshold
        out[..., i] = np.where(hit, 1.0 / (found + 1.0), 0.0)
        found = found + hit
    return out


@dataclass(frozen=True)
class PsiTilde:
    """psi~ in spectral coordinates: ``coefficients[i_k - 1] = 1/k``."""

    indices: tuple          # 1-based i_1 < i_2 < ...
    coefficients: np.ndarray

    @property
    def norm_sq(self) -> float:
        return float(self.coefficients @ self.coefficients)

    def truncated(self, K: int) -> np.ndarray:
        """Spectral vector keeping only the first ``K`` indices."""
        out = np.zeros_like(self.coefficients)
        keep = np.asarray(self.indices[:K], dtype=int) - 1
        out[keep] = self.coefficients[keep]
        return out


def build_psi_tilde(spectrum: SpectralData | np.ndarray, tolerance: float = RANK_TOL) -> PsiTilde:
    values = spectrum.values if isinstance(spectrum, SpectralData) else np.asarray(spectrum, dtype=float)
    if isinstance(spectrum, SpectralData):
        tolerance = spectrum.tolerance
    if values.ndim != 1 or values.size == 0:
        raise ValueError("need a non-empty 1-d array of singular values")
    if np.any(np.diff(values) > 0):
        raise ValueError("singular values must be nonincreasing")
    coef = psi_tilde_coefficients(values, tolerance)
    indices = tuple(int(i) + 1 for i in np.flatnonzero(coef))
    if len(indices) < 2:
        warnings.warn(f"only {len(indices)} usable index at truncation N={values.size}; increase N",
                      RuntimeWarning, stacklevel=2)
    coef.setflags(write=False)
    return PsiTilde(indices, coef)


# ----------------------------------------------------------------------------
# minimal-norm portfolio
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class MinNormPortfolio:
    """Smallest G*-portfolio ``phi`` with ``Gamma* phi`` equal to the in-range part of a target.

    ``portfolio`` is the Riesz representer of ``phi`` as a curve on the maturity
    nodes, ``loads[i] = <target, g^i> / lambda_i`` (zero where ``lambda_i = 0``)
    and ``residual_norm`` the l2 norm of the part of the target that no
    portfolio reaches.
    """

    portfolio: np.ndarray
    loads: np.ndarray
    norm_sq: float
    residual_norm: float


def min_norm_portfolio(gamma: GammaOperator, target: np.ndarray) -> MinNormPortfolio:
    target = np.asarray(target, dtype=float)
    if target.shape != (gamma.n_factors,):
        raise ValueError(f"target must have length {gamma.n_factors}")
    sp = gamma.spectrum
    keep = sp.positive
    proj = sp.vectors.T @ target
    loads = np.zeros_like(proj)
    loads[keep] = proj[keep] / sp.values[keep]
    portfolio = gamma.metric.solve_factor(sp.left @ loads)
    residual = target - sp.vectors[:, keep] @ proj[keep]
    return MinNormPortfolio(portfolio, loads, float(loads @ loads), float(np.linalg.norm(residual)))


def divergence_profile(surface: ForwardSurface | GammaOperator, K_values, spec: VolatilitySpec | None = None,
                       k: int = 0) -> list[dict]:
    """Minimal portfolio norm needed for psi~ truncated to its first ``K`` indices.

    Rows carry ``K``, ``min_norm_sq``, the index ``i_K`` and ``lambda_{i_K}``.
    Raises :class:`InsufficientTruncationError` when fewer than ``max(K)``
    indices exist at the current truncation.
    """
    gamma = surface if isinstance(surface, GammaOperator) else assemble_gamma(surface, spec, k)
    sp = gamma.spectrum
    psi = build_psi_tilde(sp)
    K_values = sorted(int(K) for K in K_values)
    if not K_values or K_values[0] < 1:
        raise ValueError("K values must be positive integers")
    if K_values[-1] > len(psi.indices):
        raise InsufficientTruncationError(
            f"N={gamma.n_factors} exposes {len(psi.indices)} indices, K={K_values[-1]} requested")
    rows = []
    for K in K_values:
        target = sp.vectors @ psi.truncated(K)
        sol = min_norm_portfolio(gamma, target)
        i_K = psi.indices[K - 1]
        norm_sq = sol.norm_sq if sol.residual_norm <= 1e-12 else math.inf
        rows.append({"K": K, "min_norm_sq": norm_sq, "index": i_K, "lambda": float(sp.values[i_K - 1])})
    return rows


# ----------------------------------------------------------------------------
# the stopped claim
# ----------------------------------------------------------------------------

@dataclass
class HedgeReport:
    """Per-path record of a hedging or replication experiment.

    ``wealth[p, k]`` is the value after ``k`` steps, ``residual = claim -
    wealth[:, -1]`` and ``norm_profile[p, k]`` the squared G*-norm of the
    portfolio held over step ``k``.
    """

    claim: np.ndarray
    initial_capital: float
    wealth: np.ndarray
    residual: np.ndarray
    norm_profile: np.ndarray
    linearized_error: float = math.nan

    @property
    def terminal(self) -> np.ndarray:
        return self.wealth[:, -1]

    @property
    def rms(self) -> float:
        return float(np.sqrt(np.mean(self.residual**2)))


@dataclass(frozen=True)
class PsiProcess:
    """psi along one path: ``coefficients[k]`` spectral, ``psi[k]`` in l2 coordinates.

    ``running[k]`` is ``I_k = sum_{j<k} <psi_j, dW_j>``; ``stop_index`` the grid
    node where ``|I|`` first reached 1 (``steps`` if never).
    """

    coefficients: np.ndarray
    psi: np.ndarray
    running: np.ndarray
    stop_index: int
    tau: float

    @property
    def norm_sq(self) -> np.ndarray:
        return np.sum(self.coefficients**2, axis=-1)


@dataclass(frozen=True)
class StoppedClaim:
    xi: float
    process: PsiProcess
    report: HedgeReport
    overshoot: float
    max_increment: float
    hit: bool


def _psi_from_weighted(W: np.ndarray, tolerance: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    _, s, V = svd_weighted(W)
    coef = psi_tilde_coefficients(s, tolerance)
    psi = np.einsum("...ij,...j->...i", V, coef)
    return coef, psi, s


def _portfolio_norm_sq(coef: np.ndarray, s: np.ndarray, tolerance: float) -> np.ndarray:
    positive = s > tolerance * s[..., :1]
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(positive, coef / np.where(positive, s, 1.0), np.where(coef > 0, np.inf, 0.0))
    return np.sum(ratio**2, axis=-1)


def nonreplicable_claim(surface: ForwardSurface, spec: VolatilitySpec | None = None, mode: str = "pointwise",
                        barrier: float = 1.0, tolerance: float = RANK_TOL) -> StoppedClaim:
    """Stopped integral of psi~ along one simulated path.

    ``mode="pointwise"`` rebuilds psi~ from the spectrum of Gamma_{t_k} at
    every step; ``"frozen"`` keeps the vector built at ``t = 0``.
    """
    if mode not in ("pointwise", "frozen"):
        raise ValueError(f"mode must be 'pointwise' or 'frozen', got {mode!r}")
    if surface.increments is None:
        raise ValueError("surface was simulated without keeping increments")
    spec = spec or surface.spec
    M = surface.grid.steps
    N = spec.n_factors
    coefs = np.zeros((M, N))
    psis = np.zeros((M, N))
    norms = np.zeros((M, 1))
    running = np.zeros(M + 1)
    stop = M
    increments = np.zeros(M)
    for k in range(M):
        if mode == "pointwise" or k == 0:
            gamma = assemble_gamma(surface, spec, k)
            coef, psi, s = _psi_from_weighted(gamma.weighted, tolerance)
            norm = _portfolio_norm_sq(coef, s, tolerance)
        if k < stop:
            coefs[k], psis[k], norms[k] = coef, psi, norm
            increments[k] = psi @ surface.increments[k]
        running[k + 1] = running[k] + increments[k]
        if k < stop and abs(running[k + 1]) >= barrier:
            stop = k + 1
    xi = float(running[-1])
    tau = float(surface.grid.times[stop])
    hit = stop < M or abs(xi) >= barrier
    process = PsiProcess(coefs, psis, running, stop, tau)
    report = HedgeReport(np.array([xi]), 0.0, running[None, :], np.array([0.0]), norms.T)
    return StoppedClaim(xi, process, report, max(abs(xi) - barrier, 0.0), float(np.max(np.abs(increments))), hit)


def claim_chunk(start: int, stop: int, *, spec, grid, initial_curve, seed, mode="pointwise",
                barrier=1.0, tolerance=RANK_TOL) -> dict:
    """Batched :func:`nonreplicable_claim` for paths ``start..stop``."""
    normals = _rng.path_normals(seed, start, stop, (grid.steps, spec.n_factors))
    P = stop - start
    metric = GMetric.from_grid(grid)
    dT = grid.maturity_step
    I = np.zeros(P)
    active = np.ones(P, dtype=bool)
    stop_index = np.full(P, grid.steps)
    max_inc = np.zeros(P)
    psi_norm = np.zeros(P)
    psi = None
    for step in evolve(spec, grid, initial_curve, normals):
        if mode == "pointwise" or psi is None:
            disc = discounted_from_forward(step.f, dT)
            b = -step.integrals
            if b.ndim == 2:
                G = disc[:, :, None] * b.T[None]
            else:
                G = disc[:, :, None] * np.swapaxes(b, 1, 2)
            coef, psi, _ = _psi_from_weighted(metric.apply_factor(G, axis=1), tolerance)
            psi_norm = np.maximum(psi_norm, np.sum(coef**2, axis=-1))
        inc = np.where(active, np.sum(psi * step.dW, axis=-1), 0.0)
        max_inc = np.maximum(max_inc, np.abs(inc))
        I = I + inc
        crossed = active & (np.abs(I) >= barrier)
        stop_index[crossed] = step.k + 1
        active &= ~crossed
    hit = stop_index < grid.steps
    hit |= np.abs(I) >= barrier
    return {"xi": I, "tau": grid.times[stop_index], "overshoot": np.maximum(np.abs(I) - barrier, 0.0),
            "max_increment": max_inc, "psi_norm_sq": psi_norm, "hit": hit}


# ----------------------------------------------------------------------------
# sign-switching model
# ----------------------------------------------------------------------------

def basel_bound(horizon: float, n_factors: int) -> float:
    """``horizon^2 * sum_{i <= N} 1/i^2``."""
    i = np.arange(1, n_factors + 1)
    return float(horizon**2 * np.sum(1.0 / i**2))


def validate_switching_base(base: VolatilitySpec, grid: TimeGrid, atol: float = 1e-12) -> float:
    """Reject a base with negative entries or ``|sigma~^i(t, .)|_H^2 > 1/i^2``.

    Returns the bound ``K = max sigma~``.
    """
    T = grid.maturities
    i = np.arange(1, base.n_factors + 1)
    K = 0.0
    for t in grid.times:
        vals = base.values(float(t), T, grid.horizon)
        if np.any(vals < 0):
            raise ValueError(f"base volatility negative at t={t}")
        norms = h_norm_sq(vals, grid.maturity_step)
        bad = np.flatnonzero(norms > 1.0 / i**2 + atol)
        if bad.size:
            j = bad[0]
            raise ValueError(f"|sigma~^{j + 1}(t={t}, .)|_H^2 = {norms[j]:.6g} exceeds 1/{j + 1}^2")
        K = max(K, float(vals.max(initial=0.0)))
    return K


def harmonic_indicator_base(n_factors: int, grid: TimeGrid):
    """``sigma~^i(t, T) = (1/i) 1{t < T}``, which meets ``|sigma~^i|_H^2 <= 1/i^2`` on ``[0, 1]``."""
    from .market_model import Tabulated
    scale = min(1.0, 1.0 / math.sqrt(grid.horizon))
    return Tabulated.from_function(lambda i, t, T: scale * (T > t) / i, n_factors, grid)


def sample_strategies(grid: TimeGrid, discounted: np.ndarray) -> dict:
    """Density-valued strategies ``phi(T)`` used to probe the Gamma* bound, each ``(P, L)``."""
    T = grid.maturities
    S = grid.horizon
    P = discounted.shape[0]
    ones = np.ones((P, T.size))
    return {"one": ones, "cosine": ones * np.cos(np.pi * T / S), "linear": ones * T / S,
            "discounted": discounted}


def rate_slack(spec: VolatilitySpec, grid: TimeGrid, width: float = 6.0) -> float:
    """``width * sqrt(dt) * sqrt(sum_i max sigma^i^2)``: a few one-step noise deviations."""
    T = grid.maturities
    peak = np.zeros(spec.n_factors)
    base = spec.base if isinstance(spec, SignSwitching) else spec
    for t in grid.times:
        peak = np.maximum(peak, np.max(np.abs(base.values(float(t), T, grid.horizon)), axis=1, initial=0.0))
    return float(width * math.sqrt(grid.dt) * math.sqrt(np.sum(peak**2)))


def sign_switching_chunk(start: int, stop: int, *, spec, grid, initial_curve, seed) -> dict:
    """Per-path extremes of the quantities bounded in the admissibility check."""
    normals = _rng.path_normals(seed, start, stop, (grid.steps, spec.n_factors))
    P = stop - start
    dT = grid.maturity_step
    f0 = initial_curve_on_grid(initial_curve, grid)
    min_f = np.full(P, f0.min())
    max_disc = np.full(P, discounted_from_forward(f0, dT).max())
    b_sq = np.zeros(P)
    cs_ratio = np.zeros(P)           # |Gamma* phi|^2 over its Cauchy-Schwarz bound, <= 1
    chain = np.zeros(P)              # max |Gamma* phi|^2 / (int phi^2)
    for step in evolve(spec, grid, f0, normals):
        disc = discounted_from_forward(step.f, dT)
        b = -step.integrals
        if b.ndim == 2:
            b = np.broadcast_to(b, (P,) + b.shape)
        b_sq = np.maximum(b_sq, np.sum(h_norm_sq(b, dT), axis=-1))
        cols = disc[:, None, :] * b                      # (P, N, L)
        col_sq = np.sum(h_norm_sq(cols, dT), axis=-1)    # sum_i int (P^ b^i)^2
        for phi in sample_strategies(grid, disc).values():
            w = phi[:, None, :] * cols
            adj = np.sum(0.5 * (w[..., 1:] + w[..., :-1]), axis=-1) * dT   # (Gamma* phi)_i
            lhs = np.sum(adj**2, axis=-1)
            phi_sq = h_norm_sq(phi, dT)
            denom = phi_sq * col_sq
            cs_ratio = np.maximum(cs_ratio, np.where(denom > 0, lhs / np.where(denom > 0, denom, 1.0), 0.0))
            chain = np.maximum(chain, lhs / np.where(phi_sq > 0, phi_sq, 1.0))
        min_f = np.minimum(min_f, step.f_next.min(axis=1))
        max_disc = np.maximum(max_disc, discounted_from_forward(step.f_next, dT).max(axis=1))
    return {"min_f": min_f, "max_discounted": max_disc, "b_square": b_sq, "cs_ratio": cs_ratio, "chain": chain}


@dataclass(frozen=True)
class AdmissibilityCheck:
    check: str
    passed: bool
    margin: float
    violations: int


def sign_switching_admissibility(samples: dict, spec: VolatilitySpec, grid: TimeGrid,
                                 price_tol: float = 1e-12) -> list[AdmissibilityCheck]:
    """Turn per-path extremes from :func:`sign_switching_chunk` into pass/fail rows.

    ``margin`` is the distance to the bound at the worst path (negative when
    violated); ``violations`` counts offending paths.
    """
    bound = basel_bound(grid.horizon, spec.n_factors)
    eps = rate_slack(spec, grid)
    rows = []

    def add(name, values, limit, upper=True):
        margin = (limit - values) if upper else (values - limit)
        rows.append(AdmissibilityCheck(name, bool(np.all(margin >= 0)), float(np.min(margin)),
                                       int(np.sum(margin < 0))))

    add("nonnegative_rates", samples["min_f"], -eps, upper=False)
    add("discounted_bound", samples["max_discounted"], 1.0 + price_tol)
    add("b_square_bound", samples["b_square"], bound)
    add("cauchy_schwarz", samples["cs_ratio"], 1.0 + 1e-12)
    add("gamma_star_bound", samples["chain"], bound)
    return rows
