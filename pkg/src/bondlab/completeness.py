"""Replication with generalized strategies when Gamma_t is injective.

A claim ``xi = E xi + int <psi_t, dW_t>`` is hedged by the functional
``phi_t(v) = <psi_t, Gamma_t^{-1} v>`` applied to discounted bond-curve
increments.  In spectral form ``Gamma = sum lambda_i h^i (x) g^i`` and

    phi_t(v) = sum_i (<psi_t, g^i> / lambda_i) <h^i, v>_G,

which is unbounded on G as ``lambda_i -> 0`` but well defined on the range of
Gamma_t.  The claim library only holds claims whose integrand is known in
closed form.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import rng as _rng
from .errors import NonInjectiveError
from .incompleteness import HedgeReport
from .market_model import SineGaussian, TimeGrid, VolatilitySpec, discounted_from_forward, evolve
from .operator_lab import RANK_TOL, GammaOperator, GMetric, svd_weighted
from .parallel import map_paths


# ----------------------------------------------------------------------------
# claim library
# ----------------------------------------------------------------------------

class Claim:
    """A claim on the Wiener factors with a closed-form integrand.

    Paths ``W`` have shape ``(P, M + 1, N)`` on the nodes ``times``;
    :meth:`integrand_path` returns ``psi`` at the left node of every step,
    shape ``(P, M, N)``.
    """

    name: str = "claim"
    n_used: int = 1

    def mean(self, horizon: float) -> float:
        raise NotImplementedError

    def terminal(self, W: np.ndarray, times: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def integrand_path(self, W: np.ndarray, times: np.ndarray) -> np.ndarray:
        raise NotImplementedError


@dataclass(frozen=True)
class IntegralClaim(Claim):
    """``xi = <d, W(S)>`` for a constant direction ``d`` (``psi = d``)."""

    direction: tuple
    name: str = "integral"

    @property
    def n_used(self) -> int:
        return len(self.direction)

    def _d(self, N):
        d = np.zeros(N)
        d[: self.n_used] = self.direction
        return d

    def mean(self, horizon):
        return 0.0

    def terminal(self, W, times):
        return W[:, -1, :] @ self._d(W.shape[-1])

    def integrand_path(self, W, times):
        return np.broadcast_to(self._d(W.shape[-1]), (W.shape[0], W.shape[1] - 1, W.shape[-1])).copy()


@dataclass(frozen=True)
class StoppedIntegralClaim(Claim):
    """``xi = <d, W(tau)>`` with ``tau`` the first grid node where ``|<d, W>| >= barrier``."""

    direction: tuple
    barrier: float = 1.0
    name: str = "stopped"

    @property
    def n_used(self) -> int:
        return len(self.direction)

    def _d(self, N):
        d = np.zeros(N)
        d[: self.n_used] = self.direction
        return d

    def mean(self, horizon):
        return 0.0

    def _alive(self, W):
        level = W @ self._d(W.shape[-1])                       # (P, M + 1)
        crossed = np.abs(level) >= self.barrier
        # alive over step k iff no crossing at nodes 0..k
        return np.cumsum(crossed, axis=1)[:, :-1] == 0, level

    def terminal(self, W, times):
        alive, level = self._alive(W)
        stop = np.sum(alive, axis=1)
        return level[np.arange(W.shape[0]), stop]

    def integrand_path(self, W, times):
        alive, _ = self._alive(W)
        return alive[..., None] * self._d(W.shape[-1])


@dataclass(frozen=True)
class ExponentialMartingale(Claim):
    """``xi = exp(a W^1(S) - a^2 S / 2)``, ``psi_t = a xi_t e^1``."""

    a: float = 0.5
    name: str = "expmart"
    n_used: int = 1

    def mean(self, horizon):
        return 1.0

    def _level(self, W, times):
        return np.exp(self.a * W[..., 0] - 0.5 * self.a**2 * times)

    def terminal(self, W, times):
        return self._level(W, times)[:, -1]

    def integrand_path(self, W, times):
        psi = np.zeros((W.shape[0], W.shape[1] - 1, W.shape[-1]))
        psi[..., 0] = self.a * self._level(W, times)[:, :-1]
        return psi

    def project(self, W_end, n, horizon):
        return self.terminal(W_end[:, None, :], np.array([horizon])) if n >= 1 else np.ones(W_end.shape[0])

    def projection_gap(self, n, horizon):
        return 0.0 if n >= 1 else math.exp(self.a**2 * horizon) - 1.0


@dataclass(frozen=True)
class FactorSum(Claim):
    """``xi = sum_{i <= n} W^i(S)``."""

    n_used: int = 4
    name: str = "sum"

    def mean(self, horizon):
        return 0.0

    def terminal(self, W, times):
        return W[:, -1, : self.n_used].sum(axis=1)

    def integrand_path(self, W, times):
        psi = np.zeros((W.shape[0], W.shape[1] - 1, W.shape[-1]))
        psi[..., : self.n_used] = 1.0
        return psi

    def project(self, W_end, n, horizon):
        return W_end[:, : min(n, self.n_used)].sum(axis=1)

    def projection_gap(self, n, horizon):
        return max(self.n_used - n, 0) * horizon


@dataclass(frozen=True)
class FactorProduct(Claim):
    """``xi = W^1(S) W^2(S)``, ``psi_t = (W^2_t, W^1_t, 0, ...)``."""

    name: str = "product"
    n_used: int = 2

    def mean(self, horizon):
        return 0.0

    def terminal(self, W, times):
        return W[:, -1, 0] * W[:, -1, 1]

    def integrand_path(self, W, times):
        psi = np.zeros((W.shape[0], W.shape[1] - 1, W.shape[-1]))
        psi[..., 0] = W[:, :-1, 1]
        psi[..., 1] = W[:, :-1, 0]
        return psi

    def project(self, W_end, n, horizon):
        return W_end[:, 0] * W_end[:, 1] if n >= 2 else np.zeros(W_end.shape[0])

    def projection_gap(self, n, horizon):
        return 0.0 if n >= 2 else horizon**2


CLAIMS = ("zero", "brownian", "expmart", "sum", "product", "stopped")


def claim_library(name: str, n_factors: int = 1, a: float = 0.5) -> Claim:
    """Look up a library claim; factor counts are capped at ``n_factors``."""
    if name == "zero":
        return IntegralClaim((0.0,), name="zero")
    if name == "brownian":
        return IntegralClaim((1.0,), name="brownian")
    if name == "expmart":
        return ExponentialMartingale(a)
    if name == "sum":
        return FactorSum(min(4, n_factors))
    if name == "product":
        if n_factors < 2:
            raise ValueError("product claim needs at least 2 factors")
        return FactorProduct()
    if name == "stopped":
        return StoppedIntegralClaim((1.0,))
    raise ValueError(f"unknown claim {name!r}; choose from {', '.join(CLAIMS)}")


# ----------------------------------------------------------------------------
# sine model structure
# ----------------------------------------------------------------------------

def sine_gaussian_orthogonality(spec: SineGaussian, t: float, horizon: float, n_nodes: int = 2001) -> np.ndarray:
    """Gram matrix ``int_t^S sigma^j sigma^k du`` by the trapezoid rule on ``n_nodes``."""
    if not t < horizon:
        raise ValueError("t must be below the horizon")
    u = np.linspace(t, horizon, n_nodes)
    sig = spec.values(t, u, horizon)
    w = np.full(n_nodes, (horizon - t) / (n_nodes - 1))
    w[[0, -1]] *= 0.5
    return (sig * w) @ sig.T


def injectivity_margin(gamma: GammaOperator) -> float:
    """Smallest singular value at the current truncation."""
    return float(gamma.spectrum.values[-1])


@dataclass(frozen=True)
class GeneralizedStrategy:
    """``phi(v) = sum_i loads[i] <h^i, v>_G`` with ``loads = <psi, g^i> / lambda_i``."""

    loads: np.ndarray
    left: np.ndarray
    metric: GMetric

    def __call__(self, v: np.ndarray) -> float | np.ndarray:
        coords = self.left.T @ self.metric.apply_factor(v)
        return self.loads @ coords

    @property
    def norm_sq(self) -> float:
        """Squared norm as an element of G* (infinite-dimensional limit unbounded)."""
        return float(self.loads @ self.loads)


def _non_injective(values, vectors, step, tolerance):
    cut = tolerance * values[0] if values[0] > 0 else math.inf
    bad = np.flatnonzero(~(values > cut))
    dirs = vectors[:, bad]
    return NonInjectiveError(
        f"Gamma is not injective at step {step}: {bad.size} kernel direction(s) "
        f"(singular value indices {', '.join(str(i + 1) for i in bad)})", dirs, step)


def build_generalized_strategy(gamma: GammaOperator, psi: np.ndarray,
                               tolerance: float = RANK_TOL) -> GeneralizedStrategy:
    psi = np.asarray(psi, dtype=float)
    if psi.shape != (gamma.n_factors,):
        raise ValueError(f"psi must have length {gamma.n_factors}")
    sp = gamma.spectrum
    if sp.rank < gamma.n_factors:
        raise _non_injective(sp.values, sp.vectors, gamma.k, tolerance)
    loads = (sp.vectors.T @ psi) / sp.values
    return GeneralizedStrategy(loads, np.asarray(sp.left), gamma.metric)


# ----------------------------------------------------------------------------
# Monte Carlo replication
# ----------------------------------------------------------------------------

def _coarse_normals(seed, start, stop, steps, fine_steps, n_factors):
    if fine_steps % steps:
        raise ValueError(f"fine steps {fine_steps} not a multiple of {steps}")
    Z = _rng.path_normals(seed, start, stop, (fine_steps, n_factors))
    c = fine_steps // steps
    return Z.reshape(stop - start, steps, c, n_factors).sum(axis=2) / math.sqrt(c)


def replicate_chunk(start: int, stop: int, *, spec, claim, grid, initial_curve, seed, fine_steps=None,
                    tolerance=RANK_TOL) -> dict:
    """Hedge ``claim`` on paths ``start..stop``.

    Normals are drawn at ``fine_steps`` and aggregated, so grids that divide
    ``fine_steps`` see the same Brownian path.
    """
    M, N = grid.steps, spec.n_factors
    normals = _coarse_normals(seed, start, stop, M, fine_steps or M, N)
    P = stop - start
    times = grid.times
    dW = normals * math.sqrt(grid.dt)
    W = np.concatenate([np.zeros((P, 1, N)), np.cumsum(dW, axis=1)], axis=1)
    psi = claim.integrand_path(W, times)
    metric = GMetric.from_grid(grid)
    dT = grid.maturity_step
    wealth = np.empty((P, M + 1))
    wealth[:, 0] = claim.mean(grid.horizon)
    norm_sq = np.zeros((P, M))
    lin_err = np.zeros(P)
    margin = np.full(P, np.inf)
    disc = None
    for step in evolve(spec, grid, initial_curve, normals):
        k = step.k
        if disc is None:
            disc = discounted_from_forward(step.f, dT)
        b = -step.integrals
        G = disc[:, :, None] * (b.T[None] if b.ndim == 2 else np.swapaxes(b, 1, 2))
        Wg = metric.apply_factor(G, axis=1)
        U, s, V = svd_weighted(Wg)
        margin = np.minimum(margin, s[:, -1] / s[:, 0])
        if np.any(s[:, -1] <= tolerance * s[:, 0]):
            p = int(np.argmax(s[:, -1] <= tolerance * s[:, 0]))
            raise NonInjectiveError(f"Gamma is not injective at step {k} on path {start + p}; "
                                    f"increase maturity refinement", V[p][:, s[p] <= tolerance * s[p, 0]], k)
        loads = np.einsum("pji,pj->pi", V, psi[:, k]) / s
        norm_sq[:, k] = np.sum(loads**2, axis=1)
        disc_next = discounted_from_forward(step.f_next, dT)
        coords = np.einsum("pli,pl->pi", U, metric.apply_factor(disc_next - disc, axis=1))
        wealth[:, k + 1] = wealth[:, k] + np.sum(loads * coords, axis=1)
        # diffusion part only: phi(Gamma dW) against <psi, dW>
        lin = np.einsum("pli,pl->pi", U, np.einsum("pln,pn->pl", Wg, step.dW))
        lin_err = np.maximum(lin_err, np.abs(np.sum(loads * lin, axis=1) - np.sum(psi[:, k] * step.dW, axis=1)))
        disc = disc_next
    xi = claim.terminal(W, times)
    return {"claim": xi, "wealth": wealth, "residual": xi - wealth[:, -1], "norm_sq": norm_sq,
            "linearized_error": lin_err, "margin": margin}


def replicate_claim(spec: VolatilitySpec, claim: Claim, grid: TimeGrid, seed: int = 0, paths: int = 1000,
                    initial_curve=None, fine_steps: int | None = None, workers: int = 1) -> HedgeReport:
    """Hedge ``claim`` with the generalized strategy on simulated discounted curves.

    ``linearized_error`` is the largest per-step gap between ``phi(Gamma dW)``
    and ``<psi, dW>`` over all paths.
    """
    if claim.n_used > spec.n_factors:
        raise ValueError(f"claim uses {claim.n_used} factors, model has {spec.n_factors}")
    out = map_paths(replicate_chunk, paths, workers, spec=spec, claim=claim, grid=grid,
                    initial_curve=initial_curve, seed=seed, fine_steps=fine_steps)
    return HedgeReport(out["claim"], claim.mean(grid.horizon), out["wealth"], out["residual"], out["norm_sq"],
                       float(out["linearized_error"].max()))


def replication_convergence(spec: VolatilitySpec, claim: Claim, horizon: float, steps_list, paths: int,
                            seed: int = 0, maturity_refine: int | None = None, initial_curve=None,
                            workers: int = 1) -> list[dict]:
    """RMS hedge error on nested grids driven by one Brownian path per sample.

    ``maturity_refine`` defaults to the factor count, which keeps Gamma
    injective up to the last hedging step.
    """
    steps_list = sorted(int(m) for m in steps_list)
    fine = int(np.lcm.reduce(steps_list))
    R = maturity_refine or spec.n_factors
    rows = []
    for M in steps_list:
        grid = TimeGrid(horizon, M, R)
        rep = replicate_claim(spec, claim, grid, seed, paths, initial_curve, fine, workers)
        rows.append({"dt": grid.dt, "steps": M, "rms_error": rep.rms, "linearized_error": rep.linearized_error})
    return rows


# ----------------------------------------------------------------------------
# finite-factor representation
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class ProjectionDiagnostics:
    """Projection gaps ``E (xi_n - xi)^2`` and the Ito isometry check."""

    n_values: np.ndarray
    gap: np.ndarray
    gap_exact: np.ndarray
    variance: float
    integrand_energy: float
    isometry_diff: float
    isometry_se: float

    @property
    def isometry_z(self) -> float:
        return self.isometry_diff / self.isometry_se if self.isometry_se > 0 else 0.0


def finite_factor_projection(claim: Claim, n_factors: int, grid: TimeGrid, paths: int, seed: int = 0
                             ) -> ProjectionDiagnostics:
    """Project ``claim`` onto the first ``n`` factors and check the Ito isometry.

    The isometry is tested by the paired difference ``(xi - E xi)^2 - sum |psi|^2 dt``
    whose mean should vanish up to Monte Carlo and O(dt) error.
    """
    if not hasattr(claim, "project"):
        raise ValueError(f"claim {claim.name!r} has no closed-form projection")
    Z = _rng.path_normals(seed, 0, paths, (grid.steps, n_factors), stream=_rng.CONTROL)
    dW = Z * math.sqrt(grid.dt)
    W = np.concatenate([np.zeros((paths, 1, n_factors)), np.cumsum(dW, axis=1)], axis=1)
    xi = claim.terminal(W, grid.times)
    ns = np.arange(0, n_factors + 1)
    gap = np.array([np.mean((claim.project(W[:, -1], n, grid.horizon) - xi) ** 2) for n in ns])
    exact = np.array([claim.projection_gap(n, grid.horizon) for n in ns])
    psi = claim.integrand_path(W, grid.times)
    energy = np.sum(psi**2, axis=(1, 2)) * grid.dt
    centred = (xi - claim.mean(grid.horizon)) ** 2
    diff = centred - energy
    return ProjectionDiagnostics(ns, gap, exact, float(centred.mean()), float(energy.mean()),
                                 float(diff.mean()), float(diff.std(ddof=1) / math.sqrt(paths)))
