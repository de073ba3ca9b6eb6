"""The bond-price operator Gamma_t : l2 -> G = H^1[0, S] at finite truncation.

Column ``i`` of Gamma_t is the curve ``T -> P^(t, T) b^i(t, T)`` with
``b^i(t, T) = -int_0^T sigma^i(t, u) du``.  Curves in G carry the inner product

    <g, h>_G = g(0) h(0) + int g'(u) h'(u) du

discretized with forward differences on the maturity nodes.  The Gram matrix
factors as ``M_G = F^T F`` where ``F g = (g_0, (g_1 - g_0)/sqrt(h), ...)``, so the
G-weighted singular value problem for Gamma is an ordinary SVD of ``F Gamma``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .market_model import (ForwardSurface, TimeGrid, VolatilitySpec, discounted_curve,
                           trapezoid_from_zero)

RANK_TOL = 1e-12


@dataclass(frozen=True)
class GMetric:
    """Discrete H^1 metric on ``size`` uniformly spaced nodes."""

    spacing: float
    size: int

    @classmethod
    def from_grid(cls, grid: TimeGrid) -> "GMetric":
        return cls(grid.maturity_step, grid.n_maturities)

    def apply_factor(self, g: np.ndarray, axis: int = 0) -> np.ndarray:
        """``F g`` along ``axis`` (the node axis)."""
        g = np.asarray(g, dtype=float)
        if g.shape[axis] != self.size:
            raise ValueError(f"curve has {g.shape[axis]} nodes, metric expects {self.size}")
        head = np.take(g, [0], axis=axis)
        return np.concatenate([head, np.diff(g, axis=axis) / math.sqrt(self.spacing)], axis=axis)

    @property
    def factor(self) -> np.ndarray:
        return self.apply_factor(np.eye(self.size))

    @property
    def gram(self) -> np.ndarray:
        F = self.factor
        return F.T @ F

    def inner(self, g: np.ndarray, h: np.ndarray) -> float:
        return float(self.apply_factor(g) @ self.apply_factor(h))

    def solve_factor(self, y: np.ndarray, axis: int = 0) -> np.ndarray:
        """Curve ``g`` with ``F g = y`` (inverse of :meth:`apply_factor`)."""
        y = np.asarray(y, dtype=float)
        head = np.take(y, [0], axis=axis)
        tail = np.take(y, np.arange(1, y.shape[axis]), axis=axis) * math.sqrt(self.spacing)
        return np.concatenate([head, head + np.cumsum(tail, axis=axis)], axis=axis)


def g_norm(values: np.ndarray, metric: GMetric) -> float:
    """``sqrt(g(0)^2 + sum ((g_{l+1} - g_l)/h)^2 h)``."""
    values = np.asarray(values, dtype=float)
    if values.ndim != 1 or values.size != metric.size:
        raise ValueError(f"curve has {values.size} values, metric expects {metric.size}")
    return float(np.linalg.norm(metric.apply_factor(values)))


def h_norm_sq(values: np.ndarray, spacing: float) -> np.ndarray:
    """Squared L2 norm on ``[0, S]`` by the trapezoid rule, along the last axis."""
    v = np.asarray(values, dtype=float) ** 2
    return np.sum(0.5 * (v[..., 1:] + v[..., :-1]), axis=-1) * spacing


# ----------------------------------------------------------------------------
# spectral data
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class SpectralData:
    """Singular system of Gamma as a map ``l2 -> (G, <.,.>_G)``.

    ``values`` are nonincreasing, ``vectors[:, i]`` is the right singular vector
    ``g^i`` in factor coordinates and ``left[:, i]`` the matching left vector in
    factor-transformed curve coordinates (``F h^i``).  Values below
    ``RANK_TOL * values[0]`` count as zero.
    """

    values: np.ndarray
    vectors: np.ndarray
    left: np.ndarray
    rank: int
    tolerance: float = RANK_TOL

    @property
    def cutoff(self) -> float:
        return self.tolerance * (self.values[0] if self.values.size else 0.0)

    @property
    def positive(self) -> np.ndarray:
        """Mask of singular values treated as nonzero."""
        return self.values > self.cutoff if self.values[0] > 0 else np.zeros(self.values.size, bool)


def _normalize_signs(U: np.ndarray, Vt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # largest-magnitude entry of each right vector positive; works on stacks
    idx = np.argmax(np.abs(Vt), axis=-1)
    sign = np.sign(np.take_along_axis(Vt, idx[..., None], axis=-1))
    sign[sign == 0] = 1.0
    return U * np.swapaxes(sign, -1, -2), Vt * sign


def svd_weighted(W: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """SVD of ``F Gamma`` stacks ``(..., L, N)`` padded to ``N`` singular values.

    Returns ``U (..., L, N)``, ``s (..., N)``, ``V (..., N, N)`` (columns are
    right singular vectors) with a deterministic sign convention.
    """
    L, N = W.shape[-2:]
    if L >= N:
        U, s, Vt = np.linalg.svd(W, full_matrices=False)
    else:
        U, s, Vt = np.linalg.svd(W, full_matrices=True)
        pad = N - L
        s = np.concatenate([s, np.zeros(s.shape[:-1] + (pad,))], axis=-1)
        U = np.concatenate([U, np.zeros(U.shape[:-1] + (pad,))], axis=-1)
    U, Vt = _normalize_signs(U, Vt)
    return U, s, np.swapaxes(Vt, -1, -2)


# ----------------------------------------------------------------------------
# operator
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class GammaOperator:
    """Gamma at calendar index ``k`` as an ``(L, N)`` matrix on maturity nodes."""

    k: int
    t: float
    matrix: np.ndarray
    b: np.ndarray
    discounted: np.ndarray
    metric: GMetric

    @classmethod
    def from_matrix(cls, matrix: np.ndarray, spacing: float, k: int = 0, t: float = 0.0) -> "GammaOperator":
        """Wrap a raw ``(L, N)`` matrix, e.g. a hand-built fixture."""
        matrix = np.array(matrix, dtype=float)
        matrix.setflags(write=False)
        L = matrix.shape[0]
        return cls(k, t, matrix, matrix, np.ones(L), GMetric(spacing, L))

    @property
    def n_factors(self) -> int:
        return self.matrix.shape[1]

    @cached_property
    def weighted(self) -> np.ndarray:
        return self.metric.apply_factor(self.matrix)

    @cached_property
    def spectrum(self) -> SpectralData:
        return spectrum(self)

    def apply(self, u: np.ndarray) -> np.ndarray:
        return self.matrix @ np.asarray(u, dtype=float)

    def adjoint(self, g: np.ndarray) -> np.ndarray:
        return gamma_adjoint(self, g)

    def q_apply(self, g: np.ndarray) -> np.ndarray:
        """``Q g = Gamma Gamma' g``."""
        return self.apply(self.adjoint(g))

    def preimage(self, g: np.ndarray) -> np.ndarray:
        """Minimal-norm ``u`` with ``Gamma u`` closest to ``g`` in G."""
        sp = self.spectrum
        keep = sp.positive
        coef = sp.left[:, keep].T @ self.metric.apply_factor(g)
        return sp.vectors[:, keep] @ (coef / sp.values[keep])


def gamma_from_curves(k: int, t: float, discounted: np.ndarray, integrals: np.ndarray,
                      metric: GMetric) -> GammaOperator:
    """Build Gamma from ``P^(t, .)`` and ``int_t^T sigma^i`` given as ``(N, L)``."""
    b = -np.asarray(integrals, dtype=float).T
    matrix = discounted[:, None] * b
    for arr in (b, matrix):
        arr.setflags(write=False)
    return GammaOperator(k, t, matrix, b, np.asarray(discounted), metric)


def assemble_gamma(surface: ForwardSurface, spec: VolatilitySpec | None = None, k: int = 0) -> GammaOperator:
    """Gamma_{t_k} for one simulated path.

    Entry ``(l, i)`` is ``P^(t_k, T_l) b^i(t_k, T_l)``; ``b`` uses the same inner
    integral as the drift (closed form where available, trapezoid otherwise).
    """
    spec = spec or surface.spec
    grid = surface.grid
    if not 0 <= k <= grid.steps:
        raise ValueError(f"time index {k} outside 0..{grid.steps}")
    t = float(grid.times[k])
    T = grid.maturities
    state = None if surface.state is None else surface.state[k]
    sigma = spec.values(t, T, grid.horizon, state)
    integrals = spec.integrals(t, T, grid.horizon, sigma)
    disc = discounted_curve(surface, k).discounted
    return gamma_from_curves(k, t, disc, integrals, GMetric.from_grid(grid))


def gamma_adjoint(gamma: GammaOperator, g: np.ndarray) -> np.ndarray:
    """``Gamma' g = Gamma^T M_G g``, the adjoint with respect to the G inner product."""
    return gamma.weighted.T @ gamma.metric.apply_factor(g)


def hs_norm(gamma: GammaOperator) -> float:
    """Hilbert-Schmidt norm ``sqrt(sum_i |Gamma e^i|_G^2)``."""
    return float(np.linalg.norm(gamma.weighted))


def spectrum(gamma: GammaOperator, tolerance: float = RANK_TOL) -> SpectralData:
    W = gamma.weighted
    if not np.all(np.isfinite(W)):
        raise np.linalg.LinAlgError("Gamma has non-finite entries")
    U, s, V = svd_weighted(W)
    rank = int(np.sum(s > tolerance * s[0])) if s[0] > 0 else 0
    for arr in (U, s, V):
        arr.setflags(write=False)
    return SpectralData(s, V, U, rank, tolerance)


def spectrum_rows(gamma: GammaOperator) -> list[tuple[int, int, float]]:
    """``(k, i, lambda)`` rows with 1-based ``i``."""
    return [(gamma.k, i + 1, float(v)) for i, v in enumerate(gamma.spectrum.values)]


# ----------------------------------------------------------------------------
# Hilbert-Schmidt bound
# ----------------------------------------------------------------------------

@dataclass
class BoundReport:
    """Column-wise check of ``|Gamma e^i|_G^2 <= 2 B^2 (S A + 1) |sigma^i|_H^2``.

    ``A = max_k |f(t_k, .)|_H`` and ``B = max |P^|``.  ``slack_needed`` is the
    smallest ``C`` with ``lhs <= rhs + C dt`` everywhere; ``violations`` counts
    entries exceeding ``rhs + slack_constant * dt``.
    """

    A: float
    B: float
    lhs: np.ndarray
    rhs: np.ndarray
    dt: float
    slack_constant: float
    hs_integral: float

    @property
    def margin(self) -> np.ndarray:
        return self.rhs - self.lhs

    @property
    def slack_needed(self) -> float:
        return float(max(0.0, np.max(self.lhs - self.rhs) / self.dt))

    @property
    def violations(self) -> int:
        return int(np.sum(self.lhs > self.rhs + self.slack_constant * self.dt))

    @property
    def passed(self) -> bool:
        return self.violations == 0


def column_bound_report(surface: ForwardSurface, spec: VolatilitySpec | None = None,
                        slack_constant: float = 10.0) -> BoundReport:
    spec = spec or surface.spec
    grid = surface.grid
    h = grid.maturity_step
    S = grid.horizon
    A = float(np.sqrt(np.max(h_norm_sq(surface.f, h))))
    disc = np.exp(-trapezoid_from_zero(surface.f, h))
    B = float(np.max(np.abs(disc)))
    # |f|_H^2 <= A^2; the (S A + 1) form is only an upper bound when A <= 1
    a_term = max(A, A * A)
    metric = GMetric.from_grid(grid)
    M = grid.steps
    N = spec.n_factors
    lhs = np.empty((M + 1, N))
    rhs = np.empty((M + 1, N))
    hs_sq = np.empty(M + 1)
    for k in range(M + 1):
        gamma = assemble_gamma(surface, spec, k)
        col_sq = np.sum(gamma.weighted**2, axis=0)
        lhs[k] = col_sq
        hs_sq[k] = col_sq.sum()
        rhs[k] = 2.0 * B * B * (S * a_term + 1.0) * h_norm_sq(surface.sigma(k), h)
    hs_integral = float(np.sum(0.5 * (hs_sq[1:] + hs_sq[:-1])) * grid.dt)
    return BoundReport(A, B, lhs, rhs, grid.dt, slack_constant, hs_integral)
