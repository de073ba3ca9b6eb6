"""HJM forward-rate surfaces on a uniform grid.

The forward curve ``f(t, .)`` lives on the maturity nodes of a :class:`TimeGrid`
and is advanced by Euler-Maruyama steps

    f(t_{k+1}, T) = f(t_k, T) + alpha(t_k, T) dt + sum_i sigma^i(t_k, T) sqrt(dt) Z_{k,i}

with the drift fixed by the no-arbitrage restriction
``alpha(t, T) = sum_i sigma^i(t, T) int_t^T sigma^i(t, u) du``.  Volatilities
(and hence drifts) vanish for ``t >= T``, so every maturity freezes once it is
reached and the diagonal ``f(t, t)`` is the short rate.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np
from scipy.integrate import cumulative_trapezoid

from . import rng as _rng
from .errors import NonFiniteValueError

DEFAULT_RATE = 0.03


# ----------------------------------------------------------------------------
# grid
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid on ``[0, horizon]``.

    Calendar times are ``t_k = k * dt``, ``k = 0..steps``.  Maturities use the
    same grid refined by an integer factor, so ``t_k`` is maturity node
    ``k * maturity_refine``.  ``maturity_refine=1`` shares one grid for both.
    """

    horizon: float
    steps: int
    maturity_refine: int = 1

    def __post_init__(self):
        if not (math.isfinite(self.horizon) and self.horizon > 0):
            raise ValueError(f"horizon must be finite and > 0, got {self.horizon}")
        if int(self.steps) != self.steps or self.steps < 2:
            raise ValueError(f"steps must be an integer >= 2, got {self.steps}")
        if int(self.maturity_refine) != self.maturity_refine or self.maturity_refine < 1:
            raise ValueError(f"maturity_refine must be an integer >= 1, got {self.maturity_refine}")

    @property
    def dt(self) -> float:
        return self.horizon / self.steps

    @property
    def times(self) -> np.ndarray:
        # taken from the maturity nodes so that t_k and T_{kR} are bit-identical
        return self.maturities[:: self.maturity_refine]

    @property
    def n_maturities(self) -> int:
        return self.steps * self.maturity_refine + 1

    @property
    def maturity_step(self) -> float:
        return self.horizon / (self.steps * self.maturity_refine)

    @property
    def maturities(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.n_maturities)

    def maturity_index(self, k: int) -> int:
        return k * self.maturity_refine

    def time_index(self, t: float) -> int:
        """Index of the grid time at or immediately before ``t``."""
        return int(min(self.steps, math.floor(t / self.dt + 1e-9)))


def trapezoid_from_zero(values: np.ndarray, dx: float) -> np.ndarray:
    """Cumulative trapezoid along the last axis, starting from 0 at node 0."""
    return cumulative_trapezoid(values, dx=dx, axis=-1, initial=0.0)


# ----------------------------------------------------------------------------
# volatility families
# ----------------------------------------------------------------------------

class VolatilitySpec:
    """Base class for the volatility families ``sigma^i(t, T)``.

    ``values`` returns an array of shape ``(N, L)`` for deterministic families
    and ``(P, N, L)`` when a per-path ``state`` of shape ``(P, L)`` is passed to a
    path-dependent family.  ``integrals`` returns ``int_t^{T_l} sigma^i(t, u) du``
    with the same shape; families with a closed form use it, the others apply
    the composite trapezoid on the supplied maturity nodes.
    """

    n_factors: int = 1
    closed_form: bool = False
    path_dependent: bool = False

    def values(self, t: float, maturities: np.ndarray, horizon: float, state=None) -> np.ndarray:
        raise NotImplementedError

    def integrals(self, t: float, maturities: np.ndarray, horizon: float, values: np.ndarray) -> np.ndarray:
        dx = maturities[1] - maturities[0]
        # values vanish on nodes <= t, so the cumulative integral from 0 equals
        # the integral from t
        return trapezoid_from_zero(values, dx)


@dataclass(frozen=True)
class ConstantSingle(VolatilitySpec):
    """One factor with ``sigma(t, T) = sigma0`` for ``t < T`` (Ho-Lee)."""

    sigma0: float
    n_factors: int = field(default=1, init=False)
    closed_form: bool = field(default=True, init=False)

    def __post_init__(self):
        if not math.isfinite(self.sigma0):
            raise ValueError("sigma0 must be finite")

    def values(self, t, maturities, horizon, state=None):
        return (self.sigma0 * (np.asarray(maturities) > t))[None, :].astype(float)

    def integrals(self, t, maturities, horizon, values):
        return (self.sigma0 * np.clip(np.asarray(maturities) - t, 0.0, None))[None, :]


@dataclass(frozen=True)
class SineGaussian(VolatilitySpec):
    """``sigma^j(t, T) = gamma_j sin(j pi max((T - t) / (horizon - t), 0))``.

    For fixed ``t`` the factors are orthogonal on ``[t, horizon]``, which makes
    the bond-price operator injective.
    """

    gammas: tuple
    closed_form: bool = field(default=True, init=False)

    def __post_init__(self):
        g = np.asarray(self.gammas, dtype=float)
        if g.ndim != 1 or g.size < 1:
            raise ValueError("gammas must be a non-empty sequence")
        if not np.all(np.isfinite(g)):
            raise ValueError("gammas must be finite")
        object.__setattr__(self, "gammas", tuple(float(x) for x in g))

    @classmethod
    def harmonic(cls, n: int, scale: float = 1.0, power: float = 1.0) -> "SineGaussian":
        """``gamma_j = scale / j**power`` for ``j = 1..n``."""
        j = np.arange(1, n + 1)
        return cls(tuple(scale / j**power))

    @property
    def n_factors(self) -> int:
        return len(self.gammas)

    def _scaled(self, t, maturities, horizon):
        T = np.asarray(maturities, dtype=float)
        if t >= horizon:
            return None, T
        return np.clip((T - t) / (horizon - t), 0.0, None), T

    def values(self, t, maturities, horizon, state=None):
        x, T = self._scaled(t, maturities, horizon)
        if x is None:
            return np.zeros((self.n_factors, T.size))
        j = np.arange(1, self.n_factors + 1)[:, None]
        g = np.asarray(self.gammas)[:, None]
        return g * np.sin(j * np.pi * x[None, :])

    def integrals(self, t, maturities, horizon, values):
        x, T = self._scaled(t, maturities, horizon)
        if x is None:
            return np.zeros((self.n_factors, T.size))
        j = np.arange(1, self.n_factors + 1)[:, None]
        g = np.asarray(self.gammas)[:, None]
        return g * (horizon - t) / (j * np.pi) * (1.0 - np.cos(j * np.pi * x[None, :]))


@dataclass(frozen=True)
class Tabulated(VolatilitySpec):
    """Volatilities given on the grid: ``table[i, k, l] = sigma^{i+1}(t_k, T_l)``.

    Off-grid ``t`` uses the row of the preceding grid time; off-grid maturities
    are interpolated linearly.  Entries with ``t >= T`` are ignored (treated as 0).
    """

    table: np.ndarray
    grid: TimeGrid

    def __post_init__(self):
        tab = np.array(self.table, dtype=float)
        expected = (self.grid.steps + 1, self.grid.n_maturities)
        if tab.ndim != 3 or tab.shape[1:] != expected:
            raise ValueError(f"table must have shape (N, {expected[0]}, {expected[1]}), got {tab.shape}")
        if not np.all(np.isfinite(tab)):
            raise ValueError("table entries must be finite")
        tab.setflags(write=False)
        object.__setattr__(self, "table", tab)

    @classmethod
    def from_function(cls, func: Callable[[int, float, np.ndarray], np.ndarray],
                      n_factors: int, grid: TimeGrid) -> "Tabulated":
        """Tabulate ``func(i, t, maturities)`` (``i`` 1-based) on the grid."""
        T = grid.maturities
        tab = np.array([[func(i, t, T) for t in grid.times] for i in range(1, n_factors + 1)], dtype=float)
        return cls(tab, grid)

    @property
    def n_factors(self) -> int:
        return self.table.shape[0]

    def values(self, t, maturities, horizon, state=None):
        row = self.table[:, self.grid.time_index(t), :]
        T = np.asarray(maturities, dtype=float)
        grid_T = self.grid.maturities
        if T.shape == grid_T.shape and np.array_equal(T, grid_T):
            out = row.copy()
        else:
            out = np.array([np.interp(T, grid_T, r) for r in row])
        out[:, T <= t] = 0.0
        return out

    def __eq__(self, other):
        return (isinstance(other, Tabulated) and self.grid == other.grid
                and np.array_equal(self.table, other.table))

    __hash__ = None


@dataclass(frozen=True)
class SignSwitching(VolatilitySpec):
    """Base volatility switched off where a running stochastic integral is negative.

    ``sigma^i(t, T) = base^i(t, T)`` if ``Y(t, T) >= 0`` and ``0`` otherwise.
    With ``source="switched"`` (default) ``Y(t, T) = sum_i int_0^t sigma^i(s, T) dW^i``
    is the integral of the switched volatility itself, i.e. the accumulated noise
    in ``f(., T)``; with ``source="base"`` it is the integral of the unswitched
    base.  The running value is carried per maturity node as path state; the
    decision at ``t_k`` only uses information up to ``t_k``.
    """

    base: VolatilitySpec
    source: str = "switched"
    path_dependent: bool = field(default=True, init=False)

    def __post_init__(self):
        if self.source not in ("switched", "base"):
            raise ValueError(f"source must be 'switched' or 'base', got {self.source!r}")
        if self.base.path_dependent:
            raise ValueError("base volatility must be deterministic")

    @property
    def n_factors(self) -> int:
        return self.base.n_factors

    def values(self, t, maturities, horizon, state=None):
        base = self.base.values(t, maturities, horizon)
        if state is None:
            return base
        on = (np.asarray(state) >= 0.0).astype(float)
        if on.ndim == 1:
            return base * on[None, :]
        return base[None, :, :] * on[:, None, :]


# ----------------------------------------------------------------------------
# pointwise evaluation
# ----------------------------------------------------------------------------

def _check_point(spec: VolatilitySpec, i: int, t: float, T: float, horizon: float):
    if not 1 <= i <= spec.n_factors:
        raise ValueError(f"factor index {i} outside truncation 1..{spec.n_factors}")
    for name, v in (("t", t), ("T", T)):
        if not (0.0 <= v <= horizon):
            raise ValueError(f"{name}={v} outside [0, {horizon}]")


def eval_volatility(spec: VolatilitySpec, i: int, t: float, T: float, horizon: float, state=None) -> float:
    """``sigma^i(t, T)`` with a 1-based factor index.

    For :class:`SignSwitching`, ``state`` is the running integral at maturity
    ``T`` (a scalar); ``None`` means it has not gone negative.
    """
    _check_point(spec, i, t, T, horizon)
    if t >= T:
        return 0.0
    st = None if state is None else np.array([float(state)])
    return float(spec.values(t, np.array([T]), horizon, st)[i - 1, 0])


def hjm_drift(spec: VolatilitySpec, t: float, T: float, grid: TimeGrid, state=None) -> float:
    """No-arbitrage drift ``sum_i sigma^i(t, T) int_t^T sigma^i(t, u) du``.

    The inner integral is exact for closed-form families and otherwise the
    composite trapezoid on the grid's maturity nodes inside ``[t, T]`` (plus the
    end points).  For :class:`SignSwitching` ``state`` must be the running
    integral on all maturity nodes and ``t``, ``T`` should be grid nodes.
    """
    horizon = grid.horizon
    for name, v in (("t", t), ("T", T)):
        if not (0.0 <= v <= horizon):
            raise ValueError(f"{name}={v} outside [0, {horizon}]")
    if t >= T:
        return 0.0
    if spec.closed_form:
        nodes = np.array([T])
        sig = spec.values(t, nodes, horizon)
        return float(np.sum(sig[:, 0] * spec.integrals(t, nodes, horizon, sig)[:, 0]))
    grid_T = grid.maturities
    if state is not None:
        st = np.asarray(state, dtype=float)
        if st.shape != grid_T.shape:
            raise ValueError("state must be given on the grid's maturity nodes")
        sig = spec.values(t, grid_T, horizon, st)
        mask = (grid_T >= t - 1e-12) & (grid_T <= T + 1e-12)
        integral = _trapz(sig[:, mask], grid_T[mask])
        return float(np.sum(sig[:, np.flatnonzero(mask)[-1]] * integral))
    inside = grid_T[(grid_T > t) & (grid_T < T)]
    u = np.concatenate([[t], inside, [T]])
    sig = spec.values(t, u, horizon)
    # sigma(t, t) = 0 by convention; keep the node so the trapezoid sees the jump
    integral = _trapz(sig, u)
    return float(np.sum(sig[:, -1] * integral))


def _trapz(y: np.ndarray, x: np.ndarray) -> np.ndarray:
    return np.sum(0.5 * (y[..., 1:] + y[..., :-1]) * np.diff(x), axis=-1)


def drift_curve(sigma: np.ndarray, integrals: np.ndarray) -> np.ndarray:
    """Drift on all maturity nodes from volatility values and their integrals."""
    return np.sum(sigma * integrals, axis=-2)


# ----------------------------------------------------------------------------
# initial curves
# ----------------------------------------------------------------------------

def initial_curve_on_grid(curve, grid: TimeGrid) -> np.ndarray:
    """Resolve ``curve`` (None, scalar, callable, or node array) on maturity nodes."""
    T = grid.maturities
    if curve is None:
        out = np.full(T.size, DEFAULT_RATE)
    elif callable(curve):
        out = np.asarray(curve(T), dtype=float) * np.ones(T.size)
    elif np.isscalar(curve):
        out = np.full(T.size, float(curve))
    else:
        out = np.asarray(curve, dtype=float)
        if out.shape != T.shape:
            raise ValueError(f"initial curve has {out.size} values, grid has {T.size} maturities")
    if not np.all(np.isfinite(out)):
        raise ValueError("initial curve must be finite on every maturity node")
    return out


def load_initial_curve(path, grid: TimeGrid) -> np.ndarray:
    """Read a two-column ``maturity,rate`` CSV and interpolate onto the grid.

    A header row is skipped when its first field is not numeric.
    """
    mats, rates = [], []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or not "".join(row).strip():
                continue
            try:
                m, r = float(row[0]), float(row[1])
            except (ValueError, IndexError):
                if mats:
                    raise ValueError(f"malformed curve row {row!r} in {path}")
                continue
            mats.append(m)
            rates.append(r)
    if len(mats) < 1:
        raise ValueError(f"no curve points in {path}")
    order = np.argsort(mats)
    return initial_curve_on_grid(np.interp(grid.maturities, np.asarray(mats)[order],
                                           np.asarray(rates)[order]), grid)


# ----------------------------------------------------------------------------
# simulation
# ----------------------------------------------------------------------------

@dataclass
class Step:
    """One Euler step for a batch of paths (``P`` rows)."""

    k: int
    t: float
    f: np.ndarray          # (P, L) curve at t_k
    f_next: np.ndarray     # (P, L) curve at t_{k+1}
    sigma: np.ndarray      # (N, L) or (P, N, L)
    integrals: np.ndarray  # same shape as sigma
    alpha: np.ndarray      # (L,) or (P, L)
    dW: np.ndarray         # (P, N) Wiener increments over [t_k, t_{k+1}]
    state: np.ndarray | None  # (P, L) running integral for switched models, before the step


def evolve(spec: VolatilitySpec, grid: TimeGrid, initial_curve, normals: np.ndarray) -> Iterator[Step]:
    """Euler-Maruyama for a batch of paths driven by standard ``normals``.

    ``normals`` has shape ``(P, steps, N)``.  Yields one :class:`Step` per time
    step; raises :class:`NonFiniteValueError` on the first non-finite entry.
    """
    P, M, N = normals.shape
    if M != grid.steps or N != spec.n_factors:
        raise ValueError(f"normals shape {normals.shape} does not match grid steps {grid.steps} "
                         f"and {spec.n_factors} factors")
    f0 = initial_curve_on_grid(initial_curve, grid)
    T = grid.maturities
    S = grid.horizon
    dt = grid.dt
    sq = math.sqrt(dt)
    f = np.broadcast_to(f0, (P, T.size)).copy()
    state = np.zeros((P, T.size)) if spec.path_dependent else None
    for k, t in enumerate(grid.times[:-1]):
        t = float(t)
        sigma = spec.values(t, T, S, state)
        integrals = spec.integrals(t, T, S, sigma)
        alpha = drift_curve(sigma, integrals)
        dW = normals[:, k, :] * sq
        with np.errstate(over="ignore", invalid="ignore"):
            if sigma.ndim == 2:
                noise = dW @ sigma
            else:
                noise = np.einsum("pn,pnl->pl", dW, sigma)
            f_next = f + alpha * dt + noise
        bad = ~np.isfinite(f_next)
        if bad.any():
            p, l = np.argwhere(bad)[0]
            raise NonFiniteValueError(k + 1, int(l))
        yield Step(k, t, f, f_next, sigma, integrals, alpha, dW, state)
        if spec.path_dependent:
            if spec.source == "switched":
                state = state + noise
            else:
                state = state + dW @ spec.base.values(t, T, S)
        f = f_next


@dataclass(frozen=True)
class ForwardSurface:
    """One simulated path of the forward surface ``f[k, l] = f(t_k, T_l)``.

    ``alpha[k]`` is the drift applied over ``[t_k, t_{k+1}]`` (the last row is
    zero); ``increments[k]`` are the Wiener increments of that step and
    ``state[k]`` the switching state at ``t_k`` for path-dependent models.
    """

    grid: TimeGrid
    spec: VolatilitySpec
    f: np.ndarray
    alpha: np.ndarray
    initial_curve: np.ndarray
    seed: int | None = None
    path: int = 0
    increments: np.ndarray | None = None
    state: np.ndarray | None = None

    @property
    def n_factors(self) -> int:
        return self.spec.n_factors

    def sigma(self, k: int) -> np.ndarray:
        """Volatility values ``(N, L)`` in force at ``t_k``."""
        st = None if self.state is None else self.state[k]
        return self.spec.values(float(self.grid.times[k]), self.grid.maturities, self.grid.horizon, st)


def simulate_forward_surface(spec: VolatilitySpec, grid: TimeGrid, initial_curve=None, seed: int = 0,
                             path: int = 0, normals: np.ndarray | None = None,
                             keep_increments: bool = True) -> ForwardSurface:
    """Simulate one path of the forward surface.

    Normals come from the counter-based stream ``(seed, path)`` unless given
    explicitly with shape ``(steps, N)``.
    """
    N = spec.n_factors
    if normals is None:
        normals = _rng.path_rng(seed, path).standard_normal((grid.steps, N))
    normals = np.asarray(normals, dtype=float)
    if normals.shape != (grid.steps, N):
        raise ValueError(f"normals must have shape {(grid.steps, N)}")
    f0 = initial_curve_on_grid(initial_curve, grid)
    L = grid.n_maturities
    f = np.empty((grid.steps + 1, L))
    alpha = np.zeros((grid.steps + 1, L))
    incs = np.empty((grid.steps, N))
    states = np.zeros((grid.steps + 1, L)) if spec.path_dependent else None
    f[0] = f0
    for step in evolve(spec, grid, f0, normals[None]):
        f[step.k + 1] = step.f_next[0]
        alpha[step.k] = step.alpha if step.alpha.ndim == 1 else step.alpha[0]
        incs[step.k] = step.dW[0]
        if states is not None:
            states[step.k] = step.state[0]
    if states is not None:
        # state after the final step, for completeness of the record
        last = grid.steps - 1
        sig = spec.values(float(grid.times[last]), grid.maturities, grid.horizon, states[last])
        if spec.source == "switched":
            states[-1] = states[last] + incs[last] @ sig
        else:
            states[-1] = states[last] + incs[last] @ spec.base.values(float(grid.times[last]),
                                                                       grid.maturities, grid.horizon)
    for arr in (f, alpha, incs, f0) + ((states,) if states is not None else ()):
        arr.setflags(write=False)
    return ForwardSurface(grid, spec, f, alpha, f0, seed, path,
                          incs if keep_increments else None, states)


# ----------------------------------------------------------------------------
# bond prices and rates
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class DiscountedCurve:
    k: int
    t: float
    maturities: np.ndarray
    discounted: np.ndarray    # P^(t_k, T_l) = exp(-int_0^T f)
    undiscounted: np.ndarray  # P(t_k, T_l) = exp(-int_t^T f)


def discounted_from_forward(f: np.ndarray, dT: float) -> np.ndarray:
    """``exp(-int_0^T f(t, u) du)`` by cumulative trapezoid along the last axis."""
    return np.exp(-trapezoid_from_zero(f, dT))


def discounted_curve(surface: ForwardSurface, k: int) -> DiscountedCurve:
    grid = surface.grid
    if not 0 <= k <= grid.steps:
        raise ValueError(f"time index {k} outside 0..{grid.steps}")
    integral = trapezoid_from_zero(surface.f[k], grid.maturity_step)
    disc = np.exp(-integral)
    undisc = np.exp(-(integral - integral[grid.maturity_index(k)]))
    return DiscountedCurve(k, float(grid.times[k]), grid.maturities, disc, undisc)


@dataclass(frozen=True)
class RatePath:
    times: np.ndarray
    short_rate: np.ndarray
    bank_account: np.ndarray


def rate_path(surface: ForwardSurface) -> RatePath:
    """Short rate from the diagonal and the bank account by exponential trapezoid."""
    grid = surface.grid
    idx = np.arange(grid.steps + 1) * grid.maturity_refine
    r = surface.f[np.arange(grid.steps + 1), idx]
    bank = np.exp(trapezoid_from_zero(r, grid.dt))
    return RatePath(grid.times, r, bank)


# ----------------------------------------------------------------------------
# Monte Carlo helpers
# ----------------------------------------------------------------------------

def discounted_bond_chunk(start: int, stop: int, *, spec, grid, initial_curve, seed, maturity) -> dict:
    """``P^(t_k, maturity)`` for paths ``start..stop``; shape ``(P, steps + 1)``."""
    normals = _rng.path_normals(seed, start, stop, (grid.steps, spec.n_factors))
    T = grid.maturities
    l = int(np.argmin(np.abs(T - maturity)))
    out = np.empty((stop - start, grid.steps + 1))
    f0 = initial_curve_on_grid(initial_curve, grid)
    out[:, 0] = np.exp(-_trapz(f0[: l + 1], T[: l + 1]))
    for step in evolve(spec, grid, f0, normals):
        out[:, step.k + 1] = np.exp(-_trapz(step.f_next[:, : l + 1], T[: l + 1]))
    return {"discounted": out}


def martingale_table(samples: np.ndarray, grid: TimeGrid) -> list[dict]:
    """Per-step mean and standard error of discounted bond samples ``(P, steps+1)``."""
    P = samples.shape[0]
    mean = samples.mean(axis=0)
    se = samples.std(axis=0, ddof=1) / math.sqrt(P) if P > 1 else np.zeros_like(mean)
    target = samples[0, 0]
    # a spread at rounding level (all paths share the t=0 value) carries no information
    informative = se > 1e-12 * abs(target)
    return [{"k": k, "t": float(t), "mean": float(mean[k]), "std_err": float(se[k]), "target": float(target),
             "z": float((mean[k] - target) / se[k]) if informative[k] else 0.0}
            for k, t in enumerate(grid.times)]


def write_surface_csv(surface: ForwardSurface, path) -> int:
    """Write ``t,T,f,alpha`` rows; returns the number of data rows."""
    grid = surface.grid
    rows = 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "T", "f", "alpha"])
        for k, t in enumerate(grid.times):
            for l, T in enumerate(grid.maturities):
                w.writerow([repr(float(t)), repr(float(T)), repr(float(surface.f[k, l])),
                            repr(float(surface.alpha[k, l]))])
                rows += 1
    return rows
