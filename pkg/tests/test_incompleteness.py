import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bondlab.errors import InsufficientTruncationError
from bondlab.incompleteness import (BASEL, basel_bound, build_psi_tilde, claim_chunk, divergence_profile,
                                    harmonic_indicator_base, min_norm_portfolio, nonreplicable_claim,
                                    psi_tilde_coefficients, sign_switching_admissibility, sign_switching_chunk,
                                    validate_switching_base)
from bondlab.market_model import (ConstantSingle, SignSwitching, SineGaussian, Tabulated, TimeGrid,
                                  simulate_forward_surface)
from bondlab.parallel import map_paths

from conftest import gamma_with_spectrum

HALVING = 2.0 ** (1 - np.arange(8))     # 2, 1, 1/2, ...


def brute_force_indices(lam):
    """Direct reading of the inf recursion, one index at a time."""
    inv = [math.inf if l == 0 else 1 / l for l in lam]
    out, start = [], 0
    while True:
        threshold = max(len(out), 1)
        nxt = next((i for i in range(start, len(lam)) if inv[i] >= threshold), None)
        if nxt is None:
            return out
        out.append(nxt + 1)
        start = nxt + 1


# --- psi~ ---------------------------------------------------------------------------

def test_halving_fixture():
    psi = build_psi_tilde(HALVING[:5])
    assert psi.indices == (2, 3, 4, 5)
    np.testing.assert_array_equal(psi.coefficients, [0, 1, 1 / 2, 1 / 3, 1 / 4])


def test_single_value_base_case():
    with pytest.warns(RuntimeWarning):
        psi = build_psi_tilde(np.array([0.5]))
    assert psi.indices == (1,)
    np.testing.assert_array_equal(psi.coefficients, [1.0])


def test_zero_singular_values_pass_every_threshold():
    psi = build_psi_tilde(np.array([5.0, 3.0, 0.0, 0.0, 0.0]))
    assert psi.indices == (3, 4, 5)


def test_rejects_increasing_values():
    with pytest.raises(ValueError):
        build_psi_tilde(np.array([1.0, 2.0]))


@given(st.lists(st.floats(0.0, 5.0), min_size=1, max_size=40))
def test_indices_match_brute_force(values):
    lam = np.sort(np.array(values))[::-1]
    lam = np.where(lam > 1e-12 * lam[0], lam, 0.0) if lam[0] > 0 else lam
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        psi = build_psi_tilde(lam)
    assert list(psi.indices) == brute_force_indices(lam)
    assert psi.norm_sq <= BASEL
    K = len(psi.indices)
    pos = np.array(psi.indices, dtype=int) - 1
    with np.errstate(divide="ignore", over="ignore"):
        terms = (psi.coefficients[pos] / lam[pos]) ** 2
    assert np.sum(terms) >= K - 1


def test_batched_coefficients_match_rowwise():
    rng = np.random.default_rng(0)
    lam = -np.sort(-rng.exponential(0.3, (50, 12)), axis=1)
    batch = psi_tilde_coefficients(lam)
    for row, coef in zip(lam, batch):
        np.testing.assert_array_equal(coef, psi_tilde_coefficients(row))


# --- minimal-norm portfolio --------------------------------------------------------------

def test_top_direction_has_unit_norm(halving_gamma):
    sp = halving_gamma.spectrum
    sol = min_norm_portfolio(halving_gamma, sp.values[0] * sp.vectors[:, 0])
    assert sol.norm_sq == pytest.approx(1.0, rel=1e-12)
    assert sol.residual_norm == pytest.approx(0.0, abs=1e-12)


def test_psi_target_norm_matches_direct_sum(halving_gamma):
    sp = halving_gamma.spectrum
    psi = build_psi_tilde(sp)
    target = sp.vectors @ psi.truncated(4)
    sol = min_norm_portfolio(halving_gamma, target)
    pos = np.array(psi.indices[:4]) - 1
    expected = np.sum((psi.coefficients[pos] / HALVING[pos]) ** 2)
    assert sol.norm_sq == pytest.approx(expected, rel=1e-10)


def test_out_of_range_target():
    gamma = gamma_with_spectrum([2.0, 1.0, 0.0])
    kernel = gamma.spectrum.vectors[:, 2]
    sol = min_norm_portfolio(gamma, 3.0 * kernel)
    assert sol.norm_sq == pytest.approx(0.0, abs=1e-20)
    assert sol.residual_norm == pytest.approx(3.0, rel=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_portfolio_reproduces_in_range_target(seed):
    gamma = gamma_with_spectrum([3.0, 1.0, 0.2, 0.01], seed=seed)
    target = np.random.default_rng(seed).standard_normal(4)
    sol = min_norm_portfolio(gamma, target)
    np.testing.assert_allclose(gamma.adjoint(sol.portfolio), target, atol=1e-8)


# --- divergence ----------------------------------------------------------------------------

def test_divergence_table_shape_and_bound():
    g = TimeGrid(1.0, 200)
    s = simulate_forward_surface(SineGaussian.harmonic(64), g, seed=0, keep_increments=False)
    rows = divergence_profile(s, range(1, 11))
    vals = np.array([r["min_norm_sq"] for r in rows])
    assert len(rows) == 10
    assert np.all(vals >= np.arange(10) * (1 - 1e-8))
    assert np.all(np.diff(vals) >= 0)
    assert vals[9] >= 9


def test_divergence_insufficient_truncation():
    g = TimeGrid(1.0, 50)
    s = simulate_forward_surface(SineGaussian.harmonic(3), g, seed=0)
    with pytest.raises(InsufficientTruncationError):
        divergence_profile(s, range(1, 11))


# --- stopped claim ---------------------------------------------------------------------------

def test_zero_volatility_claim_stays_bounded():
    g = TimeGrid(1.0, 20)
    s = simulate_forward_surface(SineGaussian((0.0, 0.0)), g, seed=0)
    c = nonreplicable_claim(s)
    assert abs(c.xi) <= 1.0 + c.max_increment


def test_single_factor_matches_scalar_random_walk():
    """One factor, lambda < 1 everywhere, so psi = g^1 = +-1 and xi is a stopped walk."""
    g = TimeGrid(1.0, 100)
    spec = ConstantSingle(0.2)
    s = simulate_forward_surface(spec, g, seed=9)
    c = nonreplicable_claim(s)
    dW = s.increments[:, 0]
    walk, stopped = 0.0, False
    for k in range(100):
        if not stopped:
            walk += c.process.psi[k, 0] * dW[k]
            stopped = abs(walk) >= 1
    assert np.all(np.abs(c.process.psi[: c.process.stop_index, 0]) == 1.0)
    assert c.xi == pytest.approx(walk, abs=1e-14)


@pytest.mark.parametrize("mode", ["pointwise", "frozen"])
def test_batched_claim_matches_single_path(mode):
    g = TimeGrid(1.0, 30)
    spec = SineGaussian.harmonic(6)
    batch = claim_chunk(0, 4, spec=spec, grid=g, initial_curve=None, seed=5, mode=mode)
    for p in range(4):
        c = nonreplicable_claim(simulate_forward_surface(spec, g, seed=5, path=p), mode=mode)
        assert batch["xi"][p] == pytest.approx(c.xi, abs=1e-12)
        assert batch["tau"][p] == pytest.approx(c.process.tau)


def test_claim_bounded_and_psi_l2_bounded():
    g = TimeGrid(1.0, 40)
    res = map_paths(claim_chunk, 500, spec=SineGaussian.harmonic(8), grid=g, initial_curve=None, seed=1)
    assert np.all(np.abs(res["xi"]) <= 1 + res["max_increment"] + 1e-12)
    assert np.all(res["psi_norm_sq"] <= BASEL)
    assert abs(res["xi"].mean()) <= 3 * res["xi"].std(ddof=1) / math.sqrt(500)


def test_unknown_mode():
    s = simulate_forward_surface(ConstantSingle(0.2), TimeGrid(1.0, 4), seed=0)
    with pytest.raises(ValueError):
        nonreplicable_claim(s, mode="lazy")


# --- sign switching ---------------------------------------------------------------------------

def test_basel_constant():
    assert basel_bound(1.0, 100) == pytest.approx(1.6350, abs=5e-5)


def test_base_validation_rejects_large_norm():
    g = TimeGrid(1.0, 20)
    big = Tabulated.from_function(lambda i, t, T: 2.0 * (T > t) / i, 3, g)
    with pytest.raises(ValueError, match="exceeds"):
        validate_switching_base(big, g)
    neg = Tabulated.from_function(lambda i, t, T: -0.1 * (T > t), 1, g)
    with pytest.raises(ValueError, match="negative"):
        validate_switching_base(neg, g)


def test_harmonic_base_valid_on_longer_horizon():
    g = TimeGrid(4.0, 20)
    assert validate_switching_base(harmonic_indicator_base(5, g), g) == pytest.approx(0.5)


def test_zero_base_all_bounds_hold():
    g = TimeGrid(1.0, 20)
    spec = SignSwitching(Tabulated.from_function(lambda i, t, T: 0.0 * T, 3, g))
    samples = sign_switching_chunk(0, 20, spec=spec, grid=g, initial_curve=None, seed=0)
    rows = {r.check: r for r in sign_switching_admissibility(samples, spec, g)}
    assert all(r.passed for r in rows.values())
    assert np.all(samples["b_square"] == 0)


def test_switching_checks_on_paths():
    g = TimeGrid(1.0, 40)
    spec = SignSwitching(harmonic_indicator_base(10, g))
    samples = sign_switching_chunk(0, 100, spec=spec, grid=g, initial_curve=None, seed=2)
    rows = {r.check: r for r in sign_switching_admissibility(samples, spec, g)}
    for name in ("nonnegative_rates", "b_square_bound", "cauchy_schwarz", "gamma_star_bound"):
        assert rows[name].passed, rows[name]
