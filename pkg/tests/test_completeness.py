import math

import numpy as np
import pytest

from bondlab.completeness import (CLAIMS, ExponentialMartingale, FactorProduct, FactorSum, IntegralClaim,
                                  StoppedIntegralClaim, build_generalized_strategy, claim_library,
                                  finite_factor_projection, injectivity_margin, replicate_claim,
                                  replication_convergence, sine_gaussian_orthogonality)
from bondlab.errors import NonInjectiveError
from bondlab.market_model import ConstantSingle, SineGaussian, TimeGrid, simulate_forward_surface
from bondlab.operator_lab import GammaOperator, assemble_gamma

from conftest import gamma_with_spectrum


# --- sine model structure ------------------------------------------------------------

@pytest.mark.parametrize("t", [0.0, 0.5, 0.9])
def test_sine_factors_orthogonal(t):
    spec = SineGaussian((1.0, 0.5, 0.25))
    gram = sine_gaussian_orthogonality(spec, t, 1.0)
    expected = np.diag(np.square(spec.gammas)) * (1 - t) / 2
    np.testing.assert_allclose(gram, expected, atol=1e-6)


def test_orthogonality_midpoint_value():
    gram = sine_gaussian_orthogonality(SineGaussian((2.0,)), 0.5, 1.0)
    assert gram[0, 0] == pytest.approx(4.0 * 0.25, rel=1e-6)


def test_orthogonality_rejects_horizon():
    with pytest.raises(ValueError):
        sine_gaussian_orthogonality(SineGaussian((1.0,)), 1.0, 1.0)


def sine_gamma(N=4, k=2, steps=20, refine=None, seed=0):
    grid = TimeGrid(1.0, steps, refine or N)
    s = simulate_forward_surface(SineGaussian.harmonic(N), grid, seed=seed)
    return assemble_gamma(s, k=k)


@pytest.mark.parametrize("k", [0, 5, 15])
def test_sine_gamma_injective(k):
    assert injectivity_margin(sine_gamma(k=k)) > 1e-8


def test_duplicated_column_not_injective():
    gamma = sine_gamma()
    m = gamma.matrix.copy()
    m[:, 1] = m[:, 0]
    dup = GammaOperator.from_matrix(m, gamma.metric.spacing, k=2)
    assert injectivity_margin(dup) == pytest.approx(0.0, abs=1e-12 * dup.spectrum.values[0])
    with pytest.raises(NonInjectiveError) as err:
        build_generalized_strategy(dup, np.ones(4))
    assert err.value.step == 2
    kernel = err.value.directions[:, 0]
    np.testing.assert_allclose(abs(kernel[0]), abs(kernel[1]), atol=1e-8)
    np.testing.assert_allclose(kernel[2:], 0, atol=1e-8)


# --- generalized strategy -------------------------------------------------------------

def test_strategy_inverts_gamma_on_probes():
    gamma = sine_gamma(6, 3)
    rng = np.random.default_rng(4)
    for _ in range(20):
        psi = rng.standard_normal(6)
        u = rng.standard_normal(6)
        phi = build_generalized_strategy(gamma, psi)
        assert phi(gamma.apply(u)) == pytest.approx(psi @ u, abs=1e-8 * (1 + abs(psi @ u)))


def test_zero_integrand_zero_strategy():
    gamma = sine_gamma()
    phi = build_generalized_strategy(gamma, np.zeros(4))
    assert np.all(phi.loads == 0)
    assert phi(np.random.default_rng(0).standard_normal(gamma.matrix.shape[0])) == 0


def test_top_singular_pair():
    gamma = gamma_with_spectrum([2.0, 1.0, 0.5])
    sp = gamma.spectrum
    phi = build_generalized_strategy(gamma, sp.values[0] * sp.vectors[:, 0])
    np.testing.assert_allclose(phi.loads, [1, 0, 0], atol=1e-12)
    assert phi.norm_sq == pytest.approx(1.0)


def test_strategy_norm_grows_with_small_singular_value():
    weak = build_generalized_strategy(gamma_with_spectrum([1.0, 1e-3]), np.array([0.0, 1.0]))
    strong = build_generalized_strategy(gamma_with_spectrum([1.0, 1e-1]), np.array([0.0, 1.0]))
    assert weak.norm_sq > 100 * strong.norm_sq


def test_strategy_rejects_wrong_length():
    with pytest.raises(ValueError):
        build_generalized_strategy(sine_gamma(), np.ones(3))


# --- claim library ------------------------------------------------------------------------

@pytest.mark.parametrize("name", CLAIMS)
def test_claim_integrands_reconstruct_terminal(name):
    """xi - E xi equals the discrete Ito sum of psi up to O(dt) for every claim."""
    M, N, P = 400, 3, 200
    claim = claim_library(name, N)
    times = np.linspace(0, 1, M + 1)
    dW = np.random.default_rng(0).standard_normal((P, M, N)) * math.sqrt(1 / M)
    W = np.concatenate([np.zeros((P, 1, N)), np.cumsum(dW, axis=1)], axis=1)
    ito = np.sum(claim.integrand_path(W, times) * dW, axis=(1, 2))
    err = claim.terminal(W, times) - claim.mean(1.0) - ito
    if name in ("zero", "brownian", "sum", "stopped"):
        np.testing.assert_allclose(err, 0, atol=1e-12)
    else:
        assert np.sqrt(np.mean(err**2)) < 0.1


def test_claim_library_errors():
    with pytest.raises(ValueError):
        claim_library("digital")
    with pytest.raises(ValueError):
        claim_library("product", 1)


def test_stopped_claim_freezes_after_barrier():
    claim = StoppedIntegralClaim((1.0,), barrier=0.5)
    W = np.array([0.0, 0.3, 0.6, -2.0, 0.1])[None, :, None]
    assert claim.terminal(W, np.arange(5.0))[0] == 0.6
    np.testing.assert_array_equal(claim.integrand_path(W, np.arange(5.0))[0, :, 0], [1, 1, 0, 0])


# --- replication ----------------------------------------------------------------------------

def test_zero_claim_zero_residual():
    rep = replicate_claim(SineGaussian.harmonic(3), claim_library("zero"), TimeGrid(1.0, 10, 3), paths=20)
    assert np.all(rep.residual == 0)
    assert np.all(rep.wealth == 0)


def test_brownian_claim_linearization_exact():
    rep = replicate_claim(SineGaussian.harmonic(3), claim_library("brownian"), TimeGrid(1.0, 20, 3), paths=50)
    assert rep.linearized_error <= 1e-8
    assert rep.rms < 0.2


def test_replication_error_decreases():
    rows = replication_convergence(SineGaussian.harmonic(3), claim_library("brownian"), 1.0, [10, 20, 40],
                                   paths=200, seed=3)
    rms = [r["rms_error"] for r in rows]
    assert rms[0] > rms[1] > rms[2]


def test_replication_worker_invariant():
    args = (SineGaussian.harmonic(2), claim_library("expmart"), TimeGrid(1.0, 10, 2))
    a = replicate_claim(*args, paths=300, workers=1)
    b = replicate_claim(*args, paths=300, workers=2)
    np.testing.assert_array_equal(a.residual, b.residual)


def test_replication_detects_non_injective_model():
    # two factors but, without maturity refinement, a single live node before the horizon
    with pytest.raises(NonInjectiveError):
        replicate_claim(SineGaussian((1.0, 1.0)), claim_library("brownian"), TimeGrid(1.0, 5, 1), paths=4)


def test_replication_rejects_too_many_claim_factors():
    with pytest.raises(ValueError):
        replicate_claim(ConstantSingle(0.2), FactorProduct(), TimeGrid(1.0, 5), paths=2)


# --- finite-factor projection ------------------------------------------------------------------

@pytest.mark.parametrize("claim", [FactorSum(4), FactorProduct(), ExponentialMartingale(0.5)])
def test_projection_gaps_match_closed_form(claim):
    d = finite_factor_projection(claim, 5, TimeGrid(1.0, 50), paths=4000, seed=2)
    assert d.gap[-1] == pytest.approx(0.0, abs=1e-12)
    assert np.all(np.diff(d.gap) <= 1e-12)
    np.testing.assert_allclose(d.gap, d.gap_exact, rtol=0.15, atol=0.02)
    assert abs(d.isometry_z) < 3


def test_projection_needs_closed_form():
    with pytest.raises(ValueError):
        finite_factor_projection(IntegralClaim((1.0,)), 2, TimeGrid(1.0, 5), paths=10)
