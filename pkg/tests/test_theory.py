import math

import numpy as np
import pytest
from scipy import integrate

from hesslab import (Architecture, Erf, Linear, Polynomial, Quadratic, UsageError, chi2_scaled,
                     convolution_spectrum, effective_params, eig_sym, hessian_linear, ks_distance,
                     linear_spectrum_prediction, mp_scaled, poly_rank_upper_bound, sample_teacher,
                     verify_block_eigenstructure)
from hesslab.theory import (chi2_cluster_fraction, fit_mixture_weight, quadratic_n_eff,
                            symmetric_tensor_components)


def _mass(d, a, b):
    return integrate.quad(lambda x: float(d.pdf(np.array([x]))[0]), a, b, limit=400)[0]


@pytest.mark.parametrize("ni,nh", [(10, 20), (30, 10), (10, 10), (50, 5)])
def test_mp_normalised_with_known_mean(ni, nh):
    d = mp_scaled(ni, nh)
    lo, hi = d.support
    # x = u^2 removes the inverse square-root edge when lo = 0
    mass = integrate.quad(lambda u: 2 * u * d.pdf(u * u), math.sqrt(lo), math.sqrt(hi), limit=400)[0]
    mean = integrate.quad(lambda u: 2 * u ** 3 * d.pdf(u * u), math.sqrt(lo), math.sqrt(hi), limit=400)[0]
    assert mass == pytest.approx(1.0, abs=1e-6)
    # trace(W1 W1^T) / (number of nonzero eigenvalues) under variance 1/n_in
    assert mean == pytest.approx(max(1.0, nh / ni), rel=1e-5)


def test_mp_support_edges():
    d = mp_scaled(10, 20)
    assert d.support == pytest.approx(((1 - math.sqrt(2)) ** 2, (1 + math.sqrt(2)) ** 2))
    assert mp_scaled(10, 10).support[0] == 0.0


def test_mp_matches_large_random_matrices():
    rng = np.random.default_rng(0)
    ni, nh = 400, 200
    eigs = np.linalg.eigvalsh((w := rng.standard_normal((nh, ni)) / math.sqrt(ni)) @ w.T)
    assert ks_distance(eigs, mp_scaled(ni, nh).cdf) < 0.03


def test_chi2_scaled_moments():
    d = chi2_scaled(8)
    assert _mass(d, 0, 50) == pytest.approx(1.0, abs=1e-8)
    s = d.sample(200_000, 1)
    assert s.mean() == pytest.approx(1.0, abs=0.01)
    assert s.var() == pytest.approx(2 / 8, rel=0.03)


@pytest.mark.parametrize("ni,nh", [(10, 20), (30, 10), (10, 10), (12, 1)])
def test_prediction_normalised_and_self_consistent(ni, nh):
    d = linear_spectrum_prediction(ni, nh)
    assert float(d.cdf(np.array([1e6]))[0]) == pytest.approx(1.0, abs=1e-9)
    if nh > 1:
        assert _mass(d, 0, 40) == pytest.approx(1.0, abs=1e-3)
    assert ks_distance(d.sample(50_000, 3), d.cdf) < 0.01


def test_prediction_mean():
    # |W2|^2 has mean 1; W1 W1^T nonzero eigenvalues have mean max(1, nh/ni)
    s = linear_spectrum_prediction(10, 20).sample(200_000, 0)
    assert s.mean() == pytest.approx(3.0, rel=0.01)


def test_mixture_weights():
    d = linear_spectrum_prediction(30, 10)
    assert d.kind == "mixture"
    assert d.params["weight_chi2"] == pytest.approx(2 / 3)
    assert linear_spectrum_prediction(10, 20).kind == "convolution"


def test_em_recovers_mixture_weight():
    chi, conv = chi2_scaled(10), convolution_spectrum(30, 10)
    rng = np.random.default_rng(0)
    n = 20_000
    pick = rng.random(n) < 0.3
    x = np.where(pick, chi.sample(n, 1), conv.sample(n, 2))
    assert fit_mixture_weight(x, chi, conv) == pytest.approx(0.3, abs=0.02)


def test_cluster_fraction_on_exact_ensemble():
    eigs, l2s = [], []
    for i in range(20):
        t = sample_teacher(Architecture(9, 3), seed=5, index=i)
        s = eig_sym(hessian_linear(t))
        eigs.append(s.nonzero())
        l2s.append(float(t.w2 @ t.w2))
    assert chi2_cluster_fraction(eigs, l2s, 9, 3) == pytest.approx(6 / 9, abs=1e-12)


def test_quadratic_effective_params():
    assert quadratic_n_eff(5, 5) == 5 + 15
    assert quadratic_n_eff(5, 3) == 5 + 15 - 5
    assert quadratic_n_eff(3, 8) == 3 + 6


def test_effective_params_dispatch():
    a = Architecture(4, 6)
    assert effective_params(Linear(), a).n_eff_predicted == 4
    assert effective_params(Quadratic(0.0), a).n_eff_predicted == 4
    assert effective_params(Quadratic(1.0), a).n_eff_predicted == 14
    rep = effective_params(Erf(), a, rank_observed=30)
    assert rep.empirical_claim and rep.match
    cubic = effective_params(Polynomial((1, 1, 1)), a, rank_observed=20)
    assert cubic.is_upper_bound and cubic.n_eff_predicted == min(poly_rank_upper_bound(3, 4), 30)
    assert cubic.match
    assert effective_params(Polynomial((1, 1)), a).n_eff_predicted == 14


def test_combinatorics():
    assert poly_rank_upper_bound(3, 2) == 9
    assert poly_rank_upper_bound(2, 3) == 9
    assert symmetric_tensor_components(2, 3) == 6
    assert sum(symmetric_tensor_components(k, 4) for k in (1, 2, 3)) == poly_rank_upper_bound(3, 4)
    with pytest.raises(UsageError):
        poly_rank_upper_bound(0, 3)


@pytest.mark.parametrize("ni,nh", [(3, 5), (5, 3), (4, 4), (1, 1)])
def test_block_eigenstructure(ni, nh):
    rep = verify_block_eigenstructure(sample_teacher(Architecture(ni, nh), seed=ni * 10 + nh))
    assert rep.max_residual < 1e-10
    assert rep.n_independent == ni
    assert rep.n_kernel_type == max(0, ni - nh)
    assert rep.eig_sym_rel_err < 1e-9


def test_block_eigenstructure_needs_linear():
    with pytest.raises(UsageError):
        verify_block_eigenstructure(sample_teacher(Architecture(2, 2), Erf()))
