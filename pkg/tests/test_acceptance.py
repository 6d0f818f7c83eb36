"""Exit criteria, each at its stated tolerance.  One PASS/FAIL line per
criterion is printed in the terminal summary."""

import math
import time

import numpy as np
import pytest
from scipy import integrate

from hesslab import (Architecture, Erf, Linear, Polynomial, Quadratic, analytic_hessian, chi2_scaled,
                     convolution_spectrum, effective_params, eig_sym, empirical_fim, finite_diff_hessian,
                     hessian_erf, hessian_linear, hessian_quadratic, ks_distance, linear_spectrum_prediction,
                     mp_scaled, numerical_rank, outer_product_hessian_mc, poly_rank_upper_bound, sample_teacher,
                     verify_block_eigenstructure)
from hesslab.experiments import dynamics_experiment, ensemble_spectra, spectrum_experiment
from hesslab.theory import fit_mixture_weight, quadratic_n_eff

pytestmark = pytest.mark.acceptance

SEED = 0
QUADRATIC_TAU = 1e-14


@pytest.fixture(scope="module")
def mixture_run():
    t0 = time.perf_counter()
    report, _ = spectrum_experiment(Linear(), Architecture(30, 10), 200, SEED)
    return report, time.perf_counter() - t0


def test_c01_linear_convolution_regime(criterion):
    t0 = time.perf_counter()
    rep, _ = spectrum_experiment(Linear(), Architecture(10, 20), 200, SEED)
    dt = time.perf_counter() - t0
    ok = rep["ks"] < 0.05 and dt < 60
    criterion(1, "linear spectrum, N_i=10 N_h=20", ok,
              f"KS={rep['ks']:.4f} (<0.05), KS vs quadrature cdf={rep['ks_cdf']:.4f}, {dt:.1f}s")
    assert ok


def test_c02_linear_mixture_regime(criterion, mixture_run):
    rep, dt = mixture_run
    frac = rep["chi2_cluster_fraction"]
    ok = rep["ks"] < 0.05 and abs(frac - 2 / 3) <= 0.05
    spectra = ensemble_spectra(Linear(), Architecture(30, 10), 200, SEED)
    pooled = np.concatenate([s.nonzero for s in spectra])
    w_em = fit_mixture_weight(pooled, chi2_scaled(10), convolution_spectrum(30, 10))
    criterion(2, "linear spectrum, N_i=30 N_h=10", ok,
              f"KS={rep['ks']:.4f} (<0.05), chi2 cluster fraction={frac:.4f} (2/3+-0.05), "
              f"unconditional EM weight={w_em:.3f} (info), {dt:.1f}s")
    assert ok


def test_c03_linear_rank_law(criterion):
    bad = []
    for ni in range(2, 21):
        for nh in range(2, 21):
            for s in range(5):
                t = sample_teacher(Architecture(ni, nh), seed=s)
                r = numerical_rank(eig_sym(hessian_linear(t), 1e-8), 1e-8)
                if r != ni:
                    bad.append((ni, nh, s, r))
    criterion(3, "linear rank = N_i on 2..20 x 2..20, 5 seeds", not bad, f"{len(bad)} mismatches of 1805")
    assert not bad


def _quadratic_grid():
    for ni in range(2, 11):
        for nh in range(2, 11):
            for eps in (0.5, 1.0):
                for s in range(3):
                    t = sample_teacher(Architecture(ni, nh), Quadratic(eps), seed=s)
                    yield ni, nh, eps, s, t.arch.n_params, numerical_rank(eig_sym(hessian_quadratic(t)), QUADRATIC_TAU)


@pytest.fixture(scope="module")
def quadratic_ranks():
    return list(_quadratic_grid())


def test_c04_quadratic_rank_formula(criterion, quadratic_ranks):
    bad = [c for c in quadratic_ranks if c[5] != quadratic_n_eff(c[0], c[1])]
    criterion(4, "quadratic rank formula on 2..10 x 2..10, eps {0.5,1}, 3 seeds", not bad,
              f"{len(bad)} mismatches of {len(quadratic_ranks)}, tau_rel={QUADRATIC_TAU:g}")
    assert not bad


def test_c04_triangular_zero_count(criterion, quadratic_ranks):
    cells = [c for c in quadratic_ranks if c[1] >= c[0]]
    bad = [c for c in cells if c[4] - c[5] != c[1] * (c[1] - 1) // 2]
    square_bad = [c for c in bad if c[0] == c[1]]
    criterion(4, "triangular zero count D - rank = N_h(N_h-1)/2 for N_h >= N_i", not bad,
              f"{len(bad)} of {len(cells)} cells differ; all with N_h > N_i ({len(square_bad)} at N_h = N_i)")
    assert not bad


def test_c05_polynomial_upper_bound(criterion):
    act = Polynomial((1.0, 1.0, 1.0))
    rows, ok = [], True
    for ni in (2, 3, 4):
        arch = Architecture(ni, 2 * ni)
        t = sample_teacher(arch, act, seed=SEED)
        r = numerical_rank(eig_sym(outer_product_hessian_mc(t, 200_000, SEED).mean), 1e-8)
        bound = poly_rank_upper_bound(3, ni)
        rep = effective_params(act, arch, r)
        ok &= r <= bound and bool(rep.match)
        rows.append(f"N_i={ni}: rank {r} <= {bound}{' (equal)' if r == bound else ''}")
    criterion(5, "cubic polynomial rank <= C(N_i+3,3)-1", ok, "; ".join(rows))
    assert ok


def test_c06_erf_full_rank(criterion):
    rows, ok = [], True
    for n in (5, 10, 20, 30):
        for s in range(3):
            t = sample_teacher(Architecture(n, n), Erf(), seed=s)
            spec = eig_sym(hessian_erf(t), 1e-8)
            ok &= spec.rank == t.arch.n_params
            rows.append(spec.eigenvalues[0] / spec.lambda_max)
    criterion(6, "erf full rank for N = 5, 10, 20, 30", ok, f"smallest lambda_min/lambda_max={min(rows):.2e}")
    assert ok


@pytest.mark.parametrize("act,n", [(Linear(), 6), (Quadratic(1.0), 6), (Erf(), 5)], ids=["linear", "quad", "erf"])
def test_c07_oracle_agreement(criterion, act, n):
    t = sample_teacher(Architecture(n, n), act, seed=SEED)
    h = analytic_hessian(t)
    t0 = time.perf_counter()
    big = outer_product_hessian_mc(t, 1_000_000, seed=1)
    small = outer_product_hessian_mc(t, 100_000, seed=2)
    dt = time.perf_counter() - t0
    z = big.z_scores(h)[np.triu_indices(h.dim)]
    inside = float(np.mean(z <= 4))
    dev_big = float(np.max(np.abs(big.mean.data - h.data)))
    dev_small = float(np.max(np.abs(small.mean.data - h.data)))
    ratio = dev_small / dev_big
    # "x~3" read as sqrt(10) to within a factor 1.5
    ok = inside >= 0.99 and math.sqrt(10) / 1.5 <= ratio <= 1.5 * math.sqrt(10) and dt < 300
    criterion(7, f"analytic vs Monte-Carlo, {act.name} N={n}", ok,
              f"{inside:.4f} of entries within 4 SE, max dev {dev_small:.2e} -> {dev_big:.2e} (x{ratio:.2f}), {dt:.1f}s")
    assert ok


def test_c08_fim_and_finite_differences(criterion):
    t = sample_teacher(Architecture(4, 4), seed=SEED)
    a = outer_product_hessian_mc(t, 100_000, seed=3)
    b = empirical_fim(t, 100_000, seed=3)
    fim_dev = float(np.max(np.abs(a.mean.data - b.mean.data)))
    h = hessian_linear(t).data
    plain = float(np.max(np.abs(finite_diff_hessian(t, 1e-4, 100_000, SEED).data - h)))
    matched = float(np.max(np.abs(finite_diff_hessian(t, 1e-4, 100_000, SEED, moment_match=True).data - h)))
    t_big = sample_teacher(Architecture(10, 20), seed=SEED)
    exact = float(np.max(np.abs(finite_diff_hessian(t_big, 1e-4, None).data - hessian_linear(t_big).data)))
    ok = fim_dev <= 1e-12 and matched <= 1e-3
    criterion(8, "FIM identity and finite differences", ok,
              f"FIM vs outer product {fim_dev:.1e} (<=1e-12); FD at M=1e5 moment-matched {matched:.1e} (<=1e-3), "
              f"plain iid {plain:.1e} (info); exact-loss FD N_i=10 N_h=20 {exact:.1e} (info)")
    assert ok


def test_c09_block_eigenstructure(criterion):
    worst_res, worst_rel, ok = 0.0, 0.0, True
    for ni in range(3, 21):
        for nh in range(3, 21):
            rep = verify_block_eigenstructure(sample_teacher(Architecture(ni, nh), seed=SEED))
            worst_res = max(worst_res, rep.max_residual)
            worst_rel = max(worst_rel, rep.eig_sym_rel_err)
            ok &= rep.max_residual < 1e-10 and rep.eig_sym_rel_err < 1e-9 and rep.n_independent == ni
    criterion(9, "block eigenvectors on 3..20 x 3..20", ok,
              f"max residual/|y| {worst_res:.1e} (<1e-10), max eigenvalue rel err {worst_rel:.1e} (<1e-9)")
    assert ok


@pytest.fixture(scope="module")
def dynamics_run():
    t0 = time.perf_counter()
    rep, _ = dynamics_experiment(Linear(), Architecture(10, 20), SEED, sigma0=1e-2, lr_frac=0.05, batch=512,
                                 t_max=10.0, ensemble=50)
    return rep, time.perf_counter() - t0


def test_c10_tail_rate(criterion, dynamics_run):
    rep, dt = dynamics_run
    ok = rep["rel_err"] <= 0.05 and rep["lr"] <= 0.5 / rep["lambda_max"] and dt < 120
    criterion(10, "decay law: tail rate vs 2 lambda_min", ok,
              f"rate {rep['rate']:.4f} vs {rep['two_lambda_min']:.4f} ({100 * rep['rel_err']:.2f}%, <=5%), "
              f"per-run {rep['per_run_rate_mean']:.3f}+-{rep['per_run_rate_sd']:.3f}, {dt:.1f}s")
    assert ok


def test_c10_ensemble_mean_curve(criterion, dynamics_run):
    rep, _ = dynamics_run
    dev = rep["max_rel_dev_vs_prediction"]
    ok = dev is not None and dev <= 0.10
    criterion(10, "decay law: 50-seed mean vs predicted curve", ok,
              f"max relative deviation {dev:.3f} (<=0.10) above 10x noise floor {rep['noise_floor']:.1e}")
    assert ok


def test_c11_quadratic_spectral_shape(criterion):
    med_bulk, med_max = [], []
    for n in (10, 20, 40):
        spectra = ensemble_spectra(Quadratic(1.0), Architecture(n, n), 50, SEED)
        med_bulk.append(float(np.median([np.median(s.nonzero) for s in spectra])))
        med_max.append(float(np.median([s.eigenvalues[-1] for s in spectra])))
    ok = med_bulk[0] > med_bulk[1] > med_bulk[2] and med_max[0] < med_max[1] < med_max[2]
    criterion(11, "quadratic spectra, N = 10, 20, 40", ok,
              "median bulk " + " > ".join(f"{v:.4f}" for v in med_bulk)
              + "; median max " + " < ".join(f"{v:.2f}" for v in med_max))
    assert ok


def test_c12_non_gaussian_teachers(criterion):
    ks = {}
    for dist in ("uniform", "rademacher"):
        for ni, nh in ((10, 20), (30, 10)):
            ks[(dist, ni, nh)] = spectrum_experiment(Linear(), Architecture(ni, nh), 200, SEED, dist)[0]["ks"]
    ok = all(ks[(d, 10, 20)] < 0.07 for d in ("uniform", "rademacher"))
    ok &= all(np.isfinite(ks[(d, 30, 10)]) for d in ("uniform", "rademacher"))
    criterion(12, "uniform / Rademacher teachers", ok,
              ", ".join(f"{d} {ni}x{nh} KS={v:.4f}" + (" (<0.07)" if ni == 10 else " (info)")
                        for (d, ni, nh), v in ks.items()))
    assert ok


def _mass(d):
    lo, hi = d.support
    if d.kind == "mp":
        f = lambda u: 2 * u * d.pdf(u * u)  # noqa: E731  (x = u^2 tames the hard edge)
        return integrate.quad(f, math.sqrt(lo), math.sqrt(hi), limit=400)[0]
    return integrate.quad(lambda x: float(d.pdf(np.array([x]))[0]), lo, min(hi, 60.0), limit=400)[0]


def test_c13_distribution_self_tests(criterion):
    dists = {
        "chi2(20)": chi2_scaled(20),
        "chi2(10)": chi2_scaled(10),
        "mp(10,20)": mp_scaled(10, 20),
        "mp(30,10)": mp_scaled(30, 10),
        "conv(10,20)": linear_spectrum_prediction(10, 20),
        "conv(30,10)": convolution_spectrum(30, 10),
        "mixture(30,10)": linear_spectrum_prediction(30, 10),
    }
    rows, ok = [], True
    for name, d in dists.items():
        mass = _mass(d)
        ks = ks_distance(d.sample(100_000, SEED), d.cdf)
        ok &= abs(mass - 1) <= 1e-3 and ks < 0.01
        rows.append(f"{name} mass {mass:.5f} KS {ks:.4f}")
    criterion(13, "theoretical spectra normalise and sample correctly", ok, "; ".join(rows))
    assert ok
