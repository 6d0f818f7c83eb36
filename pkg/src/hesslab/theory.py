"""Closed-form predictions for Hessian spectra and ranks.

Linear teachers: the nonzero Hessian eigenvalues are ``|W2|^2 + mu`` where
``|W2|^2`` follows a scaled chi-square law and ``mu`` runs over the nonzero
eigenvalues of ``W1 W1^T`` (Marchenko-Pastur).  When ``n_in > n_hidden`` the
extra ``n_in - n_hidden`` eigenvalues are the bare chi-square value.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import special, stats

from .errors import UsageError
from .hessian import hessian_linear
from .net import Activation, Architecture, Erf, Linear, Polynomial, Quadratic, TwoLayerNet
from .seeding import rng_for
from .spectral import eig_sym

CONV_NODES = 2048
CDF_TABLE_POINTS = 16_001


@dataclass(frozen=True, eq=False)
class TheoreticalSpectrum:
    kind: str
    params: dict
    pdf: Callable[[np.ndarray], np.ndarray]
    cdf: Callable[[np.ndarray], np.ndarray]
    _sample: Callable[[int, np.random.Generator], np.ndarray] = field(repr=False)
    support: tuple[float, float] = (0.0, math.inf)

    def sample(self, n: int, seed: int = 0, index: int = 0) -> np.ndarray:
        return self._sample(int(n), rng_for(seed, f"theory:{self.kind}", index))

    def sample_rng(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self._sample(int(n), rng)

    def curve(self, x) -> np.ndarray:
        return np.asarray(self.pdf(np.asarray(x, dtype=float)), dtype=float)


# ---------------------------------------------------------------------------
# Scaled chi-square
# ---------------------------------------------------------------------------

def chi2_scaled(df: int) -> TheoreticalSpectrum:
    """Law of ``chi2_df / df`` (mean 1, variance 2/df); the A-block eigenvalue |W2|^2."""
    if df < 1:
        raise UsageError("df must be >= 1")
    dist = stats.chi2(df, scale=1.0 / df)

    def sample(n, rng):
        return rng.chisquare(df, size=n) / df

    return TheoreticalSpectrum("chi2", {"df": df}, dist.pdf, dist.cdf, sample, (0.0, math.inf))


# ---------------------------------------------------------------------------
# Scaled Marchenko-Pastur
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class _MPShape:
    """Nonzero-eigenvalue law of ``W1 W1^T`` for an ``n_hidden x n_in`` matrix
    with iid entries of variance ``v``: ratio ``lam = n_hidden / n_in`` and
    scale ``s2 = n_in * v``, edges ``s2 (1 -+ sqrt(lam))^2``."""

    lam: float
    s2: float

    @property
    def lo(self) -> float:
        return self.s2 * (1.0 - math.sqrt(self.lam)) ** 2

    @property
    def hi(self) -> float:
        return self.s2 * (1.0 + math.sqrt(self.lam)) ** 2

    @property
    def norm(self) -> float:
        # continuous part carries mass 1/lam when lam > 1
        return self.lam if self.lam > 1.0 else 1.0

    def pdf(self, x):
        x = np.asarray(x, dtype=float)
        lo, hi = self.lo, self.hi
        inside = (x >= lo) & (x <= hi) & (x > 0)
        xs = np.where(inside, x, 1.0)
        root = np.sqrt(np.clip((hi - xs) * (xs - lo), 0.0, None))
        out = self.norm * root / (2.0 * math.pi * self.s2 * self.lam * xs)
        return np.where(inside, out, 0.0)

    # Angle parametrisation x = lo + 2 r sin^2(phi/2), r = (hi - lo)/2, phi in [0, pi].
    # The density in phi is smooth and bounded even when lo = 0.
    @property
    def r(self) -> float:
        return 0.5 * (self.hi - self.lo)

    def x_of_phi(self, phi):
        s = np.sin(0.5 * np.asarray(phi, dtype=float))
        return self.lo + 2.0 * self.r * s * s

    def phi_of_x(self, x):
        x = np.clip(np.asarray(x, dtype=float), self.lo, self.hi)
        return 2.0 * np.arcsin(np.sqrt(np.clip((x - self.lo) / (2.0 * self.r), 0.0, 1.0)))

    def phi_density(self, phi):
        phi = np.asarray(phi, dtype=float)
        s = np.sin(0.5 * phi)
        c = np.cos(0.5 * phi)
        r = self.r
        if self.lo == 0.0:
            ratio = 2.0 * c * c / r  # sin^2(phi) / x with the s^2 factor cancelled
        else:
            ratio = 4.0 * s * s * c * c / (self.lo + 2.0 * r * s * s)
        return self.norm * r * r * ratio / (2.0 * math.pi * self.s2 * self.lam)


class _MPTables:
    """Cumulative table of the angle density for CDF evaluation."""

    def __init__(self, shape: _MPShape, nodes: int = 8193):
        self.shape = shape
        self.phi = np.linspace(0.0, math.pi, nodes)
        f = shape.phi_density(self.phi)
        # cumulative Simpson on pairs of intervals, trapezoid fill for odd points
        dphi = self.phi[1] - self.phi[0]
        cum = np.zeros(nodes)
        cum[1:] = np.cumsum(0.5 * (f[1:] + f[:-1]) * dphi)
        simp = np.zeros(nodes)
        simp[2::2] = np.cumsum((f[0:-2:2] + 4.0 * f[1:-1:2] + f[2::2]) * dphi / 3.0)
        simp[1::2] = simp[0:-1:2] + (cum[1::2] - cum[0:-1:2])
        self.cum = simp
        self.fmax = float(f.max())

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        out = np.interp(self.shape.phi_of_x(x), self.phi, self.cum)
        out = np.where(x < self.shape.lo, 0.0, out)
        return np.clip(np.where(x >= self.shape.hi, 1.0, out), 0.0, 1.0)


def _mp_shape(n_in: int, n_hidden: int, variance: float | None) -> _MPShape:
    if n_in < 1 or n_hidden < 1:
        raise UsageError("n_in and n_hidden must be >= 1")
    v = 1.0 / n_in if variance is None else float(variance)
    if v <= 0:
        raise UsageError("variance must be positive")
    return _MPShape(n_hidden / n_in, n_in * v)


def mp_scaled(n_in: int, n_hidden: int, variance: float | None = None) -> TheoreticalSpectrum:
    """Nonzero-eigenvalue law of ``W1 W1^T``, W1 of shape ``(n_hidden, n_in)``.

    ``variance`` is the entry variance of W1, ``1/n_in`` by default, which puts
    the support at ``(1 -+ sqrt(n_hidden/n_in))^2``.
    """
    shape = _mp_shape(n_in, n_hidden, variance)
    tables = _MPTables(shape)
    envelope = tables.fmax * 1.02

    def sample(n, rng):
        out = np.empty(n)
        filled = 0
        while filled < n:
            want = n - filled
            batch = int(want * envelope * math.pi * 1.2) + 64
            phi = rng.uniform(0.0, math.pi, batch)
            u = rng.uniform(0.0, envelope, batch)
            keep = phi[u < shape.phi_density(phi)][:want]
            out[filled:filled + keep.size] = shape.x_of_phi(keep)
            filled += keep.size
        return out

    return TheoreticalSpectrum(
        "mp",
        {"n_in": n_in, "n_hidden": n_hidden, "lambda": shape.lam, "sigma2": shape.s2,
         "lambda_minus": shape.lo, "lambda_plus": shape.hi},
        shape.pdf, tables.cdf, sample, (shape.lo, shape.hi),
    )


# ---------------------------------------------------------------------------
# Linear-network Hessian spectrum
# ---------------------------------------------------------------------------

def convolution_spectrum(n_in: int, n_hidden: int, variance: float | None = None,
                         nodes: int = CONV_NODES) -> TheoreticalSpectrum:
    """Law of a scaled chi-square draw plus an independent Marchenko-Pastur draw."""
    chi = chi2_scaled(n_hidden)
    mp = mp_scaled(n_in, n_hidden, variance)
    shape = _mp_shape(n_in, n_hidden, variance)
    phi = np.linspace(0.0, math.pi, nodes)
    w = shape.phi_density(phi) * (phi[1] - phi[0])
    w[0] *= 0.5
    w[-1] *= 0.5
    u = shape.x_of_phi(phi)
    k = 0.5 * n_hidden
    log_norm = k * math.log(k) - special.gammaln(k)

    # scaled chi-square through the regularised gamma function; much cheaper
    # than frozen scipy distributions on (points x nodes) arrays
    def chi_pdf(y):
        pos = y > 0
        ys = np.where(pos, y, 1.0)
        return np.where(pos, np.exp(log_norm + (k - 1.0) * np.log(ys) - k * ys), 0.0)

    def chi_cdf(y):
        return special.gammainc(k, k * np.clip(y, 0.0, None))

    def _quad(func, x, chunk=2048):
        x = np.asarray(x, dtype=float)
        flat = x.ravel()
        out = np.empty(flat.size)
        for s in range(0, flat.size, chunk):
            xs = flat[s:s + chunk]
            out[s:s + chunk] = func(xs[:, None] - u[None, :]) @ w
        return out.reshape(x.shape)

    def pdf(x):
        return _quad(chi_pdf, x)

    table: list = []

    def cdf(x):
        # tabulated once on a fine grid; the tail beyond it carries < 1e-13 mass
        if not table:
            top = float(u[-1]) + float(stats.chi2.isf(1e-13, n_hidden)) / n_hidden
            grid = np.linspace(shape.lo, top, CDF_TABLE_POINTS)
            table.extend([grid, np.clip(_quad(chi_cdf, grid), 0.0, 1.0)])
        grid, vals = table
        return np.interp(np.asarray(x, dtype=float), grid, vals, left=0.0, right=1.0)

    def sample(n, rng):
        a = chi.sample_rng(n, rng)
        b = mp.sample_rng(n, rng)
        return a + b

    return TheoreticalSpectrum("convolution", {"n_in": n_in, "n_hidden": n_hidden},
                               pdf, cdf, sample, (shape.lo, math.inf))


def linear_spectrum_prediction(n_in: int, n_hidden: int, variance: float | None = None,
                               nodes: int = CONV_NODES) -> TheoreticalSpectrum:
    """Predicted law of the nonzero Hessian eigenvalues of a linear teacher."""
    conv = convolution_spectrum(n_in, n_hidden, variance, nodes)
    if n_in <= n_hidden:
        return conv
    chi = chi2_scaled(n_hidden)
    w_chi = (n_in - n_hidden) / n_in
    w_conv = n_hidden / n_in

    def pdf(x):
        return w_chi * chi.pdf(x) + w_conv * conv.pdf(x)

    def cdf(x):
        return w_chi * chi.cdf(x) + w_conv * conv.cdf(x)

    def sample(n, rng):
        pick = rng.random(n) < w_chi
        return np.where(pick, chi.sample_rng(n, rng), conv.sample_rng(n, rng))

    return TheoreticalSpectrum("mixture",
                               {"n_in": n_in, "n_hidden": n_hidden, "weight_chi2": w_chi, "weight_conv": w_conv},
                               pdf, cdf, sample, (0.0, math.inf))


def chi2_cluster_fraction(eigs_per_teacher, lambda2s, n_in: int, n_hidden: int,
                          width_rel: float = 1e-8) -> float:
    """Share of nonzero eigenvalues assigned to the bare chi-square cluster.

    Conditional on a teacher, the chi-square component is a point mass at
    ``|W2|^2`` (modelled as a Gaussian of relative width ``width_rel``) and the
    convolution component has density ``mp.pdf(lambda - |W2|^2)``.  Each
    eigenvalue goes to the component with the larger likelihood.
    """
    mp = mp_scaled(n_in, n_hidden)
    hits = 0
    total = 0
    for eigs, l2 in zip(eigs_per_teacher, lambda2s):
        eigs = np.asarray(eigs, dtype=float)
        w = width_rel * max(abs(l2), 1.0)
        like_chi = stats.norm.pdf(eigs, loc=l2, scale=w)
        like_conv = mp.pdf(eigs - l2)
        hits += int(np.sum(like_chi > like_conv))
        total += eigs.size
    return hits / total if total else float("nan")


def fit_mixture_weight(samples, first: TheoreticalSpectrum, second: TheoreticalSpectrum,
                       start: float = 0.5, iters: int = 500, tol: float = 1e-10) -> float:
    """Maximum-likelihood weight of ``first`` in ``w*first + (1-w)*second`` (EM)."""
    x = np.asarray(samples, dtype=float)
    p1 = first.pdf(x)
    p2 = second.pdf(x)
    w = start
    for _ in range(iters):
        num = w * p1
        den = num + (1.0 - w) * p2
        resp = np.divide(num, den, out=np.full_like(num, 0.5), where=den > 0)
        new = float(resp.mean())
        if abs(new - w) < tol:
            return new
        w = new
    return w


# ---------------------------------------------------------------------------
# Effective number of parameters
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EffectiveParamReport:
    n_eff_predicted: int
    rank_observed: int | None
    activation: dict
    arch: Architecture
    nu: int
    is_upper_bound: bool = False
    empirical_claim: bool = False

    @property
    def match(self) -> bool | None:
        if self.rank_observed is None:
            return None
        if self.is_upper_bound:
            return self.rank_observed <= self.n_eff_predicted
        return self.rank_observed == self.n_eff_predicted

    def to_dict(self) -> dict:
        return {
            "n_eff_predicted": self.n_eff_predicted,
            "rank_observed": self.rank_observed,
            "activation": self.activation,
            "arch": {"n_in": self.arch.n_in, "n_hidden": self.arch.n_hidden},
            "nu": self.nu,
            "is_upper_bound": self.is_upper_bound,
            "empirical_claim": self.empirical_claim,
            "match": self.match,
        }


def quadratic_n_eff(n_in: int, n_hidden: int) -> int:
    """Rank of the quadratic-network Hessian: ``N_i + N_i(N_i+1)/2 - (nu^2+3nu)/2 H(nu)``."""
    nu = n_in - n_hidden
    loss = (nu * nu + 3 * nu) // 2 if nu > 0 else 0
    return n_in + n_in * (n_in + 1) // 2 - loss


def poly_rank_upper_bound(degree: int, n_in: int) -> int:
    """Number of coefficients of a degree-``degree`` polynomial in ``n_in`` variables without constant term."""
    if degree < 1 or n_in < 1:
        raise UsageError("degree and n_in must be >= 1")
    return math.comb(n_in + degree, degree) - 1


def symmetric_tensor_components(order: int, n_in: int) -> int:
    if order < 1 or n_in < 1:
        raise UsageError("order and n_in must be >= 1")
    return math.comb(n_in + order - 1, order)


def effective_params(kind: Activation, arch: Architecture, rank_observed: int | None = None) -> EffectiveParamReport:
    nu = arch.n_in - arch.n_hidden
    common = dict(rank_observed=rank_observed, activation=kind.to_dict(), arch=arch, nu=nu)
    if isinstance(kind, Linear) or (isinstance(kind, Quadratic) and kind.eps == 0.0):
        return EffectiveParamReport(arch.n_in, **common)
    if isinstance(kind, Quadratic):
        return EffectiveParamReport(quadratic_n_eff(arch.n_in, arch.n_hidden), **common)
    if isinstance(kind, Erf):
        return EffectiveParamReport(arch.n_params, empirical_claim=True, **common)
    if isinstance(kind, Polynomial):
        deg = kind.degree
        if deg == 0:
            return EffectiveParamReport(0, **common)
        if deg == 1:
            return EffectiveParamReport(arch.n_in, **common)
        if deg == 2:
            return EffectiveParamReport(quadratic_n_eff(arch.n_in, arch.n_hidden), **common)
        bound = min(poly_rank_upper_bound(deg, arch.n_in), arch.n_params)
        return EffectiveParamReport(bound, is_upper_bound=True, **common)
    raise UsageError(f"unsupported activation {kind!r}")


# ---------------------------------------------------------------------------
# Block eigenstructure of the linear Hessian
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class BlockEigenReport:
    lambda2: float
    eigenvalues: np.ndarray  # constructed lambda1 + lambda2, ascending
    residuals: np.ndarray  # |H y - (l1 + l2) y| / |y|
    n_sum_type: int
    n_kernel_type: int
    n_independent: int
    eig_sym_rel_err: float

    @property
    def max_residual(self) -> float:
        return float(self.residuals.max()) if self.residuals.size else 0.0

    def to_dict(self) -> dict:
        return {
            "lambda2": self.lambda2,
            "eigenvalues": self.eigenvalues.tolist(),
            "max_residual": self.max_residual,
            "n_sum_type": self.n_sum_type,
            "n_kernel_type": self.n_kernel_type,
            "n_independent": self.n_independent,
            "eig_sym_rel_err": self.eig_sym_rel_err,
        }


def verify_block_eigenstructure(net: TwoLayerNet, sv_tol: float = 1e-10) -> BlockEigenReport:
    """Build the ``n_in`` eigenvectors ``[W2 (x) z', sqrt(l1) z]`` and
    ``[W2 (x) z', 0]`` from the SVD of W1 and check them against the Hessian."""
    if not isinstance(net.activation, Linear):
        raise UsageError("block eigenstructure applies to linear networks only")
    h = hessian_linear(net).data
    w1, w2 = net.w1, net.w2
    ni = net.arch.n_in
    lam2 = float(w2 @ w2)
    u, s, vt = np.linalg.svd(w1, full_matrices=True)
    r = int(np.sum(s > sv_tol * max(s.max(initial=0.0), 1.0)))

    ys, vals = [], []
    for i in range(ni):
        zp = vt[i]
        if i < r:
            top = np.kron(w2, zp)
            y = np.concatenate([top, s[i] * u[:, i]])
            vals.append(s[i] ** 2 + lam2)
        else:
            y = np.concatenate([np.kron(w2, zp), np.zeros(net.arch.n_hidden)])
            vals.append(lam2)
        ys.append(y)
    ys = np.array(ys)
    vals = np.array(vals)
    res = np.linalg.norm(ys @ h - vals[:, None] * ys, axis=1) / np.linalg.norm(ys, axis=1)
    indep = int(np.linalg.matrix_rank(ys))

    order = np.argsort(vals)
    top = eig_sym(h).eigenvalues[-ni:]
    rel = float(np.max(np.abs(vals[order] - top) / np.maximum(np.abs(top), np.finfo(float).tiny)))
    return BlockEigenReport(lam2, vals[order], res[order], r, ni - r, indep, rel)
