"""Eigenvalues, numerical rank, histograms and KS distances."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import NumericError, UsageError
from .hessian import HessianMatrix

DEFAULT_TAU_REL = 1e-8


@dataclass(frozen=True, eq=False)
class Spectrum:
    eigenvalues: np.ndarray
    rank: int
    tol_used: float
    vectors: np.ndarray | None = None

    @property
    def lambda_max(self) -> float:
        return float(self.eigenvalues[-1])

    def nonzero(self) -> np.ndarray:
        return self.eigenvalues[self.eigenvalues > self.tol_used]

    def to_csv(self) -> str:
        return "lambda\n" + "".join(f"{v!r}\n" for v in self.eigenvalues.tolist())


def _matrix(h) -> np.ndarray:
    return h.data if isinstance(h, HessianMatrix) else np.asarray(h, dtype=float)


def eig_sym(h, tau_rel: float = DEFAULT_TAU_REL, vectors: bool = False) -> Spectrum:
    """Full eigendecomposition of a symmetric matrix (LAPACK ``syevd``)."""
    a = _matrix(h)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise UsageError(f"expected a square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NumericError("matrix has non-finite entries")
    scale = max(float(np.max(np.abs(a))), np.finfo(float).tiny) if a.size else 1.0
    if np.max(np.abs(a - a.T), initial=0.0) > 1e-12 * scale:
        raise UsageError("matrix is not symmetric")
    try:
        if vectors:
            w, v = np.linalg.eigh(a)
        else:
            w, v = np.linalg.eigvalsh(a), None
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"eigensolver did not converge: {exc}") from exc
    w = np.sort(w)
    tol = _tolerance(w, tau_rel)
    return Spectrum(w, int(np.sum(w > tol)), tol, v)


def _tolerance(eigs: np.ndarray, tau_rel: float) -> float:
    if tau_rel <= 0:
        raise UsageError("tau_rel must be positive")
    if eigs.size == 0:
        return 0.0
    return float(tau_rel * np.max(np.abs(eigs)))


def numerical_rank(s: Spectrum | np.ndarray, tau_rel: float = DEFAULT_TAU_REL) -> int:
    """Number of eigenvalues above ``tau_rel * max|lambda|``."""
    eigs = s.eigenvalues if isinstance(s, Spectrum) else np.asarray(s, dtype=float)
    return int(np.sum(eigs > _tolerance(eigs, tau_rel)))


def with_rank(s: Spectrum, tau_rel: float) -> Spectrum:
    tol = _tolerance(s.eigenvalues, tau_rel)
    return Spectrum(s.eigenvalues, int(np.sum(s.eigenvalues > tol)), tol, s.vectors)


# ---------------------------------------------------------------------------
# Histograms
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SpectralDensity:
    bin_edges: np.ndarray
    counts: np.ndarray
    normalized: bool = True

    @property
    def widths(self) -> np.ndarray:
        return np.diff(self.bin_edges)

    @property
    def density(self) -> np.ndarray:
        n = self.counts.sum()
        if not self.normalized or n == 0:
            return self.counts.astype(float)
        return self.counts / (n * self.widths)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bin_left", "bin_right", "count", "density"])
        for lo, hi, c, d in zip(self.bin_edges[:-1], self.bin_edges[1:], self.counts, self.density):
            w.writerow([repr(float(lo)), repr(float(hi)), int(c), repr(float(d))])
        return buf.getvalue()


def spectral_histogram(eigs, rule: str | int = "fd", normalized: bool = True) -> SpectralDensity:
    """Histogram with Freedman-Diaconis bins (``"fd"``), log-spaced bins
    (``"log"``, positive values only) or a fixed bin count."""
    x = np.asarray(eigs, dtype=float).ravel()
    if x.size == 0:
        raise UsageError("cannot histogram an empty list")
    if not np.all(np.isfinite(x)):
        raise UsageError("eigenvalues must be finite")
    lo, hi = float(x.min()), float(x.max())
    if lo == hi:
        half = 0.5 * max(abs(lo), 1.0)
        edges = np.array([lo - half, hi + half])
    elif rule == "log":
        if lo <= 0:
            raise UsageError("log bins need strictly positive values")
        nb = max(1, int(np.ceil(np.log2(x.size) + 1)))
        edges = np.geomspace(lo, hi, nb + 1)
    elif rule == "fd":
        edges = np.histogram_bin_edges(x, bins="fd")
    elif isinstance(rule, (int, np.integer)) and rule >= 1:
        edges = np.linspace(lo, hi, int(rule) + 1)
    else:
        raise UsageError(f"unknown binning rule {rule!r}")
    counts, edges = np.histogram(x, bins=edges)
    return SpectralDensity(edges, counts, normalized)


# ---------------------------------------------------------------------------
# Kolmogorov-Smirnov
# ---------------------------------------------------------------------------

def ks_distance(samples, cdf: Callable[[np.ndarray], np.ndarray]) -> float:
    """sup_x |F_n(x) - cdf(x)| for the empirical CDF ``F_n`` of ``samples``."""
    x = np.sort(np.asarray(samples, dtype=float).ravel())
    n = x.size
    if n == 0:
        raise UsageError("ks_distance needs at least one sample")
    f = np.clip(np.asarray(cdf(x), dtype=float), 0.0, 1.0)
    # at tied samples the ECDF jumps once, over the whole tie
    last = np.searchsorted(x, x, side="right")
    first = np.searchsorted(x, x, side="left")
    d_plus = np.max(last / n - f)
    d_minus = np.max(f - first / n)
    return float(max(d_plus, d_minus, 0.0))


def ecdf(samples) -> Callable[[np.ndarray], np.ndarray]:
    """Right-continuous empirical CDF as a callable."""
    s = np.sort(np.asarray(samples, dtype=float).ravel())
    n = s.size
    if n == 0:
        raise UsageError("ecdf needs at least one sample")

    def f(x):
        return np.searchsorted(s, np.asarray(x, dtype=float), side="right") / n

    return f
