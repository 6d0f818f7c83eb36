"""Closed-form Hessians of the generalization error at the optimum.

At the optimum the residual ``y - y*`` vanishes, so the Hessian is the
Gaussian expectation of the gradient outer product.  For linear, quadratic and
erf activations those expectations have closed forms, assembled here into a
``HessianMatrix`` with the layout described in :mod:`hesslab.net`.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import NumericError, UsageError
from .net import Erf, Linear, Quadratic, TwoLayerNet

LAYOUT = "w1-rowmajor-then-w2"
MAX_EXPORT_DIM = 5000


@dataclass(frozen=True, eq=False)
class HessianMatrix:
    data: np.ndarray
    n_in: int
    n_hidden: int
    layout: str = LAYOUT

    def __post_init__(self):
        d = np.asarray(self.data, dtype=float)
        dim = (self.n_in + 1) * self.n_hidden
        if d.shape != (dim, dim):
            raise UsageError(f"Hessian has shape {d.shape}, expected {(dim, dim)}")
        d.flags.writeable = False
        object.__setattr__(self, "data", d)

    @property
    def dim(self) -> int:
        return self.data.shape[0]

    @property
    def n_w1(self) -> int:
        return self.n_in * self.n_hidden

    @property
    def a_block(self) -> np.ndarray:
        """W1-W1 derivatives."""
        k = self.n_w1
        return self.data[:k, :k]

    @property
    def b_block(self) -> np.ndarray:
        """W2-W2 derivatives."""
        k = self.n_w1
        return self.data[k:, k:]

    @property
    def c_block(self) -> np.ndarray:
        """W1-W2 cross derivatives, rows indexed by W1 parameters."""
        k = self.n_w1
        return self.data[:k, k:]

    def to_csv(self) -> str:
        """Upper triangle as ``i,j,value`` rows."""
        self._check_export()
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["i", "j", "value"])
        iu, ju = np.triu_indices(self.dim)
        for i, j, v in zip(iu, ju, self.data[iu, ju]):
            w.writerow([int(i), int(j), repr(float(v))])
        return buf.getvalue()

    def to_json(self) -> str:
        self._check_export()
        iu, ju = np.triu_indices(self.dim)
        entries = [[int(i), int(j), float(v)] for i, j, v in zip(iu, ju, self.data[iu, ju])]
        return json.dumps({
            "dim": self.dim,
            "n_in": self.n_in,
            "n_hidden": self.n_hidden,
            "layout": self.layout,
            "entries": entries,
        })

    @classmethod
    def from_json(cls, text: str) -> "HessianMatrix":
        d = json.loads(text)
        if d.get("layout", LAYOUT) != LAYOUT:
            raise UsageError(f"unsupported layout {d.get('layout')!r}")
        dim = int(d["dim"])
        h = np.zeros((dim, dim))
        for i, j, v in d["entries"]:
            h[i, j] = h[j, i] = v
        return cls(h, int(d["n_in"]), int(d["n_hidden"]))

    def _check_export(self):
        if self.dim > MAX_EXPORT_DIM:
            raise UsageError(f"refusing full export of a {self.dim}x{self.dim} Hessian (limit {MAX_EXPORT_DIM})")


def assemble(a: np.ndarray, b: np.ndarray, c: np.ndarray, n_in: int, n_hidden: int) -> HessianMatrix:
    """Stack blocks ``[[A, C], [C^T, B]]``; A and B are symmetrised exactly."""
    a = 0.5 * (a + a.T)
    b = 0.5 * (b + b.T)
    return HessianMatrix(np.block([[a, c], [c.T, b]]), n_in, n_hidden)


def _require(net: TwoLayerNet, cls):
    if not isinstance(net.activation, cls):
        raise UsageError(f"expected a {cls.__name__} network, got {type(net.activation).__name__}")


def hessian_linear(net: TwoLayerNet) -> HessianMatrix:
    _require(net, Linear)
    w1, w2 = net.w1, net.w2
    nh, ni = w1.shape
    a = np.kron(np.outer(w2, w2), np.eye(ni))
    b = w1 @ w1.T
    # C[(m,n), k] = W1[k, n] * W2[m]
    c = (w2[:, None, None] * w1.T[None, :, :]).reshape(nh * ni, nh)
    return assemble(a, b, c, ni, nh)


def hessian_quadratic(net: TwoLayerNet) -> HessianMatrix:
    """Quadratic activation ``x + eps x^2``.

    The eps^2 corrections to the W1-W1 and cross blocks carry the same W2
    prefactors as the linear terms (this is what the Gaussian fourth-moment
    expansion gives, and what the Monte-Carlo oracle confirms).
    """
    _require(net, Quadratic)
    eps2 = net.activation.eps ** 2
    w1, w2 = net.w1, net.w2
    nh, ni = w1.shape
    gram = w1 @ w1.T
    sq = np.diag(gram).copy()
    eye = np.eye(ni)

    f1 = np.outer(sq, sq) + 2.0 * gram * gram
    b = gram + eps2 * f1

    # F2[m, n, p, q] = d_nq G_mp + W1_mn W1_pq + W1_mq W1_pn
    f2 = (gram[:, None, :, None] * eye[None, :, None, :]
          + w1[:, :, None, None] * w1[None, None, :, :]
          + w1[:, None, None, :] * w1.T[None, :, :, None])
    inner = eye[None, :, None, :] + 4.0 * eps2 * f2
    a = (np.outer(w2, w2)[:, None, :, None] * inner).reshape(nh * ni, nh * ni)

    # F3[m, n, k] = W1_mn S_k + 2 W1_kn G_mk
    f3 = w1[:, :, None] * sq[None, None, :] + 2.0 * w1.T[None, :, :] * gram[:, None, :]
    c = (w2[:, None, None] * (w1.T[None, :, :] + 2.0 * eps2 * f3)).reshape(nh * ni, nh)
    return assemble(a, b, c, ni, nh)


def erf_sigma(w1: np.ndarray):
    """Inverse-covariance data for every pair of hidden units.

    Returns ``(det, sigma)`` with ``det[m, p] = det(I + W_m^T W_m + W_p^T W_p)``
    and ``sigma[m, p]`` the inverse of that matrix, built by the two-step
    Sherman-Morrison chain (no generic inversion).
    """
    nh, ni = w1.shape
    gram = w1 @ w1.T
    s = np.diag(gram)
    am = 1.0 + s
    det = am[:, None] * am[None, :] - gram ** 2
    if not np.all(np.isfinite(det)) or np.any(det <= 0):
        bad = np.argwhere(~np.isfinite(det) | (det <= 0))
        raise NumericError(f"non-finite or non-positive determinant for hidden-unit pairs {bad[:5].tolist()}")

    outer_m = w1[:, :, None] * w1[:, None, :]  # W_m^T W_m, shape (m, n, q)
    rank1 = outer_m / am[:, None, None]
    cross = w1[:, None, :, None] * w1[None, :, None, :]  # W_m^T W_p as [m, p, n, q]
    cross = cross + cross.transpose(0, 1, 3, 2)
    corr = (gram ** 2)[:, :, None, None] * (rank1[:, None] + rank1[None, :]) - gram[:, :, None, None] * cross
    sigma = np.eye(ni) - rank1[:, None] - rank1[None, :] - corr / det[:, :, None, None]
    return det, sigma


def hessian_erf(net: TwoLayerNet) -> HessianMatrix:
    _require(net, Erf)
    # overflow is reported below as a NumericError, not as warnings
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        return _hessian_erf(net)


def _hessian_erf(net: TwoLayerNet) -> HessianMatrix:
    w1, w2 = net.w1, net.w2
    nh, ni = w1.shape
    gram = w1 @ w1.T
    s = np.diag(gram)
    am = 1.0 + s
    det, sigma = erf_sigma(w1)

    pref = (2.0 / math.pi) * np.outer(w2, w2) / np.sqrt(det)
    a = (pref[:, :, None, None] * sigma).transpose(0, 2, 1, 3).reshape(nh * ni, nh * ni)

    b = (2.0 / math.pi) * np.arctan(gram / np.sqrt(det))

    # cross block, [m, k, n]: W1_kn - (W_k . W_m) W1_mn / (1 + |W_m|^2)
    num = w1[None, :, :] - gram[:, :, None] * w1[:, None, :] / am[:, None, None]
    var = 1.0 + s[None, :] - gram ** 2 / am[:, None]
    c = (2.0 / math.pi) * (w2 / np.sqrt(am))[:, None, None] * num / np.sqrt(var)[:, :, None]
    c = c.transpose(0, 2, 1).reshape(nh * ni, nh)

    h = assemble(a, b, c, ni, nh)
    if not np.all(np.isfinite(h.data)):
        rows = sorted({int(i) for i in np.argwhere(~np.isfinite(h.data))[:, 0]})
        raise NumericError(f"non-finite Hessian entries in rows {rows[:10]}")
    return h


def analytic_hessian(net: TwoLayerNet) -> HessianMatrix:
    """Dispatch on the activation; polynomial nets have no closed form here."""
    act = net.activation
    if isinstance(act, Linear):
        return hessian_linear(net)
    if isinstance(act, Quadratic):
        return hessian_quadratic(net)
    if isinstance(act, Erf):
        return hessian_erf(net)
    raise UsageError(f"no analytic Hessian for activation {act.name!r}; use the Monte-Carlo estimator")
