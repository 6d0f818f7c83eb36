"""Formula-free estimators of the Hessian at the optimum.

* ``outer_product_hessian_mc`` averages the block expressions of the Hessian
  (gradient products, residual terms dropped) over Gaussian inputs.
* ``empirical_fim`` averages the outer product of the full per-sample output
  gradient.  Same quantity, different code path.
* ``finite_diff_hessian`` differentiates the empirical loss numerically.

Inputs come in fixed-size chunks, each from its own RNG substream, and chunk
sums are reduced in chunk order with compensated summation, so results depend
only on ``(seed, M, chunk_size)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .errors import NumericError, UsageError
from .hessian import HessianMatrix, assemble
from .net import Linear, TwoLayerNet, forward, output_gradients
from .seeding import rng_for

DEFAULT_CHUNK = 1 << 16


@dataclass(frozen=True, eq=False)
class McEstimate:
    mean: HessianMatrix
    stderr: np.ndarray
    samples: int

    def z_scores(self, reference: HessianMatrix) -> np.ndarray:
        """|reference - mean| / stderr; entries with zero stderr count as 0 if equal, inf otherwise."""
        dev = np.abs(reference.data - self.mean.data)
        with np.errstate(divide="ignore", invalid="ignore"):
            z = dev / self.stderr
        z[(self.stderr == 0) & (dev == 0)] = 0.0
        return z


def gaussian_inputs(n_in: int, m: int, seed: int, chunk_size: int = DEFAULT_CHUNK) -> Iterator[np.ndarray]:
    """Standard-normal input rows, chunk ``c`` drawn from substream ``(seed, "inputs", c)``."""
    if chunk_size < 1:
        raise UsageError("chunk_size must be positive")
    done = 0
    c = 0
    while done < m:
        size = min(chunk_size, m - done)
        yield rng_for(seed, "inputs", c).standard_normal((size, n_in))
        done += size
        c += 1


def moment_matched(x: np.ndarray) -> np.ndarray:
    """Rescale rows so that the sample second moment is exactly the identity.

    A variance-reduction device: for a linear network every second-order
    statistic of the inputs then equals its population value.
    """
    m = x.shape[0]
    if m < x.shape[1]:
        raise UsageError("moment matching needs at least n_in samples")
    second = x.T @ x / m
    vals, vecs = np.linalg.eigh(second)
    return x @ (vecs / np.sqrt(vals)) @ vecs.T


class _Accumulator:
    """Neumaier-compensated running sum of arrays."""

    def __init__(self, shape):
        self.total = np.zeros(shape)
        self.comp = np.zeros(shape)

    def add(self, x: np.ndarray):
        t = self.total + x
        big = np.abs(self.total) >= np.abs(x)
        self.comp += np.where(big, (self.total - t) + x, (x - t) + self.total)
        self.total = t

    @property
    def value(self) -> np.ndarray:
        return self.total + self.comp


def _block_terms(net: TwoLayerNet, x: np.ndarray):
    """Per-sample factors of the three Hessian blocks: ``a[s, m, n]`` and ``h[s, k]``."""
    z = x @ net.w1.T
    h, g1, _ = net.activation(z)
    a = (net.w2 * g1)[:, :, None] * x[:, None, :]
    return a, h


def _block_sums(net: TwoLayerNet, x: np.ndarray):
    """Chunk sums of the A/C/B block products and of their squares (for stderr)."""
    a, h = _block_terms(net, x)
    a = a.reshape(a.shape[0], -1)  # row-major (m, n) flattening
    first = np.block([[a.T @ a, a.T @ h], [h.T @ a, h.T @ h]])
    a2 = a * a
    h2 = h * h
    second = np.block([[a2.T @ a2, a2.T @ h2], [h2.T @ a2, h2.T @ h2]])
    return first, second


def _gradient_sums(net: TwoLayerNet, x: np.ndarray):
    j = output_gradients(net, x)
    j2 = j * j
    return j.T @ j, j2.T @ j2


def _mc(net: TwoLayerNet, m: int, seed: int, chunk_size: int, sums) -> McEstimate:
    if m < 2:
        raise UsageError(f"need at least 2 samples, got M={m}")
    d = net.arch.n_params
    s1 = _Accumulator((d, d))
    s2 = _Accumulator((d, d))
    for x in gaussian_inputs(net.arch.n_in, m, seed, chunk_size):
        f, s = sums(net, x)
        s1.add(f)
        s2.add(s)
    mean = s1.value / m
    var = (s2.value / m - mean * mean) * (m / (m - 1))
    stderr = np.sqrt(np.clip(var, 0.0, None) / m)
    if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(stderr))):
        raise NumericError("non-finite Monte-Carlo estimate")
    ni, nh = net.arch.n_in, net.arch.n_hidden
    k = net.arch.n_w1
    h = assemble(mean[:k, :k], mean[k:, k:], mean[:k, k:], ni, nh)
    se = 0.5 * (stderr + stderr.T)
    return McEstimate(h, se, m)


def outer_product_hessian_mc(net: TwoLayerNet, m: int, seed: int, chunk_size: int = DEFAULT_CHUNK) -> McEstimate:
    """Monte-Carlo average of the gradient-product Hessian blocks at ``net``'s weights."""
    return _mc(net, m, seed, chunk_size, _block_sums)


def empirical_fim(net: TwoLayerNet, m: int, seed: int, chunk_size: int = DEFAULT_CHUNK) -> McEstimate:
    """Monte-Carlo Fisher information ``E[grad f grad f^T]`` from full gradient vectors."""
    return _mc(net, m, seed, chunk_size, _gradient_sums)


def outer_product_from_inputs(net: TwoLayerNet, x: np.ndarray) -> np.ndarray:
    """Outer-product Hessian averaged over the given rows (any count, including one)."""
    x = np.atleast_2d(x)
    return _block_sums(net, x)[0] / x.shape[0]


# ---------------------------------------------------------------------------
# Finite differences
# ---------------------------------------------------------------------------

class _SparseLoss:
    """Empirical loss ``(1/2M) sum (y(theta) - y*)^2`` for perturbations touching
    at most a couple of parameters, evaluated without recomputing the whole net
    and without cancellation against the teacher output."""

    def __init__(self, teacher: TwoLayerNet, x: np.ndarray):
        self.net = teacher
        self.x = x
        self.z = x @ teacher.w1.T
        self.h = teacher.activation(self.z)[0]
        self.ni = teacher.arch.n_in
        self.k1 = teacher.arch.n_w1

    def __call__(self, delta: dict[int, float]) -> float:
        dz: dict[int, np.ndarray] = {}
        dw2: dict[int, float] = {}
        for i, v in delta.items():
            if i < self.k1:
                m, n = divmod(i, self.ni)
                dz[m] = dz.get(m, 0.0) + v * self.x[:, n]
            else:
                k = i - self.k1
                dw2[k] = dw2.get(k, 0.0) + v
        r = np.zeros(self.x.shape[0])
        act = self.net.activation
        w2 = self.net.w2
        for k in set(dz) | set(dw2):
            if k in dz:
                znew = self.z[:, k] + dz[k]
                r += w2[k] * act.diff(znew, self.z[:, k])
                hk = act(znew)[0]
            else:
                hk = self.h[:, k]
            if k in dw2:
                r += dw2[k] * hk
        return 0.5 * float(np.mean(r * r))


class _ExactLinearLoss:
    """Generalization error of a linear net: 0.5 * |W2 W1 - W2* W1*|^2."""

    def __init__(self, teacher: TwoLayerNet):
        self.w1 = teacher.w1
        self.w2 = teacher.w2
        self.ni = teacher.arch.n_in
        self.k1 = teacher.arch.n_w1

    def __call__(self, delta: dict[int, float]) -> float:
        d1 = np.zeros_like(self.w1)
        d2 = np.zeros_like(self.w2)
        for i, v in delta.items():
            if i < self.k1:
                d1[divmod(i, self.ni)] += v
            else:
                d2[i - self.k1] += v
        diff = d2 @ self.w1 + self.w2 @ d1 + d2 @ d1
        return 0.5 * float(diff @ diff)


def finite_diff_hessian(
    teacher: TwoLayerNet,
    h: float = 1e-4,
    m: int | None = 100_000,
    seed: int = 0,
    *,
    moment_match: bool = False,
    chunk_size: int = DEFAULT_CHUNK,
) -> HessianMatrix:
    """Central second differences of the loss around the teacher's parameters.

    The same ``m`` input rows are reused for every evaluation.  With
    ``m=None`` a linear teacher is differentiated through its exact
    generalization error instead of a sampled one.
    """
    if not (1e-6 <= h <= 1e-2):
        raise UsageError(f"step h={h} outside [1e-6, 1e-2]")
    if m is None:
        if not isinstance(teacher.activation, Linear):
            raise UsageError("exact (m=None) finite differences are only available for linear nets")
        loss = _ExactLinearLoss(teacher)
    else:
        if m < 1:
            raise UsageError("m must be positive")
        x = np.concatenate(list(gaussian_inputs(teacher.arch.n_in, m, seed, chunk_size)))
        if moment_match:
            x = moment_matched(x)
        loss = _SparseLoss(teacher, x)

    d = teacher.arch.n_params
    out = np.empty((d, d))
    base = loss({})
    for i in range(d):
        out[i, i] = (loss({i: 2 * h}) - 2 * base + loss({i: -2 * h})) / (4 * h * h)
        for j in range(i + 1, d):
            v = (loss({i: h, j: h}) - loss({i: h, j: -h}) - loss({i: -h, j: h}) + loss({i: -h, j: -h})) / (4 * h * h)
            out[i, j] = out[j, i] = v
        if not np.all(np.isfinite(out[i, i:])):
            j = i + int(np.argmax(~np.isfinite(out[i, i:])))
            raise NumericError(f"non-finite finite-difference entry at ({i}, {j})")
    ni, nh = teacher.arch.n_in, teacher.arch.n_hidden
    k = teacher.arch.n_w1
    return assemble(out[:k, :k], out[k:, k:], out[:k, k:], ni, nh)


# ---------------------------------------------------------------------------
# Validation report
# ---------------------------------------------------------------------------

def validation_report(analytic: HessianMatrix, est: McEstimate, net: TwoLayerNet,
                      z_max: float = 4.0, min_frac_inside: float = 0.99) -> dict:
    z = est.z_scores(analytic)
    iu = np.triu_indices(analytic.dim)
    zu = z[iu]
    frac_out = float(np.mean(zu > z_max))
    return {
        "activation": net.activation.to_dict(),
        "arch": {"n_in": net.arch.n_in, "n_hidden": net.arch.n_hidden},
        "M": est.samples,
        "max_abs_dev": float(np.max(np.abs(analytic.data - est.mean.data))),
        "frac_entries_outside_4se": frac_out,
        "verdict": "pass" if frac_out <= 1.0 - min_frac_inside else "fail",
    }


def report_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True)
