"""Two-layer bias-free networks ``y = W2 g(W1 x)`` and their teachers.

Parameters are flattened as W1 row-major followed by W2, i.e. index
``m * n_in + n`` for ``W1[m, n]`` and ``n_in * n_hidden + k`` for ``W2[k]``.
The Hessian modules rely on this layout.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from typing import Any, Union

import numpy as np
from scipy.special import erf, erfc

from .errors import UsageError
from .seeding import rng_for

_SQRT2 = math.sqrt(2.0)
_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(8)


@dataclass(frozen=True)
class Architecture:
    n_in: int
    n_hidden: int

    def __post_init__(self):
        for name in ("n_in", "n_hidden"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool) or v < 1:
                raise UsageError(f"{name} must be a positive integer, got {v!r}")
        object.__setattr__(self, "n_in", int(self.n_in))
        object.__setattr__(self, "n_hidden", int(self.n_hidden))

    @property
    def n_params(self) -> int:
        return (self.n_in + 1) * self.n_hidden

    @property
    def n_w1(self) -> int:
        return self.n_in * self.n_hidden


# ---------------------------------------------------------------------------
# Activations
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Linear:
    name = "linear"

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        return x, np.ones_like(x), np.zeros_like(x)

    def diff(self, new, old):
        return new - old

    def to_dict(self):
        return {"kind": "linear"}


@dataclass(frozen=True)
class Quadratic:
    """g(x) = x + eps * x**2."""

    eps: float = 1.0
    name = "quadratic"

    def __post_init__(self):
        if not math.isfinite(self.eps):
            raise UsageError("eps must be finite")

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        return x + self.eps * x * x, 1.0 + 2.0 * self.eps * x, np.full_like(x, 2.0 * self.eps)

    def diff(self, new, old):
        # exact factorisation avoids cancellation near the optimum
        d = new - old
        return d * (1.0 + self.eps * (new + old))

    def to_dict(self):
        return {"kind": "quadratic", "eps": self.eps}


@dataclass(frozen=True)
class Erf:
    """g(x) = erf(x / sqrt(2))."""

    name = "erf"

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        g1 = _SQRT_2_OVER_PI * np.exp(-0.5 * x * x)
        return erf(x / _SQRT2), g1, -x * g1

    def diff(self, new, old):
        new, old = np.broadcast_arrays(np.asarray(new, dtype=float), np.asarray(old, dtype=float))
        a = old / _SQRT2
        b = new / _SQRT2
        # short intervals: integrate the density; the width comes from new - old
        # before scaling, which is exact for nearby arguments
        half = (new - old) / (2.0 * _SQRT2)
        mid = (new + old) / (2.0 * _SQRT2)
        nodes, weights = _GL_NODES, _GL_WEIGHTS
        t = mid[..., None] + half[..., None] * nodes
        quad = half * (np.exp(-t * t) @ weights) * (2.0 / math.sqrt(math.pi))
        # wide intervals: the tails go through erfc
        pos = (a > 0) & (b > 0)
        neg = (a < 0) & (b < 0)
        wide = np.where(pos, erfc(a) - erfc(b), np.where(neg, erfc(-b) - erfc(-a), erf(b) - erf(a)))
        return np.where(np.abs(b - a) < 0.5, quad, wide)

    def to_dict(self):
        return {"kind": "erf"}


@dataclass(frozen=True)
class Polynomial:
    """g(x) = sum_k coeffs[k] * x**(k+1); no constant term."""

    coeffs: tuple = (1.0,)
    name = "poly"

    def __post_init__(self):
        c = tuple(float(v) for v in self.coeffs)
        if not c:
            raise UsageError("polynomial needs at least one coefficient")
        if not all(math.isfinite(v) for v in c):
            raise UsageError("polynomial coefficients must be finite")
        object.__setattr__(self, "coeffs", c)

    @property
    def degree(self) -> int:
        nz = [k for k, c in enumerate(self.coeffs) if c != 0.0]
        return nz[-1] + 1 if nz else 0

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        g = np.zeros_like(x)
        g1 = np.zeros_like(x)
        g2 = np.zeros_like(x)
        # Horner on value and both derivatives
        for k in range(len(self.coeffs), 0, -1):
            c = self.coeffs[k - 1]
            g2 = g2 * x + 2.0 * g1
            g1 = g1 * x + g
            g = g * x + c
        # shift by one power of x (no constant term)
        return g * x, g1 * x + g, g2 * x + 2.0 * g1

    def diff(self, new, old):
        new = np.asarray(new, dtype=float)
        old = np.asarray(old, dtype=float)
        d = new - old
        # a^j - b^j = (a - b) * sum_{i<j} a^i b^(j-1-i)
        total = np.zeros_like(d)
        pw = np.ones_like(d)  # running sum for the current power
        na = np.ones_like(new)
        for c in self.coeffs:
            total += c * pw
            na = na * new
            pw = pw * old + na
        return d * total

    def to_dict(self):
        return {"kind": "poly", "coeffs": list(self.coeffs)}


Activation = Union[Linear, Quadratic, Erf, Polynomial]


def activation_eval(kind: Activation, x):
    """Value, first and second derivative of the activation at ``x``."""
    return kind(x)


def activation_from_dict(d: Any) -> Activation:
    if isinstance(d, str):
        d = {"kind": d}
    if not isinstance(d, dict) or "kind" not in d:
        raise UsageError(f"cannot parse activation {d!r}")
    kind = d["kind"]
    if kind == "linear":
        return Linear()
    if kind == "quadratic":
        return Quadratic(float(d.get("eps", 1.0)))
    if kind == "erf":
        return Erf()
    if kind in ("poly", "polynomial"):
        return Polynomial(tuple(d.get("coeffs", (1.0,))))
    raise UsageError(f"unknown activation kind {kind!r}")


# ---------------------------------------------------------------------------
# Networks
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class TwoLayerNet:
    arch: Architecture
    w1: np.ndarray
    w2: np.ndarray
    activation: Activation = field(default_factory=Linear)

    def __post_init__(self):
        w1 = np.array(self.w1, dtype=float)
        w2 = np.array(self.w2, dtype=float).reshape(-1)
        if w1.shape != (self.arch.n_hidden, self.arch.n_in):
            raise UsageError(f"w1 has shape {w1.shape}, expected {(self.arch.n_hidden, self.arch.n_in)}")
        if w2.shape != (self.arch.n_hidden,):
            raise UsageError(f"w2 has {w2.size} entries, expected {self.arch.n_hidden}")
        if not (np.all(np.isfinite(w1)) and np.all(np.isfinite(w2))):
            raise UsageError("network weights must be finite")
        w1.flags.writeable = False
        w2.flags.writeable = False
        object.__setattr__(self, "w1", w1)
        object.__setattr__(self, "w2", w2)

    @classmethod
    def from_weights(cls, w1, w2, activation: Activation | None = None) -> "TwoLayerNet":
        w1 = np.atleast_2d(np.asarray(w1, dtype=float))
        arch = Architecture(w1.shape[1], w1.shape[0])
        return cls(arch, w1, w2, activation if activation is not None else Linear())

    @property
    def params(self) -> np.ndarray:
        return np.concatenate([self.w1.ravel(), self.w2])

    def with_params(self, theta) -> "TwoLayerNet":
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.arch.n_params,):
            raise UsageError(f"expected {self.arch.n_params} parameters, got shape {theta.shape}")
        k = self.arch.n_w1
        return TwoLayerNet(self.arch, theta[:k].reshape(self.w1.shape), theta[k:], self.activation)

    def with_activation(self, activation: Activation) -> "TwoLayerNet":
        return TwoLayerNet(self.arch, self.w1, self.w2, activation)

    def to_dict(self) -> dict:
        return {
            "n_in": self.arch.n_in,
            "n_hidden": self.arch.n_hidden,
            "activation": self.activation.to_dict(),
            "w1": self.w1.ravel().tolist(),
            "w2": self.w2.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TwoLayerNet":
        try:
            arch = Architecture(int(d["n_in"]), int(d["n_hidden"]))
            w1 = np.asarray(d["w1"], dtype=float).reshape(arch.n_hidden, arch.n_in)
            w2 = np.asarray(d["w2"], dtype=float)
        except (KeyError, ValueError, TypeError) as exc:
            raise UsageError(f"malformed network JSON: {exc}") from exc
        return cls(arch, w1, w2, activation_from_dict(d.get("activation", "linear")))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "TwoLayerNet":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise UsageError(f"malformed network JSON: {exc}") from exc
        return cls.from_dict(d)


def forward(net: TwoLayerNet, x):
    """Returns ``(y, z, h)`` for one input vector or a batch of rows."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != net.arch.n_in:
        raise UsageError(f"input has trailing dimension {x.shape[-1]}, expected {net.arch.n_in}")
    z = x @ net.w1.T
    h = net.activation(z)[0]
    return h @ net.w2, z, h


def output_gradients(net: TwoLayerNet, x: np.ndarray) -> np.ndarray:
    """Per-sample gradient of the network output w.r.t. the flattened parameters.

    Shape ``(M, D)`` for ``x`` of shape ``(M, n_in)``.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    z = x @ net.w1.T
    h, g1, _ = net.activation(z)
    m = x.shape[0]
    dw1 = (g1 * net.w2)[:, :, None] * x[:, None, :]
    return np.concatenate([dw1.reshape(m, -1), h], axis=1)


# ---------------------------------------------------------------------------
# Teacher sampling
# ---------------------------------------------------------------------------

class WeightDistribution(str, enum.Enum):
    GAUSSIAN = "gaussian"
    UNIFORM = "uniform"
    RADEMACHER = "rademacher"

    def sample(self, rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
        """Zero-mean draws with variance exactly ``1 / fan_in``."""
        scale = 1.0 / math.sqrt(fan_in)
        if self is WeightDistribution.GAUSSIAN:
            return rng.normal(0.0, scale, size=shape)
        if self is WeightDistribution.UNIFORM:
            a = math.sqrt(3.0) * scale
            return rng.uniform(-a, a, size=shape)
        return np.where(rng.random(size=shape) < 0.5, -scale, scale)


def sample_teacher(
    arch: Architecture,
    kind: Activation | None = None,
    dist: WeightDistribution | str = WeightDistribution.GAUSSIAN,
    seed: int = 0,
    index: int = 0,
) -> TwoLayerNet:
    """Random teacher; W1 entries have variance 1/n_in, W2 entries 1/n_hidden.

    ``index`` selects a member of an ensemble sharing ``seed``.
    """
    dist = WeightDistribution(dist)
    rng = rng_for(seed, "teacher", index)
    w1 = dist.sample(rng, (arch.n_hidden, arch.n_in), arch.n_in)
    w2 = dist.sample(rng, (arch.n_hidden,), arch.n_hidden)
    return TwoLayerNet(arch, w1, w2, kind if kind is not None else Linear())
