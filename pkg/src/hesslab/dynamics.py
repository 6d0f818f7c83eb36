"""Learning dynamics of a student started close to its teacher.

The student is stored as ``teacher + delta`` throughout, so residuals and
losses near the optimum are computed from ``delta`` directly instead of as the
difference of two nearly equal outputs.
"""

from __future__ import annotations

import io
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import DivergenceError, UsageError
from .net import Linear, TwoLayerNet
from .seeding import rng_for
from .spectral import Spectrum

HELDOUT_SIZE = 10_000
DIVERGENCE_FACTOR = 1e6


@dataclass(frozen=True, eq=False)
class LossTrajectory:
    times: np.ndarray
    losses: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        loss = np.asarray(self.losses, dtype=float)
        if t.shape != loss.shape or t.ndim != 1:
            raise UsageError("times and losses must be 1-D of equal length")
        if not np.all(np.isfinite(loss)):
            raise UsageError("losses must be finite")
        if np.any(np.diff(t) < 0):
            raise UsageError("times must be ascending")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "losses", loss)

    def to_csv(self, column: str = "loss") -> str:
        buf = io.StringIO()
        buf.write(f"t,{column}\n")
        for t, v in zip(self.times.tolist(), self.losses.tolist()):
            buf.write(f"{t!r},{v!r}\n")
        return buf.getvalue()


# ---------------------------------------------------------------------------
# Student state
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Student:
    """A network written as teacher weights plus an offset."""

    teacher: TwoLayerNet
    d1: np.ndarray
    d2: np.ndarray

    @property
    def net(self) -> TwoLayerNet:
        t = self.teacher
        return TwoLayerNet(t.arch, t.w1 + self.d1, t.w2 + self.d2, t.activation)

    @property
    def delta(self) -> np.ndarray:
        return np.concatenate([self.d1.ravel(), self.d2])


def perturb(teacher: TwoLayerNet, sigma0: float, seed: int = 0) -> Student:
    """Teacher plus iid ``N(0, sigma0^2)`` noise on every parameter."""
    if not sigma0 > 0:
        raise UsageError("sigma0 must be positive")
    rng = rng_for(seed, "perturb", 0)
    d = rng.normal(0.0, sigma0, teacher.arch.n_params)
    k = teacher.arch.n_w1
    return Student(teacher, d[:k].reshape(teacher.w1.shape), d[k:])


def _residual(teacher: TwoLayerNet, d1, d2, x):
    """Student minus teacher output, plus the student's hidden pre-activations."""
    act = teacher.activation
    z0 = x @ teacher.w1.T
    zs = z0 + x @ d1.T
    hs, g1, _ = act(zs)
    r = act.diff(zs, z0) @ teacher.w2 + hs @ d2
    return r, hs, g1


def exact_linear_loss(teacher: TwoLayerNet, d1, d2) -> float:
    """Generalization error of a linear student, ``0.5 |W2 W1 - W2* W1*|^2``."""
    diff = d2 @ teacher.w1 + teacher.w2 @ d1 + d2 @ d1
    return 0.5 * float(diff @ diff)


def _exact_linear_grad(teacher: TwoLayerNet, d1, d2):
    diff = d2 @ teacher.w1 + teacher.w2 @ d1 + d2 @ d1
    w1s = teacher.w1 + d1
    w2s = teacher.w2 + d2
    return np.outer(w2s, diff), w1s @ diff


class _Evaluator:
    def __init__(self, teacher: TwoLayerNet, seed: int, exact: bool):
        self.teacher = teacher
        self.exact = exact
        if not exact:
            self.x = rng_for(seed, "heldout", 0).standard_normal((HELDOUT_SIZE, teacher.arch.n_in))

    def __call__(self, d1, d2) -> float:
        if self.exact:
            return exact_linear_loss(self.teacher, d1, d2)
        r = _residual(self.teacher, d1, d2, self.x)[0]
        return 0.5 * float(np.mean(r * r))


def sgd_train(
    student: Student,
    lr: float,
    batch: int | None = 512,
    steps: int = 1000,
    record_every: int = 1,
    seed: int = 0,
    *,
    exact_loss: bool | None = None,
    lambda_max: float | None = None,
) -> LossTrajectory:
    """Plain SGD on the minibatch MSE with fresh Gaussian inputs every step.

    ``batch=None`` uses the exact population gradient (linear nets only), i.e.
    full-batch gradient descent on the generalization error.  The loss is
    recorded every ``record_every`` steps, against time ``step * lr``; linear
    students are scored with the exact generalization error unless
    ``exact_loss=False``, others on a fixed held-out batch of 10^4 inputs.
    """
    teacher = student.teacher
    linear = isinstance(teacher.activation, Linear)
    if not lr > 0:
        raise UsageError("lr must be positive")
    if steps < 0 or record_every < 1:
        raise UsageError("steps must be >= 0 and record_every >= 1")
    if batch is None and not linear:
        raise UsageError("exact gradients (batch=None) are only available for linear nets")
    if batch is not None and batch < 1:
        raise UsageError("batch must be positive")
    if exact_loss is None:
        exact_loss = linear
    if exact_loss and not linear:
        raise UsageError("exact loss is only available for linear nets")
    if lambda_max is not None and lr >= 1.0 / lambda_max:
        warnings.warn(f"lr={lr:g} >= 1/lambda_max={1.0 / lambda_max:g}; SGD may be unstable", RuntimeWarning,
                      stacklevel=2)

    evaluate = _Evaluator(teacher, seed, exact_loss)
    rng = rng_for(seed, "sgd", 0)
    d1 = np.array(student.d1, dtype=float)
    d2 = np.array(student.d2, dtype=float)
    w2 = teacher.w2
    ni = teacher.arch.n_in

    l0 = evaluate(d1, d2)
    times, losses = [0.0], [l0]
    limit = DIVERGENCE_FACTOR * l0
    for step in range(1, steps + 1):
        if batch is None:
            g1, g2 = _exact_linear_grad(teacher, d1, d2)
        else:
            x = rng.standard_normal((batch, ni))
            r, hs, gp = _residual(teacher, d1, d2, x)
            g2 = hs.T @ r / batch
            g1 = ((r[:, None] * gp) * (w2 + d2)).T @ x / batch
        d1 -= lr * g1
        d2 -= lr * g2
        if step % record_every == 0 or step == steps:
            loss = evaluate(d1, d2)
            if not math.isfinite(loss) or (l0 > 0 and loss > limit):
                raise DivergenceError(
                    f"loss {loss:.3g} at step {step} exceeds {DIVERGENCE_FACTOR:g} x initial loss {l0:.3g}; "
                    f"lr={lr:g} is probably above the stability limit 1/lambda_max"
                )
            times.append(step * lr)
            losses.append(loss)
    meta = {"lr": lr, "batch": batch, "steps": steps, "seed": seed, "exact_loss": exact_loss}
    return LossTrajectory(np.array(times), np.array(losses), meta)


# ---------------------------------------------------------------------------
# Prediction and fitting
# ---------------------------------------------------------------------------

def predicted_loss_curve(spectrum: Spectrum | np.ndarray, sigma0: float, times, tau_rel: float = 1e-8) -> np.ndarray:
    """Ensemble-mean loss ``(sigma0^2 / 2) sum_i lam_i exp(-2 lam_i t)``."""
    lam = spectrum.eigenvalues if isinstance(spectrum, Spectrum) else np.asarray(spectrum, dtype=float)
    lam = lam.ravel()
    t = np.asarray(times, dtype=float)
    if lam.size == 0:
        return np.zeros_like(t)
    floor = -tau_rel * max(float(np.max(np.abs(lam))), np.finfo(float).tiny)
    if np.any(lam < floor):
        raise UsageError(f"spectrum has a negative eigenvalue {lam.min():.3g} beyond tolerance")
    lam = np.clip(lam, 0.0, None)
    return 0.5 * sigma0 ** 2 * (np.exp(-2.0 * np.outer(t, lam)) @ lam)


def noise_floor_index(losses, threshold: float = 0.3) -> int:
    """Index of the first record where the decay stops being smooth.

    A clean trajectory decays geometrically between records, so the ratio of
    successive loss ratios stays near 1.  The first record where it moves by
    more than ``threshold`` (or the loss stops being positive) marks the floor.
    Returns ``len(losses)`` when no floor is reached.
    """
    loss = np.asarray(losses, dtype=float)
    for i in range(loss.size):
        if loss[i] <= 0:
            return i
    if loss.size < 3:
        return loss.size
    ratio = loss[1:] / loss[:-1]
    second = ratio[1:] / ratio[:-1]
    bad = np.flatnonzero(np.abs(second - 1.0) > threshold)
    return int(bad[0]) + 1 if bad.size else loss.size


def noise_floor(traj: LossTrajectory, threshold: float = 0.3) -> float:
    """Typical loss once the trajectory has flattened out (0 if it never does)."""
    i = noise_floor_index(traj.losses, threshold)
    if i >= traj.losses.size:
        return 0.0
    return float(np.median(traj.losses[i:]))


def fit_tail_rate(traj: LossTrajectory, window_frac: float = 0.25, detect_floor: bool = True) -> tuple[float, float]:
    """Least-squares line through ``(t, log L)`` over the final ``window_frac``
    of the records (before the noise floor when ``detect_floor``).

    Returns ``(rate, amplitude)`` with ``L ~ amplitude * exp(-rate t)``.
    """
    if not (0.0 < window_frac <= 0.5):
        raise UsageError("window_frac must lie in (0, 0.5]")
    end = noise_floor_index(traj.losses) if detect_floor else traj.losses.size
    n = max(2, int(round(window_frac * end)))
    if end < 2:
        raise UsageError("no usable records before the noise floor; shorten the run or lower the floor threshold")
    t = traj.times[end - n:end]
    loss = traj.losses[end - n:end]
    if np.any(loss <= 0):
        raise UsageError("non-positive losses in the fit window; shrink the window or stop before the noise floor")
    slope, intercept = np.polyfit(t, np.log(loss), 1)
    return float(-slope), float(math.exp(intercept))


# ---------------------------------------------------------------------------
# Ensembles
# ---------------------------------------------------------------------------

def ensemble_trajectories(
    teacher: TwoLayerNet,
    sigma0: float,
    lr: float,
    batch: int | None,
    steps: int,
    seeds,
    record_every: int = 1,
    threads: int | None = None,
    **kwargs,
) -> list[LossTrajectory]:
    """One trajectory per seed; seed ``s`` drives both the perturbation and the SGD stream."""
    def run(s):
        return sgd_train(perturb(teacher, sigma0, s), lr, batch, steps, record_every, s, **kwargs)

    seeds = list(seeds)
    if threads == 1:
        return [run(s) for s in seeds]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(run, seeds))


def mean_trajectory(trajs: list[LossTrajectory]) -> LossTrajectory:
    if not trajs:
        raise UsageError("empty ensemble")
    t = trajs[0].times
    for tr in trajs[1:]:
        if tr.times.shape != t.shape or not np.allclose(tr.times, t):
            raise UsageError("trajectories are recorded on different time grids")
    meta = dict(trajs[0].meta)
    meta["ensemble"] = len(trajs)
    meta.pop("seed", None)
    return LossTrajectory(t, np.mean([tr.losses for tr in trajs], axis=0), meta)
