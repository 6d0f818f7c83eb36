"""Experiment pipelines shared by the command line and the acceptance suite.

Each runner returns ``(report, files)``: a JSON-serialisable report and a
mapping of output file names to their text.  Nothing is written here.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import __version__
from .dynamics import (ensemble_trajectories, fit_tail_rate, mean_trajectory, noise_floor,
                       predicted_loss_curve)
from .empirical import outer_product_hessian_mc, validation_report
from .errors import UsageError
from .hessian import analytic_hessian
from .net import Activation, Architecture, Linear, Polynomial, TwoLayerNet, sample_teacher
from .spectral import eig_sym, ecdf, ks_distance, numerical_rank, spectral_histogram
from .theory import (chi2_cluster_fraction, chi2_scaled, convolution_spectrum, effective_params,
                     linear_spectrum_prediction, mp_scaled, verify_block_eigenstructure)

HEADER = f"# hesslab {__version__}\n"
THEORY_DRAWS = 1_000_000


def csv_text(body: str) -> str:
    return HEADER + body


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _pmap(fn, items, threads: int | None):
    items = list(items)
    if threads == 1 or len(items) <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=threads or os.cpu_count()) as pool:
        return list(pool.map(fn, items))


def hessian_for(net: TwoLayerNet, mc_samples: int, seed: int):
    """Analytic Hessian where one exists, Monte-Carlo estimate otherwise."""
    if isinstance(net.activation, Polynomial):
        return outer_product_hessian_mc(net, mc_samples, seed).mean
    return analytic_hessian(net)


@dataclass(frozen=True)
class TeacherSpectrum:
    eigenvalues: np.ndarray
    rank: int
    tol: float
    lambda2: float

    @property
    def nonzero(self) -> np.ndarray:
        return self.eigenvalues[self.eigenvalues > self.tol]


def ensemble_spectra(activation: Activation, arch: Architecture, ensemble: int, seed: int,
                     weight_dist: str = "gaussian", tau_rel: float = 1e-8, mc_samples: int = 100_000,
                     threads: int | None = None) -> list[TeacherSpectrum]:
    def one(i):
        t = sample_teacher(arch, activation, weight_dist, seed, i)
        s = eig_sym(hessian_for(t, mc_samples, seed + i), tau_rel)
        return TeacherSpectrum(s.eigenvalues, s.rank, s.tol_used, float(t.w2 @ t.w2))

    return _pmap(one, range(ensemble), threads)


# ---------------------------------------------------------------------------
# spectrum
# ---------------------------------------------------------------------------

def spectrum_experiment(activation: Activation, arch: Architecture, ensemble: int, seed: int,
                        weight_dist: str = "gaussian", tau_rel: float = 1e-8, ks_max: float = 0.05,
                        mc_samples: int = 100_000, threads: int | None = None,
                        theory_draws: int = THEORY_DRAWS):
    spectra = ensemble_spectra(activation, arch, ensemble, seed, weight_dist, tau_rel, mc_samples, threads)
    pooled = np.sort(np.concatenate([s.nonzero for s in spectra]))
    all_eigs = np.concatenate([s.eigenvalues for s in spectra])
    hist = spectral_histogram(pooled)
    files = {
        "eigenvalues.csv": csv_text("lambda\n" + "".join(f"{v!r}\n" for v in all_eigs.tolist())),
        "density.csv": csv_text(hist.to_csv()),
    }
    report = {
        "activation": activation.to_dict(),
        "arch": {"n_in": arch.n_in, "n_hidden": arch.n_hidden},
        "ensemble": ensemble,
        "weight_dist": weight_dist,
        "n_nonzero": int(pooled.size),
        "ranks": sorted({s.rank for s in spectra}),
        "median_nonzero": float(np.median(pooled)) if pooled.size else None,
        "median_lambda_max": float(np.median([s.eigenvalues[-1] for s in spectra])),
    }
    if isinstance(activation, Linear):
        pred = linear_spectrum_prediction(arch.n_in, arch.n_hidden)
        draws = pred.sample(theory_draws, seed)
        ks_sampler = ks_distance(pooled, ecdf(draws))
        ks_cdf = ks_distance(pooled, pred.cdf)
        grid = np.linspace(0.0, max(float(pooled.max()), float(np.quantile(draws, 0.999))), 400)
        files["theory_overlay.csv"] = csv_text(
            "x,pdf\n" + "".join(f"{x!r},{p!r}\n" for x, p in zip(grid.tolist(), pred.pdf(grid).tolist())))
        report.update({
            "theory": pred.kind,
            "theory_draws": theory_draws,
            "ks": ks_sampler,
            "ks_cdf": ks_cdf,
            "ks_max": ks_max,
            "pass": bool(ks_sampler < ks_max),
        })
        if arch.n_in > arch.n_hidden:
            report["chi2_cluster_fraction"] = chi2_cluster_fraction(
                [s.nonzero for s in spectra], [s.lambda2 for s in spectra], arch.n_in, arch.n_hidden)
            report["chi2_weight_predicted"] = (arch.n_in - arch.n_hidden) / arch.n_in
    files["ks_report.json"] = dump_json(report)
    return report, files


# ---------------------------------------------------------------------------
# rank-scan
# ---------------------------------------------------------------------------

def rank_scan(activation: Activation, n_in_values, n_hidden_values, seeds, tau_rel: float = 1e-8,
              weight_dist: str = "gaussian", mc_samples: int = 100_000, threads: int | None = None):
    cells = [(ni, nh, s) for ni in n_in_values for nh in n_hidden_values for s in seeds]

    def one(cell):
        ni, nh, s = cell
        arch = Architecture(ni, nh)
        t = sample_teacher(arch, activation, weight_dist, s, 0)
        r = numerical_rank(eig_sym(hessian_for(t, mc_samples, s), tau_rel), tau_rel)
        return effective_params(activation, arch, r)

    reps = _pmap(one, cells, threads)
    rows = [{"n_in": c[0], "n_hidden": c[1], "seed": c[2], "rank": r.rank_observed,
             "n_eff_predicted": r.n_eff_predicted, "match": bool(r.match)} for c, r in zip(cells, reps)]
    body = "n_in,n_hidden,rank,n_eff_predicted,match\n" + "".join(
        f"{r['n_in']},{r['n_hidden']},{r['rank']},{r['n_eff_predicted']},{str(r['match']).lower()}\n" for r in rows)
    report = {
        "activation": activation.to_dict(),
        "cells": len(rows),
        "mismatches": [r for r in rows if not r["match"]],
        "pass": all(r["match"] for r in rows),
    }
    return report, {"rank_scan.csv": csv_text(body), "rank_report.json": dump_json(report)}


# ---------------------------------------------------------------------------
# dynamics
# ---------------------------------------------------------------------------

def dynamics_experiment(activation: Activation, arch: Architecture, seed: int, sigma0: float = 1e-2,
                        lr: float | None = None, lr_frac: float = 0.05, batch: int | None = 512,
                        steps: int | None = None, t_max: float = 10.0, ensemble: int = 50,
                        record_every: int = 1, weight_dist: str = "gaussian", tau_rel: float = 1e-8,
                        window_frac: float = 0.25, threads: int | None = None):
    teacher = sample_teacher(arch, activation, weight_dist, seed, 0)
    spec = eig_sym(analytic_hessian(teacher), tau_rel)
    lam_min = float(spec.nonzero().min())
    lam_max = spec.lambda_max
    if lr is None:
        lr = lr_frac / lam_max
    if steps is None:
        steps = int(np.ceil(t_max / lr))
    trajs = ensemble_trajectories(teacher, sigma0, lr, batch, steps, range(seed, seed + ensemble),
                                  record_every, threads, lambda_max=lam_max)
    mean = mean_trajectory(trajs)
    pred = predicted_loss_curve(spec, sigma0, mean.times, tau_rel)
    rate, amp = fit_tail_rate(mean, window_frac)
    per_run = [fit_tail_rate(t, window_frac)[0] for t in trajs]
    floor = noise_floor(mean)
    ok = mean.losses > 10.0 * floor
    rel = np.abs(mean.losses - pred) / pred
    two_lmin = 2.0 * lam_min
    report = {
        "activation": activation.to_dict(),
        "arch": {"n_in": arch.n_in, "n_hidden": arch.n_hidden},
        "sigma0": sigma0, "lr": lr, "batch": batch, "steps": steps, "ensemble": ensemble,
        "lambda_max": lam_max,
        "rate": rate,
        "amplitude": amp,
        "two_lambda_min": two_lmin,
        "rel_err": abs(rate - two_lmin) / two_lmin,
        "per_run_rate_mean": float(np.mean(per_run)),
        "per_run_rate_sd": float(np.std(per_run)),
        "noise_floor": floor,
        "max_rel_dev_vs_prediction": float(rel[ok].max()) if ok.any() else None,
    }
    files = {
        "trajectory.csv": csv_text(mean.to_csv()),
        "predicted.csv": csv_text("t,loss_pred\n" + "".join(
            f"{t!r},{v!r}\n" for t, v in zip(mean.times.tolist(), pred.tolist()))),
        "fit_report.json": dump_json({k: report[k] for k in ("rate", "two_lambda_min", "rel_err")}),
        "dynamics_report.json": dump_json(report),
    }
    return report, files


# ---------------------------------------------------------------------------
# verify
# ---------------------------------------------------------------------------

def verify_experiment(activation: Activation, arch: Architecture, seed: int, mc_samples: int = 1_000_000,
                      weight_dist: str = "gaussian"):
    teacher = sample_teacher(arch, activation, weight_dist, seed, 0)
    est = outer_product_hessian_mc(teacher, mc_samples, seed)
    rep = validation_report(analytic_hessian(teacher), est, teacher)
    verdict = rep["verdict"] == "pass"
    if isinstance(activation, Linear):
        eig = verify_block_eigenstructure(teacher)
        rep["eigenstructure"] = eig.to_dict()
        eig_ok = eig.max_residual < 1e-10 and eig.n_independent == arch.n_in and eig.eig_sym_rel_err < 1e-9
        rep["eigenstructure"]["verdict"] = "pass" if eig_ok else "fail"
        verdict = verdict and eig_ok
    rep["overall"] = "pass" if verdict else "fail"
    return rep, {"verdict.json": dump_json(rep)}


# ---------------------------------------------------------------------------
# theory-curve
# ---------------------------------------------------------------------------

def theory_curves(arch: Architecture, points: int = 400):
    curves = {
        "chi2": chi2_scaled(arch.n_hidden),
        "mp": mp_scaled(arch.n_in, arch.n_hidden),
        "convolution": convolution_spectrum(arch.n_in, arch.n_hidden),
    }
    if arch.n_in > arch.n_hidden:
        curves["mixture"] = linear_spectrum_prediction(arch.n_in, arch.n_hidden)
    hi = curves["mp"].support[1] + 3.0
    x = np.linspace(0.0, hi, points)
    files = {}
    for name, dist in curves.items():
        y = np.nan_to_num(dist.pdf(x), posinf=0.0)
        files[f"pdf_{name}.csv"] = csv_text("x,pdf\n" + "".join(f"{a!r},{b!r}\n" for a, b in zip(x.tolist(), y.tolist())))
    return {"arch": {"n_in": arch.n_in, "n_hidden": arch.n_hidden}, "curves": sorted(files)}, files


def check_config(config: dict) -> None:
    """Reject obviously bad numeric fields before any work is done."""
    for key in ("ensemble", "mc_samples", "steps", "batch", "threads"):
        v = config.get(key)
        if v is not None and (not isinstance(v, int) or isinstance(v, bool) or v < 1):
            raise UsageError(f"{key} must be a positive integer, got {v!r}")
    for key in ("sigma0", "lr", "tau_rel", "ks_max"):
        v = config.get(key)
        if v is not None and (not isinstance(v, (int, float)) or isinstance(v, bool) or not v > 0):
            raise UsageError(f"{key} must be a positive number, got {v!r}")
