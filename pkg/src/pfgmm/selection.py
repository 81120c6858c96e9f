"""Regularisation-level selection: BIC for likelihood fits, ExBIC for GMM fits."""

from __future__ import annotations

import math

import numpy as np

from .baselines import fit_mple
from .data import CovStructure, InvalidParameterError, ModelParams, log_likelihood
from .estimator import fit_pfgmm

# log-spaced grid bracketing the noise level of the benchmark design
DEFAULT_BIC_GRID = tuple(float(x) for x in np.geomspace(0.02, 2.0, 16))
DEFAULT_EXBIC_GRID = (0.05, 0.1, 0.2)


def bic(ds, fit, dim_lambda=1, cov=None):
    """-2 l_n(beta, eta) + (|S| + dim_lambda) log n.

    dim_lambda counts tuning parameters; the conventional (and default)
    choice here is 1.
    """
    if fit.eta is None:
        raise InvalidParameterError("BIC needs variance estimates on the fit")
    theta, sigma2 = fit.eta
    cov = cov or CovStructure.diagonal(ds.q)
    params = ModelParams(beta=fit.beta, theta=theta, sigma2=float(sigma2), cov=cov)
    ll = log_likelihood(ds, params)
    return -2.0 * ll + (len(fit.active_set) + dim_lambda) * math.log(ds.n)


def exbic(ds, fit):
    """-2 L(beta) + |S| log n using the fit's GMM loss value."""
    if fit.loss is None:
        raise InvalidParameterError("ExBIC needs the GMM loss on the fit")
    return -2.0 * fit.loss + len(fit.active_set) * math.log(ds.n)


def mple_bic_path(ds, pen_base, grid=None, opts=None, cov=None, dim_lambda=1):
    """Fit the penalized-likelihood path over a lambda grid, pick min BIC.

    The path is traversed from the sparsest (largest lambda) end with warm
    starts.  Returns (best_fit, records); each record is a dict with the
    lambda, the criterion and the support size.
    """
    grid = tuple(grid) if grid else DEFAULT_BIC_GRID
    if any(g <= 0 for g in grid):
        raise InvalidParameterError("lambda grid must be positive")
    records = []
    best = None
    beta0 = None
    eta0 = None
    for lam in sorted(grid, reverse=True):
        fit = fit_mple(ds, pen_base.with_lam(lam), opts=opts, cov=cov,
                       beta0=beta0, eta0=eta0)
        beta0, eta0 = fit.beta, fit.eta
        crit = bic(ds, fit, dim_lambda=dim_lambda, cov=cov)
        records.append({"lambda": lam, "criterion": crit,
                        "support": len(fit.active_set)})
        if best is None or crit < best[0]:
            best = (crit, fit)
    return best[1], records


def pfgmm_exbic_path(ds, pen_base, grid=None, opts=None, proxy=None,
                     inst_source="sieve", W=None):
    """Focused-GMM path over a lambda grid, pick the minimum ExBIC fit."""
    grid = tuple(grid) if grid else DEFAULT_EXBIC_GRID
    if any(g <= 0 for g in grid):
        raise InvalidParameterError("lambda grid must be positive")
    records = []
    best = None
    for lam in sorted(grid, reverse=True):
        fit = fit_pfgmm(ds, pen_base.with_lam(lam), proxy=proxy,
                        inst_source=inst_source, opts=opts, W=W)
        crit = exbic(ds, fit)
        records.append({"lambda": lam, "criterion": crit,
                        "support": len(fit.active_set)})
        if best is None or crit < best[0]:
            best = (crit, fit)
    return best[1], records
