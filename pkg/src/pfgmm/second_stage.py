"""Post-selection estimation: variance components by ML/REML, BLUP, PE.

The variance-model likelihood for residuals r_i ~ N(0, Z_i Psi Z_i' + s2 I)
is evaluated from per-group sufficient statistics (Z'Z, Z'r, r'r), reduced
to q x q operations via the Woodbury identity and batched across groups.
The same core drives the residual-model fit, the reduced-model joint ML and
the REML variant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from .data import (
    ActiveSet,
    CovStructure,
    DimensionError,
    GroupedDataset,
    scaled_cov_blocks,
)

VAR_FLOOR = 1e-10
VAR_CEIL = 1e8
_LOG2PI = math.log(2.0 * math.pi)


class RankDeficiencyError(RuntimeError):
    """Selected design is rank deficient (or a sandwich matrix is singular)."""


@dataclass(frozen=True)
class EtaEstimate:
    """Variance-parameter estimate; unpacks as (theta, sigma2)."""

    theta: np.ndarray
    sigma2: float
    loglik: float
    converged: bool
    grad_norm: float
    n_iter: int

    def __iter__(self):
        return iter((self.theta, self.sigma2))


@dataclass(frozen=True)
class ReducedFit:
    """Joint fit on the reduced model; unpacks as (beta_S, theta, sigma2)."""

    beta_S: np.ndarray
    theta: np.ndarray
    sigma2: float
    loglik: float
    converged: bool
    n_iter: int

    def __iter__(self):
        return iter((self.beta_S, self.theta, self.sigma2))


@dataclass(frozen=True)
class ReducedModel:
    """Dataset restricted to the selected columns, keeping the index map."""

    ds: GroupedDataset
    support: ActiveSet

    @classmethod
    def from_dataset(cls, ds, support):
        pos = support.positions
        if len(pos) >= ds.n:
            raise RankDeficiencyError(
                f"selected {len(pos)} columns with only {ds.n} observations"
            )
        if np.any(pos >= ds.p):
            raise DimensionError("active set exceeds column count")
        X_S = ds.X[:, pos]
        if len(pos) and np.linalg.matrix_rank(X_S) < len(pos):
            raise RankDeficiencyError("selected design is rank deficient")
        reduced = GroupedDataset(
            y=ds.y,
            X=X_S,
            Z=ds.Z,
            group_sizes=ds.group_sizes,
            group_ids=ds.group_ids,
        )
        return cls(ds=reduced, support=support)


# ---------------------------------------------------------------------------
# Batched variance-model core
# ---------------------------------------------------------------------------


class VarianceProblem:
    """Sufficient statistics for N(0, Z Psi Z' + s2 I) likelihoods.

    Holds Z'Z per group; optional design stats enable GLS steps and the
    REML determinant correction.  Residual statistics (Z'r, r'r) are passed
    per evaluation so the same object serves alternating beta updates.
    """

    def __init__(self, ds, cov=None, X=None):
        self.cov = cov or CovStructure.diagonal(ds.q)
        if self.cov.q != ds.q:
            raise DimensionError("covariance structure does not match q")
        self.q = ds.q
        self.sizes = ds.group_sizes.astype(float)
        self.n = float(ds.n)
        slices = ds.group_slices
        self.M = np.stack(
            [ds.Z[sl].T @ ds.Z[sl] for sl in slices]
        ) if ds.q else np.zeros((ds.n_groups, 0, 0))
        self._slices = slices
        self._Z = ds.Z
        self.X = X
        if X is not None:
            self.P = np.stack([X[sl].T @ X[sl] for sl in slices])
            self.N = (
                np.stack([X[sl].T @ ds.Z[sl] for sl in slices])
                if ds.q
                else np.zeros((ds.n_groups, X.shape[1], 0))
            )

    def resid_stats(self, resid):
        """(Z'r per group, r'r per group) for a fixed residual vector."""
        v = (
            np.stack([self._Z[sl].T @ resid[sl] for sl in self._slices])
            if self.q
            else np.zeros((len(self._slices), 0))
        )
        s = np.array([float(resid[sl] @ resid[sl]) for sl in self._slices])
        return v, s

    def _c_and_dc(self, theta):
        """sqrt diagonal of Psi plus d(diag Psi)/d(theta_k) selector columns."""
        diag = self.cov.diag_variances(theta)
        return np.sqrt(diag)

    # -- likelihood & gradient ----------------------------------------------

    def nll_grad(self, theta, sigma2, v, s, reml=False):
        """Negative log-likelihood and gradient in (theta, sigma2).

        With reml=True the restricted-likelihood correction
        +1/2 log|X' Sigma^{-1} X| is added (requires design stats).
        """
        q, n_par = self.q, self.cov.n_params
        sizes = self.sizes
        if q == 0 or n_par == 0:
            quad = s.sum() / sigma2
            nll = 0.5 * (self.n * _LOG2PI + self.n * math.log(sigma2) + quad)
            grad_s2 = 0.5 * (self.n / sigma2 - quad / sigma2)
            grad = np.array([grad_s2])
            if reml:
                K = self.P.sum(axis=0) / sigma2
                nll += 0.5 * _slogdet_pd(K)
                grad[-1] += -0.5 * K.shape[0] / sigma2
            return nll, grad

        c = self._c_and_dc(theta)
        T = self.M * (c[:, None] * c[None, :])  # C M C per group
        D = T + sigma2 * np.eye(q)
        try:
            L = np.linalg.cholesky(D)
        except np.linalg.LinAlgError as exc:
            raise RankDeficiencyError(f"variance model became singular: {exc}") from exc
        logdetD = 2.0 * np.log(np.diagonal(L, axis1=1, axis2=2)).sum()
        w = v * c[None, :]
        Dinv_w = np.linalg.solve(D, w[..., None])[..., 0]
        quad = (s.sum() - np.einsum("ij,ij->", w, Dinv_w)) / sigma2
        nll = 0.5 * (
            self.n * _LOG2PI
            + (sizes - q).sum() * math.log(sigma2)
            + logdetD
            + quad
        )

        # gradient pieces: alpha_k = z_k' Sig^{-1} z_k, gamma_k = z_k' Sig^{-1} r
        U = c[None, :, None] * self.M  # C M, batched
        Dinv_U = np.linalg.solve(D, U)
        Mdiag = np.diagonal(self.M, axis1=1, axis2=2)
        alpha = (Mdiag - np.einsum("ijk,ijk->ik", U, Dinv_U)) / sigma2
        gamma = (v - np.einsum("ijk,ij->ik", U, Dinv_w)) / sigma2
        per_k = 0.5 * (alpha - gamma**2).sum(axis=0)  # d nll / d psi_kk
        if self.cov.kind == "diagonal":
            grad_theta = per_k
        else:
            grad_theta = np.array([per_k.sum()])

        Dinv = np.linalg.solve(D, np.broadcast_to(np.eye(q), D.shape).copy())
        tr_DinvT = q * len(sizes) - sigma2 * np.einsum("ijj->", Dinv)
        tr_Sinv = (sizes.sum() - tr_DinvT) / sigma2
        sq = (
            s.sum()
            - 2.0 * np.einsum("ij,ij->", w, Dinv_w)
            + np.einsum("ij,ijk,ik->", Dinv_w, T, Dinv_w)
        ) / sigma2**2
        grad_s2 = 0.5 * (tr_Sinv - sq)
        grad = np.concatenate([grad_theta, [grad_s2]])

        if reml:
            NC = self.N * c[None, None, :]  # X'Z C per group
            K = (self.P.sum(axis=0) - np.einsum("iaj,ijk,ibk->ab", NC, Dinv, NC)) / sigma2
            nll += 0.5 * _slogdet_pd(K)
            Kinv = np.linalg.inv(K)
            # theta part: +1/2 sum_k g_k' K^{-1} g_k per group, g_k = X'Sig^{-1} z_k
            Gk = (self.N - np.einsum("iaj,ijk->iak", NC, Dinv_U)) / sigma2
            gKg = np.einsum("iak,ab,ibk->k", Gk, Kinv, Gk)
            if self.cov.kind == "diagonal":
                grad[:-1] += -0.5 * gKg
            else:
                grad[0] += -0.5 * gKg.sum()
            # sigma2 part: -1/2 tr(K^{-1} X'Sig^{-2}X)
            DinvNC = np.einsum("ijk,iak->iaj", Dinv, NC)
            B = (
                self.P.sum(axis=0)
                - 2.0 * np.einsum("iaj,ibj->ab", NC, DinvNC)
                + np.einsum("iaj,ijk,ibk->ab", DinvNC, T, DinvNC)
            ) / sigma2**2
            grad[-1] += -0.5 * np.einsum("ab,ab->", Kinv, B)
        return nll, grad

    def loglik(self, theta, sigma2, v, s, reml=False):
        return -self.nll_grad(theta, sigma2, v, s, reml=reml)[0]

    # -- optimisation ---------------------------------------------------------

    def maximize(self, v, s, start=None, reml=False, grad_tol=1e-7, maxiter=300):
        """Quasi-Newton ascent on log-parameters; returns an EtaEstimate."""
        n_par = self.cov.n_params
        if start is None:
            tot = max(float(s.sum() / self.sizes.sum()), 10 * VAR_FLOOR)
            theta0 = np.full(n_par, 0.5 * tot / max(n_par, 1))
            start = (theta0, 0.5 * tot)
        x0 = np.log(np.clip(np.concatenate([np.ravel(start[0]), [start[1]]]),
                            VAR_FLOOR, VAR_CEIL))
        bounds = [(math.log(VAR_FLOOR), math.log(VAR_CEIL))] * len(x0)

        def fun(x):
            p = np.exp(x)
            nll, grad = self.nll_grad(p[:-1], float(p[-1]), v, s, reml=reml)
            return nll, grad * p  # chain rule through the log

        res = minimize(fun, x0, jac=True, method="L-BFGS-B", bounds=bounds,
                       options={"maxiter": maxiter, "ftol": 1e-14, "gtol": 1e-9})
        for _ in range(2):
            if _projected_grad_norm(res.x, res.jac, bounds) <= grad_tol:
                break
            res = minimize(fun, res.x, jac=True, method="L-BFGS-B", bounds=bounds,
                           options={"maxiter": maxiter, "ftol": 1e-16, "gtol": 1e-11})
        p = np.exp(res.x)
        gnorm = _projected_grad_norm(res.x, res.jac, bounds)
        return EtaEstimate(
            theta=p[:-1],
            sigma2=float(p[-1]),
            loglik=-float(res.fun),
            converged=bool(gnorm <= grad_tol),
            grad_norm=float(gnorm),
            n_iter=int(res.nit),
        )

    # -- GLS ------------------------------------------------------------------

    def gls(self, yv, ys_cross, theta, sigma2):
        """Exact GLS coefficients from stacked stats.

        yv: per-group Z'y (I, q); ys_cross: per-group X'y (I, pS).
        """
        q = self.q
        if q == 0:
            K = self.P.sum(axis=0)
            rhs = ys_cross.sum(axis=0)
        else:
            c = self._c_and_dc(theta)
            T = self.M * (c[:, None] * c[None, :])
            D = T + sigma2 * np.eye(q)
            NC = self.N * c[None, None, :]
            Dinv = np.linalg.solve(D, np.broadcast_to(np.eye(q), D.shape).copy())
            K = self.P.sum(axis=0) - np.einsum("iaj,ijk,ibk->ab", NC, Dinv, NC)
            w = yv * c[None, :]
            rhs = ys_cross.sum(axis=0) - np.einsum("iaj,ijk,ik->a", NC, Dinv, w)
        try:
            return np.linalg.solve(K, rhs)
        except np.linalg.LinAlgError as exc:
            raise RankDeficiencyError(f"GLS system is singular: {exc}") from exc


def _projected_grad_norm(x, grad, bounds):
    g = np.array(grad, dtype=float)
    for k, (lo, hi) in enumerate(bounds):
        if x[k] <= lo + 1e-12 and g[k] > 0:
            g[k] = 0.0
        if x[k] >= hi - 1e-12 and g[k] < 0:
            g[k] = 0.0
    return float(np.linalg.norm(g, ord=np.inf))


def _slogdet_pd(a):
    sign, val = np.linalg.slogdet(a)
    if sign <= 0:
        raise RankDeficiencyError("log-determinant of a non-PD matrix")
    return float(val)


# ---------------------------------------------------------------------------
# Public fitters
# ---------------------------------------------------------------------------


def fit_residual_ml(ds, beta_S, support=None, cov=None, start=None):
    """ML variance components from the residual model y - X_S beta_S.

    beta_S is aligned with `support` when given, otherwise a full-length
    coefficient vector.  Returns an EtaEstimate (unpacks to (theta, sigma2)).
    """
    beta_S = np.asarray(beta_S, dtype=float).ravel()
    if support is not None:
        pos = support.positions
        if len(beta_S) != len(pos):
            raise DimensionError("beta_S length must match the active set")
        resid = ds.y - ds.X[:, pos] @ beta_S
    else:
        if len(beta_S) != ds.p:
            raise DimensionError("full beta expected when no support is given")
        resid = ds.y - ds.X @ beta_S
    prob = VarianceProblem(ds, cov=cov)
    v, s = prob.resid_stats(resid)
    return prob.maximize(v, s, start=start)


def _alternate(reduced, cov, reml, tol=1e-10, max_iter=500):
    ds = reduced.ds
    prob = VarianceProblem(ds, cov=cov, X=ds.X)
    slices = ds.group_slices
    Zty = (
        np.stack([ds.Z[sl].T @ ds.y[sl] for sl in slices])
        if ds.q
        else np.zeros((ds.n_groups, 0))
    )
    Xty = np.stack([ds.X[sl].T @ ds.y[sl] for sl in slices])
    yty = np.array([float(ds.y[sl] @ ds.y[sl]) for sl in slices])

    tot = max(float(np.var(ds.y)), 10 * VAR_FLOOR)
    n_par = prob.cov.n_params
    theta = np.full(n_par, 0.5 * tot / max(n_par, 1))
    sigma2 = 0.5 * tot
    last = -math.inf
    eta = None
    for it in range(1, max_iter + 1):
        beta = prob.gls(Zty, Xty, theta, sigma2)
        v = Zty - np.einsum("iaj,a->ij", np.swapaxes(prob.N, 1, 2), beta) if ds.q else Zty
        s = yty - 2.0 * Xty @ beta + np.einsum("a,iab,b->i", beta, prob.P, beta)
        s = np.clip(s, 0.0, None)
        eta = prob.maximize(v, s, start=(theta, sigma2), reml=reml)
        theta, sigma2 = eta.theta, eta.sigma2
        if abs(eta.loglik - last) <= tol * (abs(eta.loglik) + 1.0):
            last = eta.loglik
            break
        last = eta.loglik
    beta = prob.gls(Zty, Xty, theta, sigma2)
    converged = it < max_iter and eta.converged
    # report the unrestricted log-likelihood at the final parameters
    v = Zty - np.einsum("iaj,a->ij", np.swapaxes(prob.N, 1, 2), beta) if ds.q else Zty
    s = np.clip(yty - 2.0 * Xty @ beta + np.einsum("a,iab,b->i", beta, prob.P, beta), 0.0, None)
    loglik = prob.loglik(theta, sigma2, v, s, reml=False)
    return ReducedFit(
        beta_S=beta,
        theta=theta,
        sigma2=float(sigma2),
        loglik=float(loglik),
        converged=bool(converged),
        n_iter=it,
    )


def fit_reduced_ml(reduced, cov=None):
    """Joint ML on the reduced model via alternating GLS / variance updates."""
    return _alternate(reduced, cov, reml=False)


def fit_reduced_reml(reduced, cov=None):
    """As fit_reduced_ml with the restricted-likelihood variance update."""
    return _alternate(reduced, cov, reml=True)


def blup(ds, params):
    """Empirical best linear unbiased predictors of the random effects.

    Returns an (I, q) array with rows Psi Z_i' (Z_i Psi Z_i' + s2 I)^{-1} r_i.
    """
    psi = params.psi()
    resid = ds.y - ds.X @ params.beta
    out = np.zeros((ds.n_groups, ds.q))
    if ds.q == 0:
        return out
    for i, (block, sl) in enumerate(zip(scaled_cov_blocks(ds, params), ds.group_slices)):
        Zi = ds.Z[sl]
        out[i] = psi @ Zi.T @ np.linalg.solve(block, resid[sl])
    return out


def prediction_error(ds, params):
    """Mean squared residual after removing the predicted random effects."""
    if len(params.beta) != ds.p:
        raise DimensionError("beta length does not match the dataset")
    if params.cov.q != ds.q:
        raise DimensionError("random-effect dimension mismatch")
    b = blup(ds, params)
    resid = ds.y - ds.X @ params.beta
    total = 0.0
    for i, sl in enumerate(ds.group_slices):
        ri = resid[sl] - ds.Z[sl] @ b[i]
        total += float(ri @ ri)
    return total / ds.n
