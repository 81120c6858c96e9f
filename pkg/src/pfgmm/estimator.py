"""Focused GMM selection of fixed effects under error-covariate endogeneity.

The data are whitened by the proxy covariance Vz^{-1/2}; two instrument
sieves F (levels) and H (centered squares) are built from the whitened
covariates (or an external instrument matrix); the GMM loss sums the
squared moments of the coordinates in the current support only, weighted
by inverse instrument-column variances.  Because the weight matrix masks
moments by support, the loss is discontinuous at beta_j = 0; the solver
handles this with an exact zero-versus-nonzero objective comparison per
coordinate, preferring the sparser model on ties.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .baselines import FitOptions, FitResult, fit_pls
from .data import (
    ActiveSet,
    CovStructure,
    DimensionError,
    InvalidParameterError,
    ModelParams,
    scaled_cov_blocks,
)
from .linalg import block_apply, eig_extrema
from .penalties import AssumptionCheck, AssumptionReport, penalized_quadratic_min
from .proxy import ProxyCov, ProxySpec, build_proxy_cov
from .second_stage import RankDeficiencyError, fit_residual_ml

VAR_FLOOR = 1e-10
_TIE_TOL = 1e-12


class InstrumentError(ValueError):
    """Degenerate or malformed instrument specification."""


@dataclass(frozen=True)
class InstrumentSet:
    """Instrument sieve columns in the whitened space, centered columnwise.

    has_h flags coordinates whose squared-sieve column is kept; columns of
    constant covariates carry levels only (their square is collinear) and
    are zeroed in H.
    """

    F: np.ndarray
    H: np.ndarray
    has_h: np.ndarray
    source: str

    def __post_init__(self):
        if self.F.shape != self.H.shape:
            raise DimensionError("F and H must have matching shapes")
        if not (np.all(np.isfinite(self.F)) and np.all(np.isfinite(self.H))):
            raise InstrumentError("instruments must be finite")


@dataclass(frozen=True)
class GmmWeights:
    """Inverse sample-variance weights of the instrument columns."""

    wF: np.ndarray
    wH: np.ndarray


@dataclass(frozen=True)
class AsymptoticDiag:
    """Estimated asymptotic-normality ingredients for the selected block."""

    A: np.ndarray          # s x 2s moment-design cross matrix
    Upsilon: np.ndarray    # 2s x 2s moment covariance
    Gamma: np.ndarray      # s x s
    Sigma: np.ndarray      # s x s
    se: np.ndarray         # length-s standard errors for beta_S
    support: ActiveSet


def make_instruments(ds, proxy_cov, source="sieve", W=None):
    """Build the level/square sieve in the whitened space.

    source 'sieve' uses the covariates themselves (W = X); source
    'external' applies the same construction to a user matrix with exactly
    one instrument column per coefficient.  Every retained column must have
    sample variance above 1e-10 after the transform.
    """
    if source == "sieve":
        W_data = ds.X
    elif source == "external":
        if W is None:
            raise InstrumentError("external source needs an instrument matrix")
        W_data = np.atleast_2d(np.asarray(W, dtype=float))
        if W_data.shape != (ds.n, ds.p):
            raise InstrumentError(
                f"external instruments must be {ds.n} x {ds.p}, got {W_data.shape}"
            )
    else:
        raise InstrumentError(f"unknown instrument source {source!r}")
    if not np.all(np.isfinite(W_data)):
        raise InstrumentError("instrument matrix must be finite")

    span = W_data.max(axis=0) - W_data.min(axis=0)
    constant = span <= 1e-12 * np.maximum(1.0, np.abs(W_data).max(axis=0))
    W_star = proxy_cov.whiten(W_data)
    F = W_star - W_star.mean(axis=0)
    H = W_star**2
    H -= H.mean(axis=0)
    H[:, constant] = 0.0
    has_h = ~constant

    var_f = np.einsum("ij,ij->j", F, F) / len(F)
    var_h = np.einsum("ij,ij->j", H, H) / len(H)
    bad = np.flatnonzero(var_f <= VAR_FLOOR)
    if len(bad):
        raise InstrumentError(
            f"instrument column x_{bad[0] + 1} is degenerate after the transform"
        )
    bad = np.flatnonzero(has_h & (var_h <= VAR_FLOOR))
    if len(bad):
        raise InstrumentError(
            f"squared instrument column x_{bad[0] + 1} is degenerate"
        )
    return InstrumentSet(F=F, H=H, has_h=has_h, source=source)


def gmm_weights(inst):
    """Weights 1/Var(F_j) and 1/Var(H_j); dropped square columns get 0."""
    n = len(inst.F)
    var_f = np.einsum("ij,ij->j", inst.F, inst.F) / n
    var_h = np.einsum("ij,ij->j", inst.H, inst.H) / n
    wF = 1.0 / var_f
    wH = np.where(inst.has_h, 1.0 / np.where(inst.has_h, var_h, 1.0), 0.0)
    if not (np.all(np.isfinite(wF)) and np.all(np.isfinite(wH))):
        raise InstrumentError("non-finite instrument weights")
    return GmmWeights(wF=wF, wH=wH)


class GmmProblem:
    """Precomputed cross-moments for the support-masked GMM loss."""

    def __init__(self, y_star, X_star, inst, weights):
        n = len(y_star)
        self.n, self.p = X_star.shape
        self.CF = inst.F.T @ X_star / n
        self.CH = inst.H.T @ X_star / n
        self.mFy = inst.F.T @ y_star / n
        self.mHy = inst.H.T @ y_star / n
        self.wF = weights.wF
        self.wH = weights.wH

    def moments(self, beta):
        return self.mFy - self.CF @ beta, self.mHy - self.CH @ beta

    def loss(self, beta):
        """Sum of weighted squared moments over the support of beta."""
        beta = np.asarray(beta, dtype=float).ravel()
        if len(beta) != self.p:
            raise DimensionError(f"beta has length {len(beta)}, expected {self.p}")
        sup = beta != 0.0
        if not sup.any():
            return 0.0
        mF, mH = self.moments(beta)
        return float(
            self.wF[sup] @ mF[sup] ** 2 + self.wH[sup] @ mH[sup] ** 2
        )

    def objective(self, beta, pen, penalized):
        mask = penalized & (np.asarray(beta) != 0.0)
        val = self.loss(beta)
        if pen is not None and mask.any():
            val += float(np.sum(pen.value(np.abs(beta[mask]))))
        return val

    def restricted_gradient(self, beta, support):
        """Gradient of the smooth loss with the support held fixed.

        support is a boolean mask; returns the full-length gradient with
        entries for every coordinate (moments masked to `support`).
        """
        mF, mH = self.moments(beta)
        idx = np.flatnonzero(support)
        g = -2.0 * (
            (self.wF[idx] * mF[idx]) @ self.CF[idx]
            + (self.wH[idx] * mH[idx]) @ self.CH[idx]
        )
        return g


def pfgmm_loss(ds, beta, proxy_cov, inst, weights):
    """Support-masked GMM loss at beta (convenience wrapper)."""
    y_star = proxy_cov.whiten(ds.y)
    X_star = proxy_cov.whiten(ds.X)
    return GmmProblem(y_star, X_star, inst, weights).loss(beta)


# ---------------------------------------------------------------------------
# Solver
# ---------------------------------------------------------------------------


def _masked_objective(problem, beta, pen, penalized):
    """Loss over active-or-unpenalized coordinates plus penalty terms."""
    sup = (beta != 0.0) | ~penalized
    mF, mH = problem.moments(beta)
    val = float(problem.wF[sup] @ mF[sup] ** 2 + problem.wH[sup] @ mH[sup] ** 2)
    mask = penalized & (beta != 0.0)
    if pen is not None and mask.any():
        val += float(np.sum(pen.value(np.abs(beta[mask]))))
    return val


def _gmm_cd(problem, pen, beta0, penalized, opts):
    """Cyclic coordinate descent with exact support-change comparisons.

    Unpenalized coordinates stay in the moment mask permanently and are
    updated by the smooth step only; penalized ones face the exact
    zero-versus-nonzero objective comparison each visit.
    """
    p = problem.p
    CF, CH, wF, wH = problem.CF, problem.CH, problem.wF, problem.wH
    beta = np.array(beta0, dtype=float)
    beta[np.abs(beta) <= opts.zero_tol] = 0.0
    mF, mH = problem.moments(beta)

    def visit(j):
        """One exact coordinate step; returns (|delta|, support flipped)."""
        nonlocal mF, mH
        t_cur = beta[j]
        support = (beta != 0.0) | ~penalized
        support[j] = True
        idx = np.flatnonzero(support)
        cf, ch = CF[idx, j], CH[idx, j]
        wf, wh = wF[idx], wH[idx]
        mf, mh = mF[idx], mH[idx]
        quad = float(wf @ cf**2 + wh @ ch**2)
        if quad <= 0.0:
            return 0.0, False
        lin = float(wf @ (mf * cf) + wh @ (mh * ch))
        loss_here = float(wf @ mf**2 + wh @ mh**2)
        pen_j = pen if penalized[j] else None
        t_star = penalized_quadratic_min(
            2.0 * quad, 2.0 * (quad * t_cur + lin), pen_j
        )
        if penalized[j]:
            d = t_star - t_cur
            q_active = loss_here - 2.0 * lin * d + quad * d * d
            if t_star != 0.0:
                q_active += float(pen.value(abs(t_star)))
            # objective with j excluded from the support (beta_j = 0)
            mf0 = mf + cf * t_cur
            mh0 = mh + ch * t_cur
            loss_zero = float(wf @ mf0**2 + wh @ mh0**2)
            kpos = int(np.searchsorted(idx, j))
            loss_zero -= float(
                wf[kpos] * mf0[kpos] ** 2 + wh[kpos] * mh0[kpos] ** 2
            )
            if t_star == 0.0 or loss_zero <= q_active + _TIE_TOL:
                t_star = 0.0
        if t_star == t_cur:
            return 0.0, False
        delta = t_star - t_cur
        beta[j] = t_star
        mF = mF - CF[:, j] * delta
        mH = mH - CH[:, j] * delta
        return abs(delta), (t_cur == 0.0) != (t_star == 0.0)

    trace = [_masked_objective(problem, beta, pen, penalized)]
    converged = False
    sweeps = 0
    while sweeps < opts.max_sweeps:
        sweeps += 1
        max_delta = 0.0
        support_changed = False
        for j in range(p):
            d, flip = visit(j)
            max_delta = max(max_delta, d)
            support_changed = support_changed or flip
        # settle the current active set before the next full entry pass
        for _ in range(50):
            inner = 0.0
            for j in np.flatnonzero((beta != 0.0) | ~penalized):
                d, flip = visit(j)
                inner = max(inner, d)
                support_changed = support_changed or flip
            if inner < 1e-10:
                break
        trace.append(_masked_objective(problem, beta, pen, penalized))
        if not support_changed and max_delta < 1e-8:
            converged = True
            break
    return beta, trace, sweeps, converged


def _restricted_solve(problem, pen, beta0, support, penalized, opts):
    """Coordinate descent with the moment mask frozen to `support`."""
    CF, CH, wF, wH = problem.CF, problem.CH, problem.wF, problem.wH
    beta = np.array(beta0, dtype=float)
    beta[~support] = 0.0
    mF, mH = problem.moments(beta)
    idx = np.flatnonzero(support)
    cf_all, ch_all = CF[np.ix_(idx, idx)], CH[np.ix_(idx, idx)]
    wf, wh = wF[idx], wH[idx]
    for _ in range(opts.max_sweeps):
        max_delta = 0.0
        for pos, j in enumerate(idx):
            t_cur = beta[j]
            cf, ch = cf_all[:, pos], ch_all[:, pos]
            quad = float(wf @ cf**2 + wh @ ch**2)
            if quad <= 0.0:
                continue
            lin = float(wf @ (mF[idx] * cf) + wh @ (mH[idx] * ch))
            t_new = penalized_quadratic_min(
                2.0 * quad, 2.0 * (quad * t_cur + lin),
                pen if penalized[j] else None,
            )
            if t_new != t_cur:
                delta = t_new - t_cur
                beta[j] = t_new
                mF = mF - CF[:, j] * delta
                mH = mH - CH[:, j] * delta
                max_delta = max(max_delta, abs(delta))
        if max_delta < 1e-10:
            break
    return beta


def _refine_support(problem, pen, beta, penalized, opts):
    """Nested-support search along the solution's own magnitude path.

    Correlated endogenous coordinates can entrench one another against
    single-coordinate removals (each marginal drop is uphill although
    dropping the group is downhill).  Thresholding the converged
    coefficients at each magnitude level and re-solving the restricted
    problem compares whole nested supports by their exact masked
    objective, which escapes those traps without smoothing the mask.
    """
    best_beta = beta
    best_q = _masked_objective(problem, beta, pen, penalized)
    # only coefficients still inside the shrinkage region are candidates
    # for pruning; signal-sized coefficients in the flat region stay
    bound = pen.flat_threshold()
    mags = sorted(
        {abs(b) for b, m in zip(beta, penalized) if m and b != 0.0 and abs(b) <= bound}
    )
    for cut in mags:
        support = (np.abs(beta) > cut) | ~penalized
        cand = _restricted_solve(problem, pen, beta, support, penalized, opts)
        q = _masked_objective(problem, cand, pen, penalized)
        if q < best_q - _TIE_TOL:
            best_beta, best_q = cand, q
    return best_beta, best_q


def fit_pfgmm(ds, pen, proxy=None, inst_source="sieve", opts=None, init="pls", W=None):
    """Penalized focused-GMM fit of the fixed-effect coefficients.

    init selects the starting point: 'pls' (default, the profiled
    penalized least-squares estimate), 'zero', or an explicit coefficient
    vector.  Unpenalized coordinates stay in the moment mask throughout;
    coordinate descent alternates with a nested-support refinement until
    the exact masked objective stops improving.  Note a zero start with no
    unpenalized coordinates cannot leave the origin, since beta = 0 is a
    trivial local minimiser of the masked objective.
    """
    opts = opts or FitOptions()
    proxy_cov = proxy if isinstance(proxy, ProxyCov) else build_proxy_cov(ds, proxy)
    y_star = proxy_cov.whiten(ds.y)
    X_star = proxy_cov.whiten(ds.X)
    inst = make_instruments(ds, proxy_cov, source=inst_source, W=W)
    weights = gmm_weights(inst)
    problem = GmmProblem(y_star, X_star, inst, weights)
    penalized = opts.penalized_mask(ds.p)

    if isinstance(init, str):
        if init == "pls":
            beta0 = fit_pls(ds, pen, opts=opts, whitened=(y_star, X_star)).beta
        elif init == "zero":
            beta0 = np.zeros(ds.p)
        else:
            raise InvalidParameterError(f"unknown init {init!r}")
    else:
        beta0 = np.asarray(init, dtype=float).ravel()
        if len(beta0) != ds.p:
            raise DimensionError("init vector has wrong length")

    beta, trace, sweeps, converged = _gmm_cd(problem, pen, beta0, penalized, opts)
    trace = list(trace)
    for _ in range(10):
        refined, q_ref = _refine_support(problem, pen, beta, penalized, opts)
        if refined is beta:
            break
        beta2, trace2, sweeps2, converged = _gmm_cd(
            problem, pen, refined, penalized, opts
        )
        sweeps += sweeps2
        q2 = _masked_objective(problem, beta2, pen, penalized)
        if q2 <= trace[-1] - _TIE_TOL:
            beta = beta2
            trace.extend(t for t in trace2[1:] if t <= trace[-1] + 1e-10)
        else:
            break
    active = ActiveSet.from_beta(beta, opts.zero_tol)
    loss = problem.loss(beta)
    grad = problem.restricted_gradient(beta, (beta != 0.0) | ~penalized)
    kkt = 0.0
    for j in np.flatnonzero(beta):
        bound = pen.deriv(abs(beta[j])) if penalized[j] else 0.0
        kkt = max(kkt, abs(grad[j]) - bound)
    return FitResult(
        beta=beta,
        active_set=active,
        eta=None,
        objective=trace[-1],
        loss=loss,
        iterations=sweeps,
        converged=converged,
        trace=tuple(trace),
        kkt_residual=float(max(kkt, 0.0)),
    )


# ---------------------------------------------------------------------------
# Asymptotic diagnostics
# ---------------------------------------------------------------------------


def _moment_design(problem_inputs, fit_support):
    X_star, inst, weights = problem_inputs
    n = len(X_star)
    pos = fit_support.positions
    Pi = np.hstack([inst.F[:, pos], inst.H[:, pos]])
    A = X_star[:, pos].T @ Pi / n
    J = np.concatenate([weights.wF[pos], weights.wH[pos]])
    return Pi, A, J


def asymptotic_diagnostics(ds, fit, proxy=None, inst_source="sieve", W=None,
                           params_for_V=None, cov=None):
    """Plug-in A, Upsilon, Gamma, Sigma and standard errors for beta_S.

    When params_for_V is omitted, the variance parameters are estimated
    from the residual model at the fitted coefficients.
    """
    if len(fit.active_set) == 0:
        raise RankDeficiencyError("empty active set has no asymptotic block")
    proxy_cov = proxy if isinstance(proxy, ProxyCov) else build_proxy_cov(ds, proxy)
    X_star = proxy_cov.whiten(ds.X)
    inst = make_instruments(ds, proxy_cov, source=inst_source, W=W)
    weights = gmm_weights(inst)
    pos = fit.active_set.positions
    Pi, A, J = _moment_design((X_star, inst, weights), fit.active_set)

    if params_for_V is None:
        cov = cov or CovStructure.diagonal(ds.q)
        eta = fit_residual_ml(ds, fit.beta[pos], fit.active_set, cov=cov)
        params_for_V = ModelParams(
            beta=fit.beta, theta=eta.theta, sigma2=eta.sigma2, cov=cov
        )
    blocks = scaled_cov_blocks(ds, params_for_V)
    Pw = block_apply(proxy_cov.inv_sqrt_blocks, Pi, ds.group_sizes)
    upsilon = np.zeros((Pi.shape[1], Pi.shape[1]))
    for block, sl in zip(blocks, ds.group_slices):
        upsilon += Pw[sl].T @ block @ Pw[sl]
    upsilon /= ds.n
    upsilon = 0.5 * (upsilon + upsilon.T)

    AJ = A * J[None, :]
    sigma = 2.0 * AJ @ A.T
    gamma = 4.0 * AJ @ upsilon @ AJ.T
    sigma = 0.5 * (sigma + sigma.T)
    gamma = 0.5 * (gamma + gamma.T)
    try:
        sigma_inv = np.linalg.inv(sigma)
    except np.linalg.LinAlgError as exc:
        raise RankDeficiencyError(f"singular Sigma block: {exc}") from exc
    cov_beta = sigma_inv @ gamma @ sigma_inv / ds.n
    se = np.sqrt(np.clip(np.diag(cov_beta), 0.0, None))
    return AsymptoticDiag(
        A=A, Upsilon=upsilon, Gamma=gamma, Sigma=sigma, se=se,
        support=fit.active_set,
    )


def moment_report(ds, inst, proxy_cov, fit=None, pen=None, true_params=None,
                  c1_grid=(1.5, 2.0, 5.0), cov=None):
    """Finite-sample surrogates for the instrument / proxy assumption sets.

    Always reports the instrument-column variance ranges; with a fit it
    adds the residual-moment variance floor, the eigenvalue margins of
    A A' and Upsilon; with true variance parameters it evaluates the
    proxy-matrix eigenvalue inequalities for each candidate constant.
    """
    n = ds.n
    checks = []
    var_f = np.einsum("ij,ij->j", inst.F, inst.F) / n
    var_h = np.einsum("ij,ij->j", inst.H, inst.H) / n
    checks.append(
        AssumptionCheck("instrument_variance_range_F",
                        float(var_f.min()), float(var_f.max()),
                        bool(var_f.min() > VAR_FLOOR))
    )
    if inst.has_h.any():
        vh = var_h[inst.has_h]
        checks.append(
            AssumptionCheck("instrument_variance_range_H",
                            float(vh.min()), float(vh.max()),
                            bool(vh.min() > VAR_FLOOR))
        )

    if fit is not None and len(fit.active_set):
        weights = gmm_weights(inst)
        X_star = proxy_cov.whiten(ds.X)
        y_star = proxy_cov.whiten(ds.y)
        resid = y_star - X_star @ fit.beta
        pos = fit.active_set.positions
        prods_f = resid[:, None] * inst.F[:, pos]
        prods_h = resid[:, None] * inst.H[:, pos]
        mom_var = min(float(prods_f.var(axis=0).min()), float(prods_h.var(axis=0).min()))
        checks.append(
            AssumptionCheck("residual_moment_variance_min", mom_var, 0.0, mom_var > 0.0)
        )
        _, A, _ = _moment_design((X_star, inst, weights), fit.active_set)
        lo, hi = eig_extrema(A @ A.T)
        checks.append(AssumptionCheck("cross_moment_eigs", lo, hi, lo > 0.0))
        diag = asymptotic_diagnostics(
            ds, fit, proxy=proxy_cov, inst_source=inst.source,
            params_for_V=true_params, cov=cov,
        )
        lo, _ = eig_extrema(diag.Upsilon)
        checks.append(AssumptionCheck("moment_cov_min_eig", lo, 0.0, lo > 0.0))
        # sensitivity of the inactive columns (reported against both
        # readings of the penalty level at zero)
        if pen is not None:
            inactive = np.setdiff1d(np.arange(ds.p), pos)
            if len(inactive):
                Pi = np.hstack([inst.F[:, pos], inst.H[:, pos]])
                A_full = Pi.T @ X_star[:, inactive] / n
                s = max(len(pos), 2)
                lhs = float(np.linalg.norm(A_full, axis=0).max()) * math.sqrt(
                    math.log(s) / n
                )
                checks.append(
                    AssumptionCheck("inactive_sensitivity_vs_pen_at_zero", lhs, 0.0)
                )
                checks.append(
                    AssumptionCheck(
                        "inactive_sensitivity_vs_pen_deriv_at_zero",
                        lhs, pen.deriv_at_zero(), lhs < pen.deriv_at_zero(),
                    )
                )

    if true_params is not None and ds.q:
        psi_over_s2 = true_params.psi() / true_params.sigma2
        m = proxy_cov.proxy_matrix
        for c1 in c1_grid:
            lo1, _ = eig_extrema(c1 * m - psi_over_s2)
            checks.append(
                AssumptionCheck(f"proxy_upper_c1={c1:g}", lo1, 0.0, lo1 >= 0.0)
            )
            lo2, _ = eig_extrema(c1 * math.log(n) * psi_over_s2 - m)
            checks.append(
                AssumptionCheck(f"proxy_lower_c1={c1:g}", lo2, 0.0, lo2 >= 0.0)
            )
    return AssumptionReport(tuple(checks))
