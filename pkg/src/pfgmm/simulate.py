"""Synthetic-study engine: generators, endogeneity injectors, study runner.

The default configuration mirrors the benchmark design used throughout the
package: 25 groups of 6 observations, p = 300 covariates with AR-1
correlation, an all-ones first column, the first two columns doubling as
random-effect covariates, five active coefficients (1, 2, 4, 3, 3) and
variance parameters (0.56, 0.56, 0.25).  Replications draw from
counter-based substreams of a master seed, so runs are order-independent
and reproducible under any worker count.
"""

from __future__ import annotations

import dataclasses
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .baselines import FitOptions, FitResult, fit_mple, fit_pls
from .data import (
    ActiveSet,
    CovStructure,
    DimensionError,
    GroupedDataset,
    InvalidParameterError,
    ModelParams,
)
from .estimator import fit_pfgmm
from .penalties import Penalty
from .second_stage import (
    ReducedModel,
    fit_reduced_ml,
    fit_reduced_reml,
    fit_residual_ml,
    prediction_error,
)

ESTIMATORS = ("mple", "pls", "pfgmm", "pfgmm+2mle", "pfgmm+2reml")

ENDO_LEVELS = ("level1", "level2_intercept", "level2_slope")


@dataclass(frozen=True)
class EndoSet:
    """Named collections of endogenous covariate indices (1-based).

    set1: x_6..x_15 (unimportant only); set2: x_5..x_15 (adds one active
    covariate); set3: x_2 plus x_6..x_15 (adds the random-slope covariate);
    set4: x_6..x_p (every unimportant covariate).
    """

    tag: str
    custom: tuple = ()

    _TAGS = ("set1", "set2", "set3", "set4", "custom")

    def __post_init__(self):
        if self.tag not in self._TAGS:
            raise InvalidParameterError(f"unknown endogenous set {self.tag!r}")
        if self.tag == "custom" and not self.custom:
            raise InvalidParameterError("custom endogenous set is empty")

    def indices(self, p):
        if self.tag == "set1":
            idx = tuple(range(6, 16))
        elif self.tag == "set2":
            idx = tuple(range(5, 16))
        elif self.tag == "set3":
            idx = (2,) + tuple(range(6, 16))
        elif self.tag == "set4":
            idx = tuple(range(6, p + 1))
        else:
            idx = tuple(sorted({int(j) for j in self.custom}))
        if idx and (idx[0] < 1 or idx[-1] > p):
            raise DimensionError(f"endogenous indices outside 1..{p}")
        return idx

    @classmethod
    def parse(cls, text):
        text = text.strip().lower()
        if text.startswith("custom:"):
            return cls("custom", tuple(int(s) for s in text[7:].split(",") if s))
        return cls(text)


@dataclass(frozen=True)
class EndoConfig:
    """Which endogeneity to inject: level and strength (rho_e or rho_b)."""

    level: str
    strength: float
    subset: EndoSet = field(default_factory=lambda: EndoSet("set1"))

    def __post_init__(self):
        if self.level not in ENDO_LEVELS:
            raise InvalidParameterError(f"unknown endogeneity level {self.level!r}")


def default_beta(p):
    beta = np.zeros(p)
    beta[:5] = (1.0, 2.0, 4.0, 3.0, 3.0)
    return beta


@dataclass(frozen=True)
class SimConfig:
    """Generator settings; defaults reproduce the benchmark design."""

    n_groups: int = 25
    group_size: int = 6
    p: int = 300
    q: int = 2
    beta0: tuple = None
    theta0: tuple = (0.56, 0.56)
    sigma2_0: float = 0.25
    rho: float = 0.5
    endo: EndoConfig = None
    seed: int = 0
    reps: int = 100

    def __post_init__(self):
        if self.beta0 is None:
            object.__setattr__(self, "beta0", tuple(default_beta(self.p)))
        if len(self.beta0) != self.p:
            raise DimensionError("beta0 length must equal p")
        if len(self.theta0) != self.q:
            raise DimensionError("theta0 length must equal q")
        if self.q > self.p:
            raise DimensionError("q cannot exceed p")
        if not -1.0 < self.rho < 1.0:
            raise InvalidParameterError("rho must lie in (-1, 1)")

    @property
    def n(self):
        return self.n_groups * self.group_size

    @property
    def cov(self):
        return CovStructure.diagonal(self.q)

    def true_params(self):
        return ModelParams(
            beta=np.asarray(self.beta0),
            theta=np.asarray(self.theta0),
            sigma2=self.sigma2_0,
            cov=self.cov,
        )

    def active_set(self):
        return ActiveSet.from_beta(np.asarray(self.beta0), 0.0)


@dataclass(frozen=True)
class TruthRecord:
    """Everything the injectors and metrics need about one replication."""

    beta0: np.ndarray
    theta0: np.ndarray
    sigma2_0: float
    active: ActiveSet
    eps: np.ndarray
    b: np.ndarray


def _assemble(cfg, X, b, eps):
    """y_i = X_i beta + Z_i b_i + eps_i with Z = first q columns of X."""
    Z = X[:, : cfg.q].copy()
    y = X @ np.asarray(cfg.beta0) + eps
    sizes = np.full(cfg.n_groups, cfg.group_size)
    offset = 0
    for i in range(cfg.n_groups):
        sl = slice(offset, offset + cfg.group_size)
        y[sl] += Z[sl] @ b[i]
        offset += cfg.group_size
    return GroupedDataset(y=y, X=X, Z=Z, group_sizes=sizes)


def generate(cfg, rep):
    """One exogenous replication; bit-identical for identical (seed, rep)."""
    rng = np.random.default_rng([int(cfg.seed), int(rep)])
    n, p = cfg.n, cfg.p
    X = np.empty((n, p))
    X[:, 0] = 1.0
    z = rng.standard_normal((n, p - 1))
    # AR-1 columns via the sequential representation of the Cholesky factor
    X[:, 1] = z[:, 0]
    scale = math.sqrt(1.0 - cfg.rho**2)
    for j in range(2, p):
        X[:, j] = cfg.rho * X[:, j - 1] + scale * z[:, j - 1]
    b = rng.standard_normal((cfg.n_groups, cfg.q)) * np.sqrt(np.asarray(cfg.theta0))
    eps = rng.standard_normal(n) * math.sqrt(cfg.sigma2_0)
    ds = _assemble(cfg, X, b, eps)
    truth = TruthRecord(
        beta0=np.asarray(cfg.beta0),
        theta0=np.asarray(cfg.theta0),
        sigma2_0=cfg.sigma2_0,
        active=cfg.active_set(),
        eps=eps,
        b=b,
    )
    return ds, truth


def _reinject(cfg, ds, truth, pos, multiplier):
    X = ds.X.copy()
    X[:, pos] = (X[:, pos] + 1.0) * multiplier[:, None]
    return _assemble(cfg, X, truth.b, truth.eps)


def inject_level1(cfg, ds, truth, rho_e, subset):
    """Correlate the listed covariates with the model error, row-wise.

    x <- (x + 1)(rho_e * eps + 1) using each observation's own error; the
    response is rebuilt from the transformed design so the stated
    coefficients remain the true ones.  rho_e = 0 leaves the data untouched.
    """
    if rho_e == 0.0:
        return ds
    pos = np.asarray(subset.indices(ds.p), dtype=int) - 1
    return _reinject(cfg, ds, truth, pos, rho_e * truth.eps + 1.0)


def inject_level2(cfg, ds, truth, rho_b, subset, which="intercept"):
    """Correlate the listed covariates with a random effect, group-wise."""
    if rho_b == 0.0:
        return ds
    if which not in ("intercept", "slope"):
        raise InvalidParameterError("which must be 'intercept' or 'slope'")
    k = 0 if which == "intercept" else 1
    if k >= ds.q:
        raise DimensionError("dataset has no random slope")
    pos = np.asarray(subset.indices(ds.p), dtype=int) - 1
    mult = np.repeat(rho_b * truth.b[:, k] + 1.0, ds.group_sizes)
    return _reinject(cfg, ds, truth, pos, mult)


def generate_with_endo(cfg, rep):
    ds, truth = generate(cfg, rep)
    endo = cfg.endo
    if endo is None:
        return ds, truth
    if endo.level == "level1":
        ds = inject_level1(cfg, ds, truth, endo.strength, endo.subset)
    elif endo.level == "level2_intercept":
        ds = inject_level2(cfg, ds, truth, endo.strength, endo.subset, "intercept")
    else:
        ds = inject_level2(cfg, ds, truth, endo.strength, endo.subset, "slope")
    return ds, truth


def level1_correlation(rho_e, sigma):
    """Theoretical corr(transformed covariate, error) for unit-variance x."""
    return rho_e * sigma / math.sqrt(2.0 * rho_e**2 * sigma**2 + 1.0)


def level2_correlation(rho_b, theta_k):
    """Theoretical corr(transformed covariate, random effect), sd theta_k."""
    return rho_b * theta_k / math.sqrt(2.0 * rho_b**2 * theta_k**2 + 1.0)


# ---------------------------------------------------------------------------
# Replication metrics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RepSummary:
    """Per-replication selection and estimation metrics."""

    rep: int
    estimator: str
    active_size: int
    true_positives: int
    pe: float
    beta_head: tuple          # first five coefficient estimates
    beta_noise_mean: float    # average estimate over coordinates 6..p
    sigma2: float
    theta: tuple
    converged: bool


def rep_metrics(rep, estimator, ds, truth, beta, eta, converged, cov):
    """Summarise one fit against the generating truth."""
    beta = np.asarray(beta, dtype=float).ravel()
    active = ActiveSet.from_beta(beta)
    tp = len(set(active.indices) & set(truth.active.indices))
    theta, sigma2 = eta
    params = ModelParams(beta=beta, theta=theta, sigma2=float(sigma2), cov=cov)
    pe = prediction_error(ds, params)
    head = tuple(float(beta[j]) if j < len(beta) else math.nan for j in range(5))
    noise = float(beta[5:].mean()) if len(beta) > 5 else math.nan
    return RepSummary(
        rep=rep,
        estimator=estimator,
        active_size=len(active),
        true_positives=tp,
        pe=float(pe),
        beta_head=head,
        beta_noise_mean=noise,
        sigma2=float(sigma2),
        theta=tuple(float(t) for t in np.ravel(theta)),
        converged=bool(converged),
    )


# ---------------------------------------------------------------------------
# Study runner
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LambdaPolicy:
    """Regularisation-level policy: fixed value or a BIC/ExBIC grid search."""

    kind: str = "fixed"
    value: float = 0.1
    grid: tuple = ()

    def __post_init__(self):
        if self.kind not in ("fixed", "bic", "exbic"):
            raise InvalidParameterError(f"unknown lambda policy {self.kind!r}")
        if self.kind == "fixed" and not self.value > 0:
            raise InvalidParameterError("fixed lambda must be positive")
        if self.kind != "fixed":
            grid = tuple(sorted(float(g) for g in self.grid))
            if grid and any(g <= 0 for g in grid):
                raise InvalidParameterError("lambda grid must be positive")
            if grid and len(set(grid)) != len(grid):
                raise InvalidParameterError("lambda grid has duplicates")
            object.__setattr__(self, "grid", grid)

    @classmethod
    def parse(cls, text):
        text = text.strip().lower()
        kind, _, rest = text.partition(":")
        if kind == "fixed":
            return cls("fixed", value=float(rest))
        grid = tuple(float(s) for s in rest.split(",") if s) if rest else ()
        return cls(kind, grid=grid)


def default_policies():
    from .selection import DEFAULT_BIC_GRID

    return {
        "mple": LambdaPolicy("bic", grid=DEFAULT_BIC_GRID),
        "pls": LambdaPolicy("fixed", value=0.1),
        "pfgmm": LambdaPolicy("fixed", value=0.1),
    }


@dataclass(frozen=True)
class StudyResult:
    config: SimConfig
    estimators: tuple
    summaries: tuple
    failures: tuple

    def for_estimator(self, name):
        return [s for s in self.summaries if s.estimator == name]

    def aggregate(self):
        """Mean/SD/MSE rows per estimator, matching the report table layout."""
        truth_head = list(self.config.beta0[:5]) + [math.nan] * max(0, 5 - len(self.config.beta0))
        truth = {
            "beta": truth_head,
            "beta_N": 0.0,
            "sigma2": self.config.sigma2_0,
            "theta": list(self.config.theta0[:2]) + [math.nan] * max(0, 2 - self.config.q),
        }
        rows = []
        for est in self.estimators:
            reps = self.for_estimator(est)
            if not reps:
                continue
            cols = {
                "S_size": np.array([r.active_size for r in reps], dtype=float),
                "TP": np.array([r.true_positives for r in reps], dtype=float),
                "PE": np.array([r.pe for r in reps]),
                **{
                    f"beta_{j + 1}": np.array([r.beta_head[j] for r in reps])
                    for j in range(5)
                },
                "beta_N": np.array([r.beta_noise_mean for r in reps]),
                "sigma2": np.array([r.sigma2 for r in reps]),
                "theta1": np.array(
                    [r.theta[0] if len(r.theta) > 0 else math.nan for r in reps]
                ),
                "theta2": np.array(
                    [r.theta[1] if len(r.theta) > 1 else math.nan for r in reps]
                ),
            }
            truth_map = {
                **{f"beta_{j + 1}": truth["beta"][j] for j in range(5)},
                "beta_N": truth["beta_N"],
                "sigma2": truth["sigma2"],
                "theta1": truth["theta"][0],
                "theta2": truth["theta"][1],
            }
            mean_row = {k: float(np.mean(v)) for k, v in cols.items()}
            sd_row = {k: float(np.std(v, ddof=1)) if len(v) > 1 else 0.0
                      for k, v in cols.items()}
            mse_row = {
                k: float(np.mean((v - truth_map[k]) ** 2)) if k in truth_map else math.nan
                for k, v in cols.items()
            }
            rows.append({"estimator": est, "stat": "mean", "n_reps": len(reps), **mean_row})
            rows.append({"estimator": est, "stat": "sd", "n_reps": len(reps), **sd_row})
            rows.append({"estimator": est, "stat": "mse", "n_reps": len(reps), **mse_row})
        return rows


def _normalize_estimators(estimators):
    if isinstance(estimators, str):
        estimators = [estimators]
    names = tuple(e.strip().lower() for e in estimators)
    for e in names:
        if e not in ESTIMATORS:
            raise InvalidParameterError(
                f"unknown estimator {e!r}; choose from {ESTIMATORS}"
            )
    return names


def _run_rep(cfg, rep, estimators, pen, policies, opts):
    from .selection import mple_bic_path, pfgmm_exbic_path

    ds, truth = generate_with_endo(cfg, rep)
    cov = cfg.cov
    summaries, failures = [], []
    pfgmm_base = None

    def pfgmm_fit():
        nonlocal pfgmm_base
        if pfgmm_base is None:
            policy = policies.get("pfgmm", LambdaPolicy("fixed", value=0.1))
            if policy.kind == "fixed":
                pfgmm_base = fit_pfgmm(ds, pen.with_lam(policy.value), opts=opts)
            elif policy.kind == "exbic":
                pfgmm_base, _ = pfgmm_exbic_path(ds, pen, policy.grid, opts=opts)
            else:
                raise InvalidParameterError("pfgmm supports fixed or exbic policies")
        return pfgmm_base

    for est in estimators:
        try:
            if est == "mple":
                policy = policies.get("mple", LambdaPolicy("bic"))
                if policy.kind == "fixed":
                    fit = fit_mple(ds, pen.with_lam(policy.value), opts=opts, cov=cov)
                else:
                    fit, _ = mple_bic_path(ds, pen, policy.grid, opts=opts, cov=cov)
                beta, eta, convd = fit.beta, fit.eta, fit.converged
            elif est == "pls":
                policy = policies.get("pls", LambdaPolicy("fixed", value=0.1))
                if policy.kind != "fixed":
                    raise InvalidParameterError("pls supports the fixed policy only")
                fit = fit_pls(ds, pen.with_lam(policy.value), opts=opts)
                res = fit_residual_ml(ds, fit.beta, cov=cov)
                beta, eta, convd = fit.beta, (res.theta, res.sigma2), fit.converged
            elif est == "pfgmm":
                fit = pfgmm_fit()
                res = fit_residual_ml(ds, fit.beta, cov=cov)
                beta, eta, convd = fit.beta, (res.theta, res.sigma2), fit.converged
            else:  # pfgmm+2mle / pfgmm+2reml
                base = pfgmm_fit()
                beta = np.zeros(ds.p)
                if len(base.active_set):
                    reduced = ReducedModel.from_dataset(ds, base.active_set)
                    refit = (
                        fit_reduced_ml(reduced, cov=cov)
                        if est.endswith("2mle")
                        else fit_reduced_reml(reduced, cov=cov)
                    )
                    beta[base.active_set.positions] = refit.beta_S
                    eta, convd = (refit.theta, refit.sigma2), refit.converged
                else:
                    res = fit_residual_ml(ds, beta, cov=cov)
                    eta, convd = (res.theta, res.sigma2), base.converged
            summaries.append(
                rep_metrics(rep, est, ds, truth, beta, eta, convd, cov)
            )
        except Exception as exc:  # per-rep failures are recorded, not fatal
            failures.append((rep, est, f"{type(exc).__name__}: {exc}"))
    return summaries, failures


def run_study(cfg, estimators, *, penalty=None, lambda_policy=None,
              opts=None, threads=1):
    """Run cfg.reps replications of the requested estimators.

    lambda_policy may be one LambdaPolicy (applied to every estimator) or a
    dict keyed by estimator name; missing entries fall back to the
    defaults (BIC grid for mple, fixed 0.1 otherwise).  Replications run in
    a process pool when threads > 1; results are identical either way.
    """
    estimators = _normalize_estimators(estimators)
    pen = penalty or Penalty("scad", 0.1, 3.7)
    policies = default_policies()
    if isinstance(lambda_policy, LambdaPolicy):
        policies.update({e.split("+")[0]: lambda_policy for e in estimators})
    elif lambda_policy:
        policies.update(lambda_policy)
    opts = opts or FitOptions(unpenalized=(1, 2))
    if cfg.reps < 1:
        raise InvalidParameterError("need at least one replication")

    args = [(cfg, rep, estimators, pen, policies, opts) for rep in range(cfg.reps)]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_run_rep_star, args))
    else:
        results = [_run_rep(*a) for a in args]

    summaries, failures = [], []
    for reps_out, fails in results:
        summaries.extend(reps_out)
        failures.extend(fails)
    order = {e: k for k, e in enumerate(estimators)}
    summaries.sort(key=lambda s: (s.rep, order[s.estimator]))
    if summaries == [] and failures:
        raise RuntimeError(
            f"all {len(failures)} replication fits failed; first: {failures[0][2]}"
        )
    return StudyResult(
        config=cfg,
        estimators=estimators,
        summaries=tuple(summaries),
        failures=tuple(failures),
    )


def _run_rep_star(args):
    return _run_rep(*args)


def run_sweep(base_cfg, estimators, level, sets, strengths, **kwargs):
    """Study grid over endogenous sets x strengths; returns per-cell rows."""
    rows = []
    for tag in sets:
        for strength in strengths:
            endo = (
                None
                if strength == 0.0
                else EndoConfig(level=level, strength=float(strength),
                                subset=EndoSet.parse(tag))
            )
            cfg = dataclasses.replace(base_cfg, endo=endo)
            study = run_study(cfg, estimators, **kwargs)
            for row in study.aggregate():
                if row["stat"] in ("mean", "sd"):
                    rows.append(
                        {"level": level, "endo_set": tag, "strength": strength, **row}
                    )
    return rows


# ---------------------------------------------------------------------------
# Delimited output
# ---------------------------------------------------------------------------

REP_COLUMNS = (
    "rep", "estimator", "S_size", "TP", "PE",
    "beta_1", "beta_2", "beta_3", "beta_4", "beta_5",
    "beta_N", "sigma2", "theta1", "theta2",
)

AGG_COLUMNS = (
    "estimator", "stat", "n_reps", "S_size", "TP", "PE",
    "beta_1", "beta_2", "beta_3", "beta_4", "beta_5",
    "beta_N", "sigma2", "theta1", "theta2",
)


def _fmt(x):
    if isinstance(x, float):
        return "" if math.isnan(x) else format(x, ".10g")
    return str(x)


def write_rep_csv(path, summaries):
    lines = [",".join(REP_COLUMNS)]
    for s in summaries:
        row = [
            s.rep, s.estimator, s.active_size, s.true_positives, s.pe,
            *s.beta_head, s.beta_noise_mean, s.sigma2,
            s.theta[0] if len(s.theta) > 0 else math.nan,
            s.theta[1] if len(s.theta) > 1 else math.nan,
        ]
        lines.append(",".join(_fmt(v) for v in row))
    _write_lines(path, lines)


def write_aggregate_csv(path, study):
    rows = study.aggregate()
    lines = [",".join(AGG_COLUMNS)]
    for row in rows:
        lines.append(",".join(_fmt(row.get(c, "")) for c in AGG_COLUMNS))
    _write_lines(path, lines)


def write_cells_csv(path, rows):
    if not rows:
        raise InvalidParameterError("no sweep rows to write")
    cols = ("level", "endo_set", "strength", "estimator", "stat", "n_reps",
            "S_size", "TP", "PE")
    lines = [",".join(cols)]
    for row in rows:
        lines.append(",".join(_fmt(row.get(c, "")) for c in cols))
    _write_lines(path, lines)


def _write_lines(path, lines):
    with open(path, "w", newline="") as fh:
        fh.write("\n".join(lines) + "\n")
