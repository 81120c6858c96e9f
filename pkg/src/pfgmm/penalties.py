"""Folded-concave penalty family: SCAD, MCP, lasso and hard thresholding.

Provides values, derivatives, the local-concavity functional used in the
selection-consistency conditions, an exact minimiser for penalised
quadratic coordinate subproblems, and finite-sample surrogate checks for
the penalty/dimension assumption set.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import InvalidParameterError

FAMILIES = ("scad", "mcp", "l1", "hard")

_DEFAULT_SHAPE = {"scad": 3.7, "mcp": 3.0}


@dataclass(frozen=True)
class Penalty:
    """One member of the folded-concave family.

    lam is the regularisation level; shape is the SCAD a (> 2) or the MCP
    gamma (> 1) and is ignored for l1 / hard thresholding.
    """

    family: str
    lam: float
    shape: float = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise InvalidParameterError(f"unknown penalty family {self.family!r}")
        if not np.isfinite(self.lam) or self.lam <= 0:
            raise InvalidParameterError("lambda must be positive")
        shape = self.shape
        if self.family in _DEFAULT_SHAPE and shape is None:
            shape = _DEFAULT_SHAPE[self.family]
        if self.family == "scad" and not shape > 2:
            raise InvalidParameterError("SCAD shape a must exceed 2")
        if self.family == "mcp" and not shape > 1:
            raise InvalidParameterError("MCP shape gamma must exceed 1")
        if self.family in ("l1", "hard"):
            shape = None
        object.__setattr__(self, "shape", shape)

    def with_lam(self, lam):
        return Penalty(self.family, lam, self.shape)

    # -- value / derivative -------------------------------------------------

    def value(self, t):
        """P(t) for t >= 0 (scalar or array)."""
        t = np.asarray(t, dtype=float)
        if np.any(t < 0):
            raise InvalidParameterError("penalty argument must be nonnegative")
        lam, a = self.lam, self.shape
        if self.family == "l1":
            out = lam * t
        elif self.family == "scad":
            out = np.where(
                t <= lam,
                lam * t,
                np.where(
                    t <= a * lam,
                    lam**2
                    + (a * lam * (t - lam) - 0.5 * (t**2 - lam**2)) / (a - 1.0),
                    0.5 * (a + 1.0) * lam**2,
                ),
            )
        elif self.family == "mcp":
            out = np.where(
                t <= a * lam, lam * t - t**2 / (2.0 * a), 0.5 * a * lam**2
            )
        else:  # hard thresholding
            out = np.where(t < lam, lam**2 - (lam - t) ** 2, lam**2)
        return out if out.ndim else float(out)

    def deriv(self, t):
        """P'(t) for t > 0 (scalar or array); nonincreasing in t."""
        t = np.asarray(t, dtype=float)
        if np.any(t <= 0):
            raise InvalidParameterError("derivative defined on t > 0 only")
        lam, a = self.lam, self.shape
        if self.family == "l1":
            out = np.full_like(t, lam)
        elif self.family == "scad":
            out = np.where(
                t <= lam,
                lam,
                np.clip(a * lam - t, 0.0, None) / (a - 1.0),
            )
        elif self.family == "mcp":
            out = np.clip(lam - t / a, 0.0, None)
        else:
            out = 2.0 * np.clip(lam - t, 0.0, None)
        return out if out.ndim else float(out)

    def deriv_at_zero(self):
        """Right limit P'(0+)."""
        if self.family == "hard":
            return 2.0 * self.lam
        return self.lam

    def flat_threshold(self):
        """Smallest t above which the penalty stops shrinking (P' = 0).

        The lasso never flattens; 2*lambda is returned as the working
        boundary between shrinkage-dominated and signal-sized coefficients.
        """
        if self.family == "scad":
            return self.shape * self.lam
        if self.family == "mcp":
            return self.shape * self.lam
        if self.family == "hard":
            return self.lam
        return 2.0 * self.lam

    # -- concavity ----------------------------------------------------------

    def _concave_interval(self):
        """Closed interval on which -P'' attains its maximum, plus that value."""
        lam, a = self.lam, self.shape
        if self.family == "l1":
            return (0.0, 0.0), 0.0
        if self.family == "scad":
            return (lam, a * lam), 1.0 / (a - 1.0)
        if self.family == "mcp":
            return (0.0, a * lam), 1.0 / a
        return (0.0, lam), 2.0

    def concavity_sup(self, lo, hi=math.inf):
        """sup of the local concavity -P'' over |t| in [lo, hi]."""
        (clo, chi), kappa = self._concave_interval()
        if kappa == 0.0:
            return 0.0
        return kappa if max(lo, clo) <= min(hi, chi) else 0.0

    def local_concavity(self, beta):
        """Maximal local concavity of P along the coordinates of |beta|.

        The sup of derivative difference quotients in a shrinking window
        around each |beta_j|; at a kink this is the larger one-sided value.
        All components must be nonzero.
        """
        beta = np.abs(np.asarray(beta, dtype=float).ravel())
        if beta.size == 0:
            return 0.0
        if np.any(beta == 0.0):
            raise InvalidParameterError(
                "local concavity is defined near nonzero coordinates only"
            )
        return max(self.concavity_sup(b, b) for b in beta)


def parse_penalty(text):
    """Parse config strings like ``scad:lambda=0.1,a=3.7`` or ``l1:lambda=0.1``."""
    text = text.strip().lower()
    family, _, rest = text.partition(":")
    if family not in FAMILIES:
        raise InvalidParameterError(f"unknown penalty family {family!r}")
    lam, shape = None, None
    for item in filter(None, (s.strip() for s in rest.split(","))):
        key, _, val = item.partition("=")
        key = key.strip()
        try:
            fval = float(val)
        except ValueError:
            raise InvalidParameterError(f"bad penalty parameter {item!r}") from None
        if key == "lambda":
            lam = fval
        elif key in ("a", "gamma", "shape"):
            shape = fval
        else:
            raise InvalidParameterError(f"unknown penalty parameter {key!r}")
    if lam is None:
        raise InvalidParameterError("penalty string must set lambda")
    return Penalty(family, lam, shape)


# ---------------------------------------------------------------------------
# Exact penalised quadratic minimiser
# ---------------------------------------------------------------------------


def penalized_quadratic_min(nu, z, pen=None, scale=1.0):
    """argmin_b  nu*b^2/2 - z*b + scale*P(|b|), with nu > 0.

    The objective is piecewise quadratic for every family, so the exact
    minimiser is found by evaluating the stationary point of each piece
    (clipped to its region) together with the region boundaries.  Ties go
    to the candidate closer to zero.
    """
    if nu <= 0:
        raise InvalidParameterError("quadratic coefficient must be positive")
    if pen is None or scale == 0.0:
        return z / nu
    az = abs(z)
    lam, a, c = pen.lam, pen.shape, scale
    cands = [0.0]
    if pen.family == "l1":
        cands.append(max(0.0, az - c * lam) / nu)
    elif pen.family == "scad":
        cands.append(min(max(0.0, (az - c * lam) / nu), lam))
        denom = nu - c / (a - 1.0)
        if denom > 0:
            t2 = (az - c * a * lam / (a - 1.0)) / denom
            cands.append(min(max(t2, lam), a * lam))
        cands.extend([lam, a * lam, max(a * lam, az / nu)])
    elif pen.family == "mcp":
        denom = nu - c / a
        if denom > 0:
            cands.append(min(max(0.0, (az - c * lam) / denom), a * lam))
        cands.extend([a * lam, max(a * lam, az / nu)])
    else:  # hard thresholding
        denom = nu - 2.0 * c
        if denom > 0:
            cands.append(min(max(0.0, (az - 2.0 * c * lam) / denom), lam))
        cands.extend([lam, max(lam, az / nu)])

    best_t, best_val = 0.0, 0.0  # objective at t = 0 is exactly 0
    for t in sorted(set(cands)):
        if t <= 0.0:
            continue
        val = 0.5 * nu * t * t - az * t + c * pen.value(t)
        if val < best_val - 1e-15 * max(1.0, abs(best_val)):
            best_t, best_val = t, val
    return math.copysign(best_t, z) if best_t else 0.0


# ---------------------------------------------------------------------------
# Assumption surrogates
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AssumptionCheck:
    """One finite-sample surrogate check; passed is None for report-only rows."""

    name: str
    lhs: float
    rhs: float
    passed: bool = None

    def __str__(self):
        verdict = {True: "pass", False: "FAIL", None: "info"}[self.passed]
        return f"{self.name}: lhs={self.lhs:.4g} rhs={self.rhs:.4g} [{verdict}]"


@dataclass(frozen=True)
class AssumptionReport:
    checks: tuple

    def __getitem__(self, name):
        for chk in self.checks:
            if chk.name == name:
                return chk
        raise KeyError(name)

    @property
    def passed(self):
        return all(c.passed for c in self.checks if c.passed is not None)

    def __str__(self):
        return "\n".join(str(c) for c in self.checks)


def check_assumptions(pen, n, p, s, d_n):
    """Finite-sample surrogates for the penalty / dimension conditions.

    Verdict checks: sqrt(s) P'(d) < d; s sqrt(log p / n) < d; P'(d) s^2 <= 1;
    sup of the local concavity over coefficients compatible with signal
    strength d (|beta_j| >= 2d - d/4) below 1 / sqrt(s log p).  The
    composite small-o rate involving P'(0+) is reported with raw margins
    only, since no finite-sample threshold for it is defensible.
    """
    if d_n <= 0:
        raise InvalidParameterError("signal strength must be positive")
    if min(n, p) < 1 or s < 0:
        raise InvalidParameterError("need n, p >= 1 and s >= 0")
    dp = pen.deriv(d_n)
    log_p = math.log(p)
    checks = []
    lhs = math.sqrt(s) * dp
    checks.append(AssumptionCheck("signal_vs_deriv", lhs, d_n, lhs < d_n))
    lhs = s * math.sqrt(log_p / n)
    checks.append(AssumptionCheck("dimension_vs_signal", lhs, d_n, lhs < d_n))
    lhs = dp * s * s
    checks.append(AssumptionCheck("deriv_sparsity_product", lhs, 1.0, lhs <= 1.0))
    zsup = pen.concavity_sup(2.0 * d_n - d_n / 4.0)
    rhs = 1.0 / math.sqrt(s * log_p) if s > 0 else math.inf
    checks.append(AssumptionCheck("concavity_near_signal", zsup, rhs, zsup < rhs))
    composite = (
        s * dp + s * math.sqrt(log_p / n) + (s**3 * math.log(s) / n if s > 1 else 0.0)
    )
    checks.append(
        AssumptionCheck("composite_rate_vs_deriv_at_zero", composite, pen.deriv_at_zero())
    )
    return AssumptionReport(tuple(checks))
