"""Grouped data containers and Gaussian likelihood for linear mixed models.

A dataset holds I groups; group i carries a response y_i (length n_i), a
fixed-effect design X_i (n_i x p) and a random-effect design Z_i (n_i x q).
Conditionally on the designs, y_i is Gaussian with mean X_i beta and
covariance sigma^2 * V_i, where V_i = sigma^{-2} Z_i Psi Z_i^T + I_{n_i}.
Everything is represented block-per-group; no n x n matrix is ever formed
outside of test oracles.
"""

from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

ZERO_THETA_TOL = 1e-12


class InvalidParameterError(ValueError):
    """Non-finite or out-of-range model parameters."""


class DimensionError(ValueError):
    """Shape mismatch between data and parameters."""


class ConditioningError(RuntimeError):
    """Numerically singular covariance block.

    Carries the offending group index (0-based position in the dataset)
    when the failure is attributable to a single group.
    """

    def __init__(self, message, group=None):
        if group is not None:
            message = f"{message} (group index {group})"
        super().__init__(message)
        self.group = group


class DataError(ValueError):
    """Malformed input data file; carries the 1-based row number if known."""

    def __init__(self, message, row=None):
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)
        self.row = row


# ---------------------------------------------------------------------------
# Containers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GroupedDataset:
    """Stacked grouped data with implicit block-diagonal random-effect design.

    y has length n = sum(group_sizes); X is n x p; Z stacks the per-group
    random-effect designs row-wise (n x q), understood block-diagonally.
    """

    y: np.ndarray
    X: np.ndarray
    Z: np.ndarray
    group_sizes: np.ndarray
    group_ids: tuple = None

    def __post_init__(self):
        object.__setattr__(self, "y", np.asarray(self.y, dtype=float).ravel())
        object.__setattr__(self, "X", np.atleast_2d(np.asarray(self.X, dtype=float)))
        object.__setattr__(self, "Z", np.atleast_2d(np.asarray(self.Z, dtype=float)))
        sizes = np.asarray(self.group_sizes, dtype=int)
        object.__setattr__(self, "group_sizes", sizes)
        if sizes.ndim != 1 or len(sizes) < 1:
            raise DimensionError("need at least one group")
        if np.any(sizes < 1):
            raise DimensionError("every group needs at least one observation")
        n = int(sizes.sum())
        if self.y.shape != (n,):
            raise DimensionError(f"y has length {len(self.y)}, expected {n}")
        if self.X.shape[0] != n:
            raise DimensionError(f"X has {self.X.shape[0]} rows, expected {n}")
        if self.Z.shape[0] != n:
            raise DimensionError(f"Z has {self.Z.shape[0]} rows, expected {n}")
        if self.group_ids is not None and len(self.group_ids) != len(sizes):
            raise DimensionError("group_ids length must match group count")

    @property
    def n(self):
        return len(self.y)

    @property
    def p(self):
        return self.X.shape[1]

    @property
    def q(self):
        return self.Z.shape[1]

    @property
    def n_groups(self):
        return len(self.group_sizes)

    @property
    def group_slices(self):
        offsets = np.concatenate([[0], np.cumsum(self.group_sizes)])
        return tuple(slice(int(a), int(b)) for a, b in zip(offsets[:-1], offsets[1:]))

    def group(self, i):
        sl = self.group_slices[i]
        return self.y[sl], self.X[sl], self.Z[sl]

    def iter_groups(self):
        for sl in self.group_slices:
            yield sl, self.y[sl], self.X[sl], self.Z[sl]

    @classmethod
    def from_groups(cls, groups, group_ids=None):
        """Assemble from an iterable of (y_i, X_i, Z_i) triples."""
        groups = list(groups)
        if not groups:
            raise DimensionError("need at least one group")
        ys, Xs, Zs = zip(*groups)
        sizes = [len(np.ravel(y)) for y in ys]
        return cls(
            y=np.concatenate([np.ravel(y) for y in ys]),
            X=np.vstack([np.atleast_2d(x) for x in Xs]),
            Z=np.vstack([np.atleast_2d(z) for z in Zs]),
            group_sizes=np.array(sizes),
            group_ids=tuple(group_ids) if group_ids is not None else None,
        )


@dataclass(frozen=True)
class CovStructure:
    """Random-effect covariance family: Psi as a function of theta.

    diagonal: Psi = Diag(theta_1, ..., theta_q), q parameters.
    isotropic: Psi = theta_1 * I_q, one parameter.
    """

    kind: str
    q: int

    _KINDS = ("diagonal", "isotropic")

    def __post_init__(self):
        if self.kind not in self._KINDS:
            raise InvalidParameterError(f"unknown covariance kind {self.kind!r}")
        if self.q < 0:
            raise InvalidParameterError("q must be nonnegative")

    @classmethod
    def diagonal(cls, q):
        return cls("diagonal", q)

    @classmethod
    def isotropic(cls, q):
        return cls("isotropic", q)

    @property
    def n_params(self):
        return self.q if self.kind == "diagonal" else min(1, self.q)

    def psi(self, theta):
        """Materialise the q x q covariance; tiny entries are clipped to 0."""
        theta = np.asarray(theta, dtype=float).ravel()
        if len(theta) != self.n_params:
            raise DimensionError(
                f"theta has {len(theta)} entries, expected {self.n_params}"
            )
        if not np.all(np.isfinite(theta)):
            raise InvalidParameterError("non-finite theta")
        if np.any(theta < -ZERO_THETA_TOL):
            raise InvalidParameterError("theta components must be nonnegative")
        theta = np.where(np.abs(theta) < ZERO_THETA_TOL, 0.0, theta)
        if self.kind == "diagonal":
            return np.diag(theta)
        return float(theta[0] if len(theta) else 0.0) * np.eye(self.q)

    def diag_variances(self, theta):
        """Diagonal of Psi as a length-q vector."""
        return np.diag(self.psi(theta)).copy()


@dataclass(frozen=True)
class ModelParams:
    """Fixed effects plus variance parameters eta = (theta, sigma2)."""

    beta: np.ndarray
    theta: np.ndarray
    sigma2: float
    cov: CovStructure

    def __post_init__(self):
        object.__setattr__(self, "beta", np.asarray(self.beta, dtype=float).ravel())
        object.__setattr__(self, "theta", np.asarray(self.theta, dtype=float).ravel())
        if not np.all(np.isfinite(self.beta)):
            raise InvalidParameterError("non-finite beta")
        if not np.isfinite(self.sigma2) or self.sigma2 <= 0:
            raise InvalidParameterError("sigma2 must be finite and positive")
        # delegates finiteness / nonnegativity checks on theta
        self.cov.psi(self.theta)

    @property
    def p(self):
        return len(self.beta)

    def psi(self):
        return self.cov.psi(self.theta)


@dataclass(frozen=True)
class ActiveSet:
    """Sorted set of 1-based coefficient indices (matching the x_j labels)."""

    indices: tuple

    def __post_init__(self):
        idx = tuple(sorted({int(j) for j in self.indices}))
        if idx and idx[0] < 1:
            raise InvalidParameterError("active-set indices are 1-based")
        object.__setattr__(self, "indices", idx)

    @classmethod
    def from_beta(cls, beta, zero_tol=1e-8):
        beta = np.asarray(beta, dtype=float).ravel()
        return cls(tuple(int(j) + 1 for j in np.flatnonzero(np.abs(beta) > zero_tol)))

    @property
    def positions(self):
        """0-based column positions for numpy indexing."""
        return np.array(self.indices, dtype=int) - 1

    def __len__(self):
        return len(self.indices)

    def __iter__(self):
        return iter(self.indices)

    def __contains__(self, j):
        return int(j) in self.indices

    def signal_strength(self, beta):
        """d = half the smallest |beta_j| over the set; inf when empty."""
        if not self.indices:
            return math.inf
        beta = np.asarray(beta, dtype=float).ravel()
        return 0.5 * float(np.min(np.abs(beta[self.positions])))


# ---------------------------------------------------------------------------
# Covariance blocks and likelihood
# ---------------------------------------------------------------------------


def cov_blocks(ds, params):
    """Per-group blocks V_i = sigma^{-2} Z_i Psi Z_i^T + I_{n_i}.

    The marginal covariance of y_i is sigma^2 * V_i.  Every block is
    symmetric with eigenvalues >= 1.
    """
    if params.cov.q != ds.q:
        raise DimensionError(f"covariance is for q={params.cov.q}, data has q={ds.q}")
    psi = params.psi() / params.sigma2
    blocks = []
    for _, _, _, Zi in ds.iter_groups():
        Vi = Zi @ psi @ Zi.T
        Vi[np.diag_indices_from(Vi)] += 1.0
        blocks.append(0.5 * (Vi + Vi.T))
    return blocks


def scaled_cov_blocks(ds, params):
    """Per-group marginal covariances sigma^2 * V_i = Z_i Psi Z_i^T + sigma^2 I."""
    psi = params.psi()
    blocks = []
    for _, _, _, Zi in ds.iter_groups():
        Si = Zi @ psi @ Zi.T
        Si[np.diag_indices_from(Si)] += params.sigma2
        blocks.append(0.5 * (Si + Si.T))
    return blocks


def log_likelihood(ds, params):
    """Exact Gaussian log-likelihood, summed over groups.

    Returns -1/2 [n log(2 pi) + log|sigma^2 V| + (y-Xb)' (sigma^2 V)^{-1} (y-Xb)]
    using one Cholesky factorisation per group block.
    """
    if len(params.beta) != ds.p:
        raise DimensionError(f"beta has length {len(params.beta)}, expected {ds.p}")
    resid = ds.y - ds.X @ params.beta
    out = -0.5 * ds.n * math.log(2.0 * math.pi)
    for i, (block, sl) in enumerate(zip(scaled_cov_blocks(ds, params), ds.group_slices)):
        try:
            c, low = cho_factor(block, lower=True, check_finite=False)
        except np.linalg.LinAlgError as exc:
            raise ConditioningError(f"singular covariance block: {exc}", group=i) from exc
        ri = resid[sl]
        out -= float(np.log(np.diag(c)).sum())
        out -= 0.5 * float(ri @ cho_solve((c, low), ri, check_finite=False))
    return out


def profile_quadratic(ds, beta, vtilde_inv_blocks):
    """Quadratic form (y - X beta)' Vtilde^{-1} (y - X beta) over group blocks."""
    beta = np.asarray(beta, dtype=float).ravel()
    if len(beta) != ds.p:
        raise DimensionError(f"beta has length {len(beta)}, expected {ds.p}")
    if len(vtilde_inv_blocks) != ds.n_groups:
        raise DimensionError("one inverse block per group required")
    resid = ds.y - ds.X @ beta
    total = 0.0
    for sl, block in zip(ds.group_slices, vtilde_inv_blocks):
        ri = resid[sl]
        if block.shape != (len(ri), len(ri)):
            raise DimensionError("inverse block does not match group size")
        total += float(ri @ block @ ri)
    return total


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------

_X_COL = re.compile(r"^x_(\d+)$")
_Z_COL = re.compile(r"^z_(\d+)$")


def read_csv(path):
    """Load grouped data from CSV with columns group_id, y, x_1..x_p, z_1..z_q.

    Groups need not be contiguous; rows are gathered by group_id in order of
    first appearance.  A header row is required; z columns are optional
    (q = 0 fits a plain regression).
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError("empty file") from None
        header = [h.strip() for h in header]
        cols = {name: k for k, name in enumerate(header)}
        if "group_id" not in cols or "y" not in cols:
            raise DataError("header must contain group_id and y columns", row=1)
        x_cols = sorted(
            ((int(m.group(1)), k) for name, k in cols.items() if (m := _X_COL.match(name))),
        )
        z_cols = sorted(
            ((int(m.group(1)), k) for name, k in cols.items() if (m := _Z_COL.match(name))),
        )
        if not x_cols:
            raise DataError("no x_j covariate columns found", row=1)
        if [j for j, _ in x_cols] != list(range(1, len(x_cols) + 1)):
            raise DataError("x_j columns must be numbered 1..p without gaps", row=1)
        if [j for j, _ in z_cols] != list(range(1, len(z_cols) + 1)):
            raise DataError("z_j columns must be numbered 1..q without gaps", row=1)

        by_group = {}
        for rownum, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(
                    f"expected {len(header)} fields, found {len(row)}", row=rownum
                )
            try:
                yv = float(row[cols["y"]])
                xv = [float(row[k]) for _, k in x_cols]
                zv = [float(row[k]) for _, k in z_cols]
            except ValueError as exc:
                raise DataError(f"non-numeric value ({exc})", row=rownum) from None
            if not np.all(np.isfinite([yv, *xv, *zv])):
                raise DataError("non-finite value", row=rownum)
            gid = row[cols["group_id"]].strip()
            by_group.setdefault(gid, []).append((yv, xv, zv))

    if not by_group:
        raise DataError("no data rows")
    groups, ids = [], []
    for gid, rows in by_group.items():
        ys = np.array([r[0] for r in rows])
        Xs = np.array([r[1] for r in rows])
        Zs = (
            np.array([r[2] for r in rows])
            if z_cols
            else np.zeros((len(rows), 0))
        )
        groups.append((ys, Xs, Zs))
        ids.append(gid)
    return GroupedDataset.from_groups(groups, group_ids=ids)
