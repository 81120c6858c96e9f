"""Proxy covariance for the unknown variance components.

The estimators whiten data with Vz_i = I + Z_i M Z_i' per group, where M is
a q x q stand-in for sigma^{-2} Psi.  The default proxy is log(n) times the
identity, which needs no knowledge of the variance parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import DimensionError, InvalidParameterError
from .linalg import block_apply, inv_sqrtm_psd_array


@dataclass(frozen=True)
class ProxySpec:
    """Proxy matrix choice: kind 'logn' (log(n) * I_q) or 'custom' (fixed PSD)."""

    kind: str = "logn"
    matrix: np.ndarray = None

    def __post_init__(self):
        if self.kind not in ("logn", "custom"):
            raise InvalidParameterError(f"unknown proxy kind {self.kind!r}")
        if self.kind == "custom":
            m = np.atleast_2d(np.asarray(self.matrix, dtype=float))
            if m.shape[0] != m.shape[1]:
                raise InvalidParameterError("custom proxy must be square")
            if not np.all(np.isfinite(m)):
                raise InvalidParameterError("custom proxy must be finite")
            if np.abs(m - m.T).max() > 1e-8 * max(1.0, np.abs(m).max()):
                raise InvalidParameterError("custom proxy must be symmetric")
            m = 0.5 * (m + m.T)
            if m.size and float(np.linalg.eigvalsh(m)[0]) < -1e-10:
                raise InvalidParameterError("custom proxy must be positive semidefinite")
            object.__setattr__(self, "matrix", m)
        elif self.matrix is not None:
            raise InvalidParameterError("logn proxy takes no matrix")

    def materialize(self, n, q):
        """The q x q proxy matrix for a dataset with n total observations."""
        if self.kind == "logn":
            return math.log(n) * np.eye(q)
        if self.matrix.shape != (q, q):
            raise DimensionError(
                f"custom proxy is {self.matrix.shape}, data needs ({q}, {q})"
            )
        return self.matrix


@dataclass(frozen=True)
class ProxyCov:
    """Materialised per-group proxy covariance blocks and their inverse roots."""

    blocks: tuple
    inv_sqrt_blocks: tuple
    group_sizes: np.ndarray
    proxy_matrix: np.ndarray

    def whiten(self, arr):
        """Apply Vz^{-1/2} to stacked rows of a vector or matrix."""
        return block_apply(self.inv_sqrt_blocks, arr, self.group_sizes)

    def inv_blocks(self):
        return tuple(b @ b for b in self.inv_sqrt_blocks)


def build_proxy_cov(ds, spec=None):
    """Blocks Vz_i = I + Z_i M Z_i' together with their inverse square roots."""
    spec = spec or ProxySpec()
    m = spec.materialize(ds.n, ds.q)
    blocks, roots = [], []
    for _, _, _, Zi in ds.iter_groups():
        vz = Zi @ m @ Zi.T
        vz[np.diag_indices_from(vz)] += 1.0
        vz = 0.5 * (vz + vz.T)
        blocks.append(vz)
        roots.append(inv_sqrtm_psd_array(vz))
    return ProxyCov(
        blocks=tuple(blocks),
        inv_sqrt_blocks=tuple(roots),
        group_sizes=ds.group_sizes,
        proxy_matrix=m,
    )
