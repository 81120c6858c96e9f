"""SPD matrix primitives: principal square roots, inverse roots, eigen extrema.

All inputs here are small per-group blocks, so the symmetric
eigendecomposition route is used throughout; accuracy contracts are what
matter, not the factorisation algorithm.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import ConditioningError


def _require_symmetric(a, tol):
    a = np.atleast_2d(np.asarray(a, dtype=float))
    if a.shape[0] != a.shape[1]:
        raise ValueError(f"matrix must be square, got shape {a.shape}")
    scale = max(1.0, float(np.abs(a).max()))
    if np.abs(a - a.T).max() > tol * scale:
        raise ValueError("matrix is not symmetric within tolerance")
    return 0.5 * (a + a.T)


@dataclass(frozen=True)
class SpdBlock:
    """A validated symmetric positive-definite block."""

    data: np.ndarray
    tolerance: float = 1e-8

    def __post_init__(self):
        a = _require_symmetric(self.data, self.tolerance)
        lo = float(np.linalg.eigvalsh(a)[0])
        if lo <= 0.0:
            raise ConditioningError(
                f"matrix is not positive definite (min eigenvalue {lo:.3e})"
            )
        object.__setattr__(self, "data", a)

    @property
    def dim(self):
        return self.data.shape[0]


def _eig_psd(a, tol):
    a = _require_symmetric(a, tol)
    w, u = np.linalg.eigh(a)
    lo = float(w[0])
    if lo <= 0.0 and not np.allclose(a, 0.0):
        raise ConditioningError(
            f"matrix is not positive definite (min eigenvalue {lo:.3e})"
        )
    return w, u


def sqrtm_psd_array(a, tol=1e-8):
    """Principal square root of a symmetric PSD array."""
    w, u = _eig_psd(a, tol)
    s = (u * np.sqrt(np.clip(w, 0.0, None))) @ u.T
    return 0.5 * (s + s.T)


def inv_sqrtm_psd_array(a, tol=1e-8):
    """Inverse principal square root of a symmetric PD array."""
    w, u = _eig_psd(a, tol)
    if w[0] <= 0.0:
        raise ConditioningError(
            f"matrix is singular (min eigenvalue {float(w[0]):.3e})"
        )
    s = (u / np.sqrt(w)) @ u.T
    return 0.5 * (s + s.T)


def sqrtm_spd(block):
    """Principal square root; SpdBlock in, SpdBlock out (arrays pass through)."""
    if isinstance(block, SpdBlock):
        return SpdBlock(sqrtm_psd_array(block.data, block.tolerance), block.tolerance)
    return sqrtm_psd_array(block)


def inv_sqrtm_spd(block):
    """Principal square root of the inverse."""
    if isinstance(block, SpdBlock):
        return SpdBlock(inv_sqrtm_psd_array(block.data, block.tolerance), block.tolerance)
    return inv_sqrtm_psd_array(block)


def eig_extrema(a, tol=1e-8):
    """(smallest, largest) eigenvalue of a symmetric matrix."""
    a = _require_symmetric(a, tol)
    w = np.linalg.eigvalsh(a)
    return float(w[0]), float(w[-1])


def block_apply(blocks, arr, group_sizes):
    """Apply a block-diagonal operator to stacked rows of a vector/matrix."""
    arr = np.asarray(arr, dtype=float)
    out = np.empty_like(arr, dtype=float)
    offset = 0
    for block, size in zip(blocks, group_sizes):
        sl = slice(offset, offset + int(size))
        out[sl] = block @ arr[sl]
        offset += int(size)
    return out
