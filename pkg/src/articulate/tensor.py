"""Dense third-order tensor algebra.

A :class:`Tensor3` stores its entries in a fixed linearization,
``(i, j, k) -> i*d2*d3 + j*d3 + k`` (C order), and every unfolding is
defined relative to that ordering:

* mode 1: ``d1 x (d2*d3)``, column index ``j*d3 + k``
* mode 2: ``d2 x (d1*d3)``, column index ``i*d3 + k``
* mode 3: ``d3 x (d1*d2)``, column index ``i*d2 + j``

The decomposition factors only modes 1 and 2; mode 3 (the long
positional axis in this toolkit) is left unfactored.

The SVD kernel is a one-sided Jacobi iteration.  It is slower than
LAPACK for large matrices but fully deterministic across platforms,
which keeps serialized models byte-for-byte reproducible.  Unfoldings
here are at most a few dozen rows, so speed is not a concern.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError, ShapeError

__all__ = [
    "Tensor3",
    "mode_unfold",
    "mode_fold",
    "mode_multiply",
    "svd",
    "hosvd",
]

# Relative off-diagonal threshold at which a Jacobi column pair counts
# as orthogonal, and the sweep cap guarding against roundoff stall.
_JACOBI_TOL = 1e-12
_JACOBI_MAX_SWEEPS = 60


@dataclass(frozen=True)
class Tensor3:
    """Immutable dense tensor of order three (float64)."""

    array: np.ndarray

    def __post_init__(self):
        # Always copy so frozen instances cannot alias caller-writable memory.
        arr = np.array(self.array, dtype=np.float64, order="C", copy=True)
        if arr.ndim != 3:
            raise ShapeError(f"Tensor3 needs 3 axes, got {arr.ndim}")
        if min(arr.shape) < 1:
            raise ShapeError(f"Tensor3 dims must be positive, got {arr.shape}")
        if not np.isfinite(arr).all():
            raise NumericError("Tensor3 entries must be finite")
        object.__setattr__(self, "array", arr)
        arr.flags.writeable = False

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.array.shape

    @property
    def data(self) -> np.ndarray:
        """Flat view in linearization order."""
        return self.array.reshape(-1)

    @classmethod
    def from_flat(cls, dims, data) -> "Tensor3":
        d1, d2, d3 = (int(d) for d in dims)
        flat = np.asarray(data, dtype=np.float64)
        if flat.size != d1 * d2 * d3:
            raise ShapeError(
                f"data length {flat.size} != {d1}*{d2}*{d3}"
            )
        return cls(flat.reshape(d1, d2, d3))

    def __eq__(self, other) -> bool:
        if not isinstance(other, Tensor3):
            return NotImplemented
        return self.dims == other.dims and np.array_equal(self.array, other.array)


def _check_mode(mode: int, allowed=(1, 2, 3)) -> int:
    if mode not in allowed:
        raise ShapeError(f"mode must be one of {allowed}, got {mode}")
    return int(mode)


def mode_unfold(t: Tensor3, mode: int) -> np.ndarray:
    """Mode-n unfolding, fibers ordered by the tensor linearization."""
    mode = _check_mode(mode)
    a = t.array
    if mode == 1:
        return a.reshape(a.shape[0], -1).copy()
    return np.moveaxis(a, mode - 1, 0).reshape(a.shape[mode - 1], -1)


def mode_fold(m: np.ndarray, mode: int, dims) -> Tensor3:
    """Inverse of :func:`mode_unfold`; exact (no arithmetic)."""
    mode = _check_mode(mode)
    d1, d2, d3 = (int(d) for d in dims)
    m = np.asarray(m, dtype=np.float64)
    if mode == 1:
        expect = (d1, d2 * d3)
        folded = m.reshape(d1, d2, d3) if m.shape == expect else None
    elif mode == 2:
        expect = (d2, d1 * d3)
        folded = (
            np.moveaxis(m.reshape(d2, d1, d3), 0, 1) if m.shape == expect else None
        )
    else:
        expect = (d3, d1 * d2)
        folded = (
            np.moveaxis(m.reshape(d3, d1, d2), 0, 2) if m.shape == expect else None
        )
    if folded is None:
        raise ShapeError(f"matrix shape {m.shape} does not match unfolding {expect}")
    return Tensor3(folded)


def mode_multiply(t: Tensor3, u: np.ndarray, mode: int) -> Tensor3:
    """n-mode product ``t x_n u``; replaces ``dims[mode]`` by ``u.shape[0]``."""
    mode = _check_mode(mode, allowed=(1, 2))
    u = np.asarray(u, dtype=np.float64)
    if u.ndim != 2:
        raise ShapeError(f"factor must be a matrix, got {u.ndim} axes")
    if u.shape[1] != t.dims[mode - 1]:
        raise ShapeError(
            f"factor has {u.shape[1]} columns, mode-{mode} size is {t.dims[mode - 1]}"
        )
    dims = list(t.dims)
    dims[mode - 1] = u.shape[0]
    return mode_fold(u @ mode_unfold(t, mode), mode, dims)


def _complete_basis(q: np.ndarray, keep: int) -> np.ndarray:
    """Extend ``keep`` orthonormal columns of ``q`` (n x m) to a full n x n basis.

    Columns beyond ``keep`` are rebuilt from canonical basis vectors by
    Gram-Schmidt (twice, for stability); deterministic.
    """
    n = q.shape[0]
    out = np.zeros((n, n))
    out[:, :keep] = q[:, :keep]
    have = keep
    for i in range(n):
        if have == n:
            break
        v = np.zeros(n)
        v[i] = 1.0
        for _ in range(2):
            v -= out[:, :have] @ (out[:, :have].T @ v)
        norm = np.linalg.norm(v)
        if norm > 1e-6:
            out[:, have] = v / norm
            have += 1
    if have != n:
        raise NumericError("basis completion failed")
    return out


def _apply_sign_convention(u: np.ndarray, v: np.ndarray | None):
    """Flip column signs so each left vector's largest-|entry| is positive."""
    for k in range(u.shape[1]):
        col = u[:, k]
        if col[np.argmax(np.abs(col))] < 0:
            u[:, k] = -col
            if v is not None and k < v.shape[1]:
                v[:, k] = -v[:, k]


def svd(m: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Thin SVD ``m = U diag(S) V^T`` by one-sided Jacobi.

    S is non-negative and non-increasing; ordering ties keep the original
    column index.  Each singular vector is flipped so its largest-magnitude
    entry is positive, which removes the sign ambiguity.  U and V always
    have orthonormal columns, including for rank-deficient input.
    """
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"svd expects a matrix, got {a.ndim} axes")
    if not np.isfinite(a).all():
        raise NumericError("svd input must be finite")
    r, c = a.shape
    transposed = r < c
    b = (a.T if transposed else a).copy()  # tall or square: n x k
    n, k = b.shape
    rot = np.eye(k)

    for _ in range(_JACOBI_MAX_SWEEPS):
        rotated = False
        for i in range(k - 1):
            for j in range(i + 1, k):
                bi = b[:, i].copy()
                bj = b[:, j].copy()
                aii = float(bi @ bi)
                ajj = float(bj @ bj)
                aij = float(bi @ bj)
                if aii == 0.0 or ajj == 0.0:
                    continue
                if abs(aij) <= _JACOBI_TOL * np.sqrt(aii * ajj):
                    continue
                rotated = True
                zeta = (ajj - aii) / (2.0 * aij)
                t = np.sign(zeta) / (abs(zeta) + np.hypot(1.0, zeta))
                if zeta == 0.0:
                    t = 1.0
                cs = 1.0 / np.sqrt(1.0 + t * t)
                sn = cs * t
                b[:, i] = cs * bi - sn * bj
                b[:, j] = sn * bi + cs * bj
                ri = rot[:, i].copy()
                rj = rot[:, j]
                rot[:, i] = cs * ri - sn * rj
                rot[:, j] = sn * ri + cs * rj
        if not rotated:
            break

    s = np.linalg.norm(b, axis=0)
    order = np.argsort(-s, kind="stable")
    s = s[order]
    b = b[:, order]
    rot = rot[:, order]

    # Normalize converged columns; rebuild the null-space ones so the
    # orthonormality contract holds even at exact rank deficiency.
    cutoff = (s[0] if s.size else 0.0) * 1e-13
    w = np.zeros_like(b)
    keep = 0
    for idx in range(k):
        if s[idx] > cutoff and s[idx] > 0.0:
            w[:, idx] = b[:, idx] / s[idx]
            keep = idx + 1
        else:
            s[idx] = s[idx] if s[idx] > 0.0 else 0.0
    if keep < k:
        w = _complete_basis(w, keep)[:, :k]

    if transposed:
        u, v = rot, w
    else:
        u, v = w, rot
    _apply_sign_convention(u, v)
    return u, s, v


def _left_factor(unfolding: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Square orthogonal matrix of left singular vectors plus singular values."""
    u, s, _ = svd(unfolding)
    rows = unfolding.shape[0]
    if u.shape[1] < rows:
        u = _complete_basis(u, u.shape[1])
        _apply_sign_convention(u[:, s.size:], None)
    return u, s


def hosvd(t: Tensor3) -> tuple[Tensor3, np.ndarray, np.ndarray]:
    """Two-mode HOSVD: ``t = core x_1 u1 x_2 u2`` with square orthogonal factors.

    ``u1`` (d1 x d1) and ``u2`` (d2 x d2) hold the left singular vectors of
    the mode-1 and mode-2 unfoldings; ``core = t x_1 u1^T x_2 u2^T``.  Mode 3
    is not factored.
    """
    u1, _ = _left_factor(mode_unfold(t, 1))
    u2, _ = _left_factor(mode_unfold(t, 2))
    core = mode_multiply(mode_multiply(t, u1.T, 1), u2.T, 2)
    return core, u1, u2
