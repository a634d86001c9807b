"""Dense third-order tensor algebra.

Tensors are plain ``float64`` arrays whose last three axes are the tensor
modes ``(d1, d2, d3)``; any leading axes are treated as a batch, so the
same routines drive a single cube or a stack of thousands of cubes.

Flattening convention (used by the on-disk volume format): element
``(i1, i2, i3)`` lives at linear index ``i1 + d1*i2 + d1*d2*i3``, i.e.
Fortran order.

Unfolding convention (cyclic): in the mode-1 unfolding element
``(i1, i2, i3)`` sits in column ``i2 + d2*i3``; mode 2 uses ``i3 + d3*i1``
and mode 3 uses ``i1 + d1*i2``. With it,

    unfold(C x1 Q1 x2 Q2 x3 Q3, 1) == Q1 @ unfold(C, 1) @ kron(Q3, Q2).T
    unfold(C x1 Q1 x2 Q2 x3 Q3, 2) == Q2 @ unfold(C, 2) @ kron(Q1, Q3).T
    unfold(C x1 Q1 x2 Q2 x3 Q3, 3) == Q3 @ unfold(C, 3) @ kron(Q2, Q1).T
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

__all__ = [
    "HosvdFactors",
    "TensorError",
    "as_tensor",
    "flatten",
    "unflatten",
    "unfold",
    "fold",
    "mode_product",
    "multi_mode_product",
    "thin_svd",
    "left_singular",
    "hosvd",
    "reconstruct",
    "kron_others",
]

# Axis permutation (relative to the trailing three axes) that puts the
# unfolding's row index first and its fastest-varying column index last.
_UNFOLD_AXES = {1: (0, 2, 1), 2: (1, 0, 2), 3: (2, 1, 0)}


class TensorError(ValueError):
    """Raised on dimension mismatches or failed factorizations."""


class HosvdFactors(NamedTuple):
    core: np.ndarray
    q1: np.ndarray
    q2: np.ndarray
    q3: np.ndarray

    @property
    def factors(self):
        return (self.q1, self.q2, self.q3)


def _check_mode(mode):
    if mode not in (1, 2, 3):
        raise TensorError(f"mode must be 1, 2 or 3, got {mode!r}")


def as_tensor(data, dims=None):
    """Return a float64 tensor, optionally from Fortran-flattened ``data``."""
    arr = np.asarray(data, dtype=np.float64)
    if dims is None:
        if arr.ndim < 3:
            raise TensorError(f"expected at least 3 axes, got shape {arr.shape}")
        return arr
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or min(dims) < 1:
        raise TensorError(f"dims must be three positive integers, got {dims}")
    if arr.size != dims[0] * dims[1] * dims[2]:
        raise TensorError(f"data length {arr.size} does not match dims {dims}")
    return arr.reshape(dims, order="F")


def flatten(t):
    """Linear data in the documented ``i1 + d1*i2 + d1*d2*i3`` layout."""
    return np.asarray(t, dtype=np.float64).reshape(-1, order="F")


def unflatten(data, dims):
    return as_tensor(data, dims)


def _trailing(axes, ndim):
    lead = tuple(range(ndim - 3))
    return lead + tuple(ndim - 3 + a for a in axes)


def unfold(t, mode):
    """Mode-``mode`` unfolding, shape ``(..., d_mode, prod(other dims))``."""
    _check_mode(mode)
    t = np.asarray(t)
    perm = _trailing(_UNFOLD_AXES[mode], t.ndim)
    moved = t.transpose(perm)
    rows = moved.shape[-3]
    return moved.reshape(moved.shape[:-3] + (rows, moved.shape[-2] * moved.shape[-1]))


def fold(m, mode, dims):
    """Inverse of :func:`unfold`; ``dims`` are the three tensor dims."""
    _check_mode(mode)
    m = np.asarray(m)
    d = tuple(int(x) for x in dims)
    axes = _UNFOLD_AXES[mode]
    moved_dims = tuple(d[a] for a in axes)
    if m.shape[-2:] != (moved_dims[0], moved_dims[1] * moved_dims[2]):
        raise TensorError(
            f"cannot fold matrix of shape {m.shape[-2:]} along mode {mode} into dims {d}"
        )
    moved = m.reshape(m.shape[:-2] + moved_dims)
    inverse = np.argsort(axes)
    return moved.transpose(_trailing(tuple(inverse), moved.ndim))


def mode_product(t, a, mode):
    """``t x_mode a``: multiply every mode-``mode`` fiber of ``t`` by ``a``.

    ``a`` may carry the same leading batch axes as ``t``.
    """
    _check_mode(mode)
    t = np.asarray(t)
    a = np.asarray(a)
    if a.shape[-1] != t.shape[-4 + mode]:
        raise TensorError(
            f"matrix with {a.shape[-1]} columns cannot multiply mode {mode} of size "
            f"{t.shape[-4 + mode]}"
        )
    lead = t.shape[:-3]
    d1, d2, d3 = t.shape[-3:]
    if mode == 1:
        out = a @ t.reshape(lead + (d1, d2 * d3))
        return out.reshape(out.shape[:-2] + (a.shape[-2], d2, d3))
    if mode == 2:
        return a[..., None, :, :] @ t
    out = t.reshape(lead + (d1 * d2, d3)) @ np.swapaxes(a, -1, -2)
    return out.reshape(out.shape[:-2] + (d1, d2, a.shape[-2]))


def multi_mode_product(t, factors, transpose=False):
    """Apply ``t x1 f1 x2 f2 x3 f3`` (or with each factor transposed)."""
    out = t
    for mode, f in enumerate(factors, start=1):
        out = mode_product(out, np.swapaxes(f, -1, -2) if transpose else f, mode)
    return out


def reconstruct(core, factors):
    return multi_mode_product(core, factors)


def _fix_signs(u, vt):
    # Largest-magnitude entry of each left singular vector made nonnegative.
    idx = np.argmax(np.abs(u), axis=-2)
    picked = np.take_along_axis(u, idx[..., None, :], axis=-2)
    signs = np.where(picked < 0, -1.0, 1.0)
    return u * signs, vt * np.swapaxes(signs, -1, -2)


def thin_svd(m):
    """Economy SVD ``m = U @ diag(s) @ V.T`` with a deterministic sign choice.

    Returns ``(U, s, V)``; note ``V`` rather than ``V.T``. Works on stacks.
    """
    m = np.asarray(m, dtype=np.float64)
    if not np.all(np.isfinite(m)):
        raise TensorError("thin_svd: input contains NaN or Inf")
    try:
        u, s, vt = np.linalg.svd(m, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise TensorError(f"thin_svd: SVD did not converge for shape {m.shape}") from exc
    u, vt = _fix_signs(u, vt)
    return u, s, np.swapaxes(vt, -1, -2)


def left_singular(m):
    """Left singular vectors and singular values of a wide stack of matrices.

    Uses the eigendecomposition of ``m @ m.T`` when ``m`` has no more rows
    than columns (several times cheaper than a full SVD for the cube
    unfoldings), falling back to :func:`thin_svd` otherwise. Values are in
    non-increasing order with the same sign convention as :func:`thin_svd`.
    Small singular values carry absolute error of order
    ``eps * s_max**2 / s``.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.shape[-2] > m.shape[-1]:
        u, s, _ = thin_svd(m)
        return u, s
    if not np.all(np.isfinite(m)):
        raise TensorError("left_singular: input contains NaN or Inf")
    gram = m @ np.swapaxes(m, -1, -2)
    try:
        evals, evecs = np.linalg.eigh(gram)
    except np.linalg.LinAlgError as exc:
        raise TensorError(f"left_singular: eigensolver failed for shape {m.shape}") from exc
    evals = evals[..., ::-1]
    u = evecs[..., ::-1]
    s = np.sqrt(np.maximum(evals, 0.0))
    idx = np.argmax(np.abs(u), axis=-2)
    picked = np.take_along_axis(u, idx[..., None, :], axis=-2)
    return u * np.where(picked < 0, -1.0, 1.0), s


def hosvd(t):
    """Full-rank higher-order SVD; factors are the left singular vectors
    of the three unfoldings, core is ``t x1 q1.T x2 q2.T x3 q3.T``."""
    t = np.asarray(t, dtype=np.float64)
    if not np.all(np.isfinite(t)):
        raise TensorError("hosvd: input contains NaN or Inf")
    qs = []
    for mode in (1, 2, 3):
        u, _, _ = thin_svd(unfold(t, mode))
        qs.append(u)
    core = multi_mode_product(t, qs, transpose=True)
    return HosvdFactors(core, *qs)


def kron_others(factors, mode):
    """Kronecker product of the two non-``mode`` factors, ordered to match
    the unfolding convention (see module docstring). Single tensors only."""
    _check_mode(mode)
    q1, q2, q3 = factors
    pair = {1: (q3, q2), 2: (q1, q3), 3: (q2, q1)}[mode]
    return np.kron(*pair)
