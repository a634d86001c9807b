"""Kronecker-basis-representation (KBR) proximal solver for one cube.

The regularized sub-problem for a cube ``T`` with data target ``X`` and
Bregman feedback ``W`` is

    f(C) + alpha * prod_n f*(M_n(n))
        + delta/2 * ||C x Q - X - W||^2
        + theta/2 * sum_n ||C x Q - M_n + Z_n||^2

where ``C x Q`` abbreviates ``C x1 Q1 x2 Q2 x3 Q3``. One :func:`kbr_step`
performs a block pass over the core, the three orthogonal factors, the
three mode auxiliaries ``M_n`` and the multipliers ``Z_n``.

All routines accept a leading batch axis, so a stack of equally shaped
cubes is processed in one call.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor_core import (
    TensorError,
    fold,
    left_singular,
    mode_product,
    multi_mode_product,
    reconstruct,
    thin_svd,
    unfold,
)

__all__ = [
    "KbrParams",
    "KbrState",
    "logsum_core",
    "logsum_rank",
    "logsum_values",
    "scalar_logsum_prox",
    "blend_target",
    "update_core",
    "update_factor",
    "update_mode_aux",
    "update_multipliers",
    "kbr_step",
    "surrogate_objective",
    "WEIGHT_FLOOR",
]

WEIGHT_FLOOR = 1e-12


@dataclass(frozen=True)
class KbrParams:
    """Weights of the per-cube problem.

    ``delta`` couples the cube to its data target, ``theta`` couples the
    factorized cube to the mode auxiliaries, ``alpha`` scales the rank
    product and ``epsilon`` is the log-sum offset.
    """

    alpha: float = 10.0
    delta: float = 0.02
    theta: float = 250.0
    epsilon: float = 1e-3

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if not self.delta > 0:
            raise ValueError(f"delta must be positive, got {self.delta}")
        if not self.theta > 0:
            raise ValueError(f"theta must be positive, got {self.theta}")
        if not 0 < self.epsilon < 1:
            raise ValueError(f"epsilon must lie in (0, 1), got {self.epsilon}")

    @property
    def gamma(self):
        return 1.0 / (self.delta + 3.0 * self.theta)


def logsum_values(values, epsilon):
    """Normalized log-sum of magnitudes, summed over the last axis."""
    v = np.abs(np.asarray(values, dtype=np.float64))
    return np.sum(np.log1p(v / epsilon), axis=-1) / (-np.log(epsilon))


def logsum_core(core, epsilon):
    """Log-sum sparsity surrogate of a core tensor (batched over leading axes)."""
    c = np.asarray(core, dtype=np.float64)
    return logsum_values(c.reshape(c.shape[:-3] + (-1,)), epsilon)


def logsum_rank(m, epsilon):
    """Log-sum rank surrogate: the log-sum of the singular values of ``m``."""
    s = np.linalg.svd(np.asarray(m, dtype=np.float64), compute_uv=False)
    return logsum_values(s, epsilon)


def scalar_logsum_prox(d, gamma, epsilon):
    """Elementwise minimizer of ``gamma*c1*log((|c|+eps)/eps) + (c-d)^2/2``.

    ``c1 = -1/log(eps)``. Inputs whose magnitude does not exceed
    ``max(0, 2*sqrt(c1*gamma) - eps)`` have no positive stationary point and
    map to zero. Above that, the larger stationary point
    ``(|d| - eps + sqrt((|d|+eps)^2 - 4*c1*gamma)) / 2`` is a local minimum
    that is returned only when it beats ``c = 0``; just above the threshold
    it does not, so the comparison is required for the global minimum.
    ``gamma`` broadcasts against ``d``.
    """
    d = np.asarray(d, dtype=np.float64)
    gamma = np.asarray(gamma, dtype=np.float64)
    c1 = -1.0 / np.log(epsilon)
    mag = np.abs(d)
    cg = c1 * gamma
    threshold = np.maximum(0.0, 2.0 * np.sqrt(cg) - epsilon)
    above = mag > threshold
    disc = (mag + epsilon) ** 2 - 4.0 * cg
    if np.any(np.where(above, disc, 0.0) < 0) or np.any(np.isnan(disc)):
        raise FloatingPointError("log-sum prox: negative discriminant above threshold")
    c3 = np.sqrt(np.where(above, disc, 0.0))
    root = 0.5 * (mag - epsilon + c3)
    root = np.where(above & (root > 0), root, 0.0)
    f_root = cg * np.log1p(root / epsilon) + 0.5 * (root - mag) ** 2
    keep = f_root < 0.5 * mag**2
    return np.where(keep, np.sign(d) * root, 0.0)


@dataclass
class KbrState:
    """Solver state of one cube, or of a stack of equally shaped cubes.

    ``q`` are the orthogonal factors, ``m_aux`` the mode auxiliaries and
    ``z`` their multipliers. ``fstar[..., n]`` caches the log-sum rank of
    ``m_aux[n]`` unfolded along its own mode; ``recon`` is the most recent
    ``core x q`` product.
    """

    core: np.ndarray
    q: list
    m_aux: list
    z: list
    fstar: np.ndarray
    recon: np.ndarray = field(default=None)

    @classmethod
    def from_cube(cls, cube, epsilon):
        """HOSVD of ``cube`` for core and factors; ``M_n = cube``, ``Z_n = 0``."""
        cube = np.array(cube, dtype=np.float64)
        if not np.all(np.isfinite(cube)):
            raise TensorError("cannot initialize KBR state from a non-finite cube")
        qs, fstar = [], []
        for mode in (1, 2, 3):
            u, s = left_singular(unfold(cube, mode))
            qs.append(u)
            fstar.append(logsum_values(s, epsilon))
        core = multi_mode_product(cube, qs, transpose=True)
        return cls(
            core=core,
            q=qs,
            m_aux=[cube.copy() for _ in range(3)],
            z=[np.zeros_like(cube) for _ in range(3)],
            fstar=np.stack(fstar, axis=-1),
            recon=cube.copy(),
        )

    @property
    def shape(self):
        return self.recon.shape[-3:]

    def scale(self, factor):
        """Rescale the linear parts of the state (used when the volume
        normalization changes between outer iterations)."""
        if factor == 1.0:
            return
        self.core = self.core * factor
        self.m_aux = [m * factor for m in self.m_aux]
        self.z = [z * factor for z in self.z]
        self.recon = self.recon * factor

    def take(self, index):
        """Sub-state for a batch index or index array."""
        return KbrState(
            core=self.core[index],
            q=[q[index] for q in self.q],
            m_aux=[m[index] for m in self.m_aux],
            z=[z[index] for z in self.z],
            fstar=self.fstar[index],
            recon=self.recon[index],
        )

    def put(self, index, other):
        """Write ``other`` into the batch positions ``index``."""
        self.core[index] = other.core
        for n in range(3):
            self.q[n][index] = other.q[n]
            self.m_aux[n][index] = other.m_aux[n]
            self.z[n][index] = other.z[n]
        self.fstar[index] = other.fstar
        self.recon[index] = other.recon


def blend_target(state, target, w, params):
    """``B = (delta*(target + w) + theta*sum_n(M_n - Z_n)) / (delta + 3*theta)``."""
    acc = sum(m - z for m, z in zip(state.m_aux, state.z))
    return (params.delta * (target + w) + params.theta * acc) / (
        params.delta + 3.0 * params.theta
    )


def update_core(state, b, params):
    """Core step: threshold ``b x1 Q1^T x2 Q2^T x3 Q3^T`` entrywise."""
    d = multi_mode_product(b, state.q, transpose=True)
    state.core = scalar_logsum_prox(d, params.gamma, params.epsilon)
    return state.core


def update_factor(state, b, mode):
    """Orthogonal Procrustes step for factor ``mode``.

    Maximizes ``<L, Q>`` with ``L = B_(n) kron(others) C_(n)^T``. The
    Kronecker product is applied implicitly by projecting ``b`` on the two
    other factors first.
    """
    proj = b
    for other in (1, 2, 3):
        if other != mode:
            proj = mode_product(proj, np.swapaxes(state.q[other - 1], -1, -2), other)
    lmat = unfold(proj, mode) @ np.swapaxes(unfold(state.core, mode), -1, -2)
    if not np.all(np.isfinite(lmat)):
        raise TensorError(f"factor update for mode {mode}: non-finite Procrustes matrix")
    try:
        g, _, vt = np.linalg.svd(lmat, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise TensorError(f"factor update for mode {mode}: SVD failed") from exc
    state.q[mode - 1] = g @ vt
    return state.q[mode - 1]


def _mode_weight(state, mode, params):
    others = [n for n in range(3) if n != mode - 1]
    b = params.alpha / params.theta * state.fstar[..., others[0]] * state.fstar[..., others[1]]
    return np.maximum(b, WEIGHT_FLOOR)


def update_mode_aux(state, mode, params):
    """Weighted log-sum singular value thresholding of ``recon + Z_mode``."""
    if state.recon is None:
        state.recon = reconstruct(state.core, state.q)
    weight = _mode_weight(state, mode, params)
    y = state.recon + state.z[mode - 1]
    ymat = unfold(y, mode)
    if ymat.shape[-2] <= ymat.shape[-1]:
        # M = U diag(s'/s) U^T Y, which avoids forming V.
        u, s = left_singular(ymat)
        s_new = scalar_logsum_prox(s, np.asarray(weight)[..., None], params.epsilon)
        ratio = np.divide(s_new, s, out=np.zeros_like(s), where=s_new > 0)
        mat = (u * ratio[..., None, :]) @ (np.swapaxes(u, -1, -2) @ ymat)
    else:
        u, s, v = thin_svd(ymat)
        s_new = scalar_logsum_prox(s, np.asarray(weight)[..., None], params.epsilon)
        mat = (u * s_new[..., None, :]) @ np.swapaxes(v, -1, -2)
    state.m_aux[mode - 1] = fold(mat, mode, y.shape[-3:])
    state.fstar[..., mode - 1] = logsum_values(s_new, params.epsilon)
    return state.m_aux[mode - 1]


def update_multipliers(state):
    """``Z_n <- Z_n - (M_n - recon)`` for all three modes."""
    state.z = [z - (m - state.recon) for z, m in zip(state.z, state.m_aux)]


def kbr_step(state, target, w, params, inner_iters=1):
    """One (or ``inner_iters``) block passes; returns the factorized cube.

    ``target`` and ``w`` are in normalized units; the caller denormalizes
    the returned cube.
    """
    target = np.asarray(target, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    for _ in range(inner_iters):
        b = blend_target(state, target, w, params)
        update_core(state, b, params)
        for mode in (1, 2, 3):
            update_factor(state, b, mode)
        state.recon = reconstruct(state.core, state.q)
        for mode in (1, 2, 3):
            update_mode_aux(state, mode, params)
        update_multipliers(state)
    return state.recon


def surrogate_objective(state, target, w, params):
    """Value of the per-cube split objective at the current state.

    The rank term is evaluated from the SVDs of the mode auxiliaries, so
    it does not rely on the cached ``fstar``.
    """
    recon = reconstruct(state.core, state.q)
    val = logsum_core(state.core, params.epsilon)
    prod = 1.0
    for n in (1, 2, 3):
        prod = prod * logsum_rank(unfold(state.m_aux[n - 1], n), params.epsilon)
    val = val + params.alpha * prod
    fit = recon - target - w
    val = val + 0.5 * params.delta * np.sum(fit**2, axis=(-3, -2, -1))
    for n in range(3):
        r = recon - state.m_aux[n] + state.z[n]
        val = val + 0.5 * params.theta * np.sum(r**2, axis=(-3, -2, -1))
    return val
