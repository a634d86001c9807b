"""Reconstruction drivers: SART baseline and the NLCTF outer loop.

Sinograms are ``(n_views, n_det, S)`` log-domain arrays scaled to the
projector's units, i.e. ``y = forward(x)`` for an attenuation volume ``x``
in 1/cm when the projector works in cm (see :func:`data_operator`).
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import patches as pe
from .geometry import FanBeamProjector, GeometryError
from .kbr import KbrParams, KbrState, kbr_step
from .metrics import psnr, rmse
from .simulation import MM_TO_CM

__all__ = [
    "ReconConfig",
    "ReconState",
    "ReconError",
    "DataOperator",
    "data_operator",
    "sart_sweep",
    "sart_reconstruct",
    "nlctf_image_update",
    "nlctf_reconstruct",
]

log = logging.getLogger(__name__)


class ReconError(RuntimeError):
    """Numeric failure inside the outer loop, with iteration context."""


@dataclass(frozen=True)
class ReconConfig:
    """Hyperparameters of the NLCTF loop.

    ``delta = c_const / tau`` couples each cube to its data target.
    ``n_subsets`` splits the views for the data step (``None`` means one
    view per subset, ``1`` the fully simultaneous update). ``data_step``
    is ``"sart"`` (normalized, the default) or ``"gradient"``.
    """

    alpha: float = 10.0
    tau: float = 0.05
    theta: float = 250.0
    mu: float = 0.5
    beta: float = 0.03
    rho: float = 1.0
    epsilon: float = 1e-3
    c_const: float = 1e-3
    patch: pe.PatchGridSpec = field(default_factory=pe.PatchGridSpec)
    outer_iters: int = 50
    inner_iters: int = 1
    match_interval: int = 1
    n_subsets: int = None
    data_step: str = "sart"
    seed: int = 0
    threads: int = 1
    chunk: int = 256

    def __post_init__(self):
        if not 0 < self.beta < 2:
            raise ValueError(f"beta must lie in (0, 2), got {self.beta}")
        if not self.rho > 0:
            raise ValueError(f"rho must be positive, got {self.rho}")
        if not (self.tau > 0 and self.c_const > 0):
            raise ValueError("tau and c_const must be positive")
        if self.mu < 0:
            raise ValueError(f"mu must be nonnegative, got {self.mu}")
        if self.outer_iters < 0 or self.inner_iters < 1 or self.match_interval < 1:
            raise ValueError("outer_iters >= 0, inner_iters >= 1 and match_interval >= 1 required")
        if self.n_subsets is not None and self.n_subsets < 1:
            raise ValueError("n_subsets must be at least 1")
        if self.data_step not in ("sart", "gradient"):
            raise ValueError(f"data_step must be 'sart' or 'gradient', got {self.data_step!r}")
        if self.threads < 1 or self.chunk < 1:
            raise ValueError("threads and chunk must be at least 1")
        self.kbr_params  # validates alpha, theta, epsilon

    @property
    def delta(self):
        return self.c_const / self.tau

    @property
    def kbr_params(self):
        return KbrParams(alpha=self.alpha, delta=self.delta, theta=self.theta, epsilon=self.epsilon)

    def with_updates(self, **kw):
        return replace(self, **kw)


class DataOperator:
    """System matrix in cm with per-subset SART normalizers.

    Wraps a :class:`FanBeamProjector` (mm) so that ``forward`` of an
    attenuation volume in 1/cm returns dimensionless line integrals.
    """

    def __init__(self, projector, n_subsets=None):
        self.projector = projector
        nv = projector.geom.n_views
        n = nv if n_subsets is None else min(int(n_subsets), nv)
        self.subsets = [list(range(k, nv, n)) for k in range(n)]
        self._mats = None
        self._norms = None

    @property
    def geom(self):
        return self.projector.geom

    def _prepare(self):
        if self._mats is not None:
            return
        mats, norms = [], []
        for views in self.subsets:
            a = self.projector.subset_matrix(views) * MM_TO_CM
            a = a.tocsr()
            rs = np.asarray(a.sum(axis=1)).ravel()
            cs = np.asarray(a.sum(axis=0)).ravel()
            inv_r = np.divide(1.0, rs, out=np.zeros_like(rs), where=rs > 0)
            inv_c = np.divide(1.0, cs, out=np.zeros_like(cs), where=cs > 0)
            mats.append((a, a.T.tocsr()))
            norms.append((inv_r, inv_c))
        self._mats, self._norms = mats, norms

    def forward(self, x):
        return self.projector.forward(x) * MM_TO_CM

    def back(self, sino):
        return self.projector.back(sino) * MM_TO_CM

    def subset_data(self, y, k):
        """Rows of ``y`` (views, det, S) belonging to subset ``k``, as (rays, S)."""
        return y[self.subsets[k]].reshape(-1, y.shape[2])

    def sart_sweep(self, x, y, beta):
        """One pass over all subsets; returns the unclamped result."""
        self._prepare()
        n_h, n_w, n_s = x.shape
        cols = x.reshape(-1, n_s).copy()
        for k, ((a, at), (inv_r, inv_c)) in enumerate(zip(self._mats, self._norms)):
            resid = (self.subset_data(y, k) - a @ cols) * inv_r[:, None]
            cols += beta * (at @ resid) * inv_c[:, None]
        return cols.reshape(n_h, n_w, n_s)

    def gradient_step(self, x, y, beta):
        resid = self.forward(x) - y
        return x - beta * self.back(resid)


def data_operator(geom_or_projector, n_subsets=None):
    proj = geom_or_projector
    if not isinstance(proj, FanBeamProjector):
        proj = FanBeamProjector(proj)
    return DataOperator(proj, n_subsets)


def _check_sino(op, y):
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 2:
        y = y[..., None]
    if y.shape[:2] != op.geom.sino_shape:
        raise GeometryError(f"sinogram shape {y.shape[:2]} does not match geometry {op.geom.sino_shape}")
    if not np.all(np.isfinite(y)):
        raise ReconError("sinogram contains non-finite values")
    return y


def sart_sweep(x, y, op, beta):
    """One SART (ordered-subset) iteration followed by the ``x >= 0`` clamp."""
    return np.maximum(op.sart_sweep(x, y, beta), 0.0)


def sart_reconstruct(sinos, geom, iters, beta, x0=None, n_subsets=None, reference=None, callback=None):
    """SART baseline; every channel is solved independently.

    Returns ``(volume, trace)`` where ``trace`` has one row per iteration.
    """
    op = geom if isinstance(geom, DataOperator) else data_operator(geom, n_subsets)
    y = _check_sino(op, sinos)
    x = np.zeros(op.geom.image_shape + (y.shape[2],)) if x0 is None else np.array(x0, dtype=np.float64)
    trace = []
    for it in range(int(iters)):
        x = sart_sweep(x, y, op, beta)
        row = {"iteration": it + 1, "data_residual": float(np.linalg.norm(op.forward(x) - y))}
        if reference is not None:
            _add_reference_metrics(row, x, reference)
        trace.append(row)
        if callback is not None:
            callback(it + 1, x)
    return x, trace


def _add_reference_metrics(row, x, ref):
    r = rmse(x, ref)
    p = psnr(x, ref)
    row["rmse_mean"] = float(np.mean(r))
    for s in range(len(r)):
        row[f"rmse_{s + 1}"] = float(r[s])
    for s in range(len(p)):
        row[f"psnr_{s + 1}"] = float(p[s])


@dataclass
class _CubeGroup:
    """Cubes sharing one slot count: their reference indices, slot
    positions, solver states and feedback cubes (denormalized)."""

    index: np.ndarray
    positions: np.ndarray
    state: KbrState = None
    w: np.ndarray = None
    changed: np.ndarray = None


@dataclass
class ReconState:
    x: np.ndarray
    iteration: int = 0
    scale: float = 1.0
    groups: list = field(default_factory=list)
    trace: list = field(default_factory=list)

    def cube_arrays(self):
        """``(positions, T, W)`` of every formed cube, denormalized."""
        pos, t, w = [], [], []
        for g in self.groups:
            if g.state is None:
                continue
            pos.append(g.positions)
            t.append(g.state.recon * self.scale)
            w.append(g.w)
        return pos, t, w


def _regularization(x, state, spec, mu):
    """``-mu * average_l E_l^-1 (E_l x - T_l + W_l)``; zero when no cube
    has been formed yet or ``mu == 0``."""
    if mu == 0:
        return None
    pos, t, w = state.cube_arrays()
    if not pos:
        return None
    total = np.zeros_like(x)
    counts = np.zeros_like(x)
    for p, tg, wg in zip(pos, t, w):
        diff = pe.extract_cubes(x, p, spec) - tg + wg
        s, c = pe.aggregate(diff, p, x.shape[:2], x.shape[2], spec)
        total += s
        counts += c
    return -mu * pe.average(total, counts)


def nlctf_image_update(state, sinos, op, config):
    """Data step on ``state.x`` plus the cube-coupling term; clamped."""
    x = state.x
    if config.data_step == "sart":
        new = op.sart_sweep(x, sinos, config.beta)
    else:
        new = op.gradient_step(x, sinos, config.beta)
    reg = _regularization(x, state, config.patch, config.mu)
    if reg is not None:
        new = new + reg
    return np.maximum(new, 0.0)


def _run_chunks(fn, n, config):
    """Apply ``fn(start, stop)`` over fixed chunks; chunk boundaries do not
    depend on the thread count, so results are identical for any count."""
    bounds = [(a, min(a + config.chunk, n)) for a in range(0, n, config.chunk)]
    if config.threads == 1 or len(bounds) <= 1:
        for a, b in bounds:
            fn(a, b)
        return
    with ThreadPoolExecutor(max_workers=config.threads) as pool:
        for fut in [pool.submit(fn, a, b) for a, b in bounds]:
            fut.result()


def _cube_phase(state, xn, refs, config, rematch):
    spec = config.patch
    params = config.kbr_params
    if rematch or not state.groups:
        positions, _, counts = pe.match_all(xn, refs, spec)
        new_groups = []
        for k in np.unique(counts):
            idx = np.flatnonzero(counts == k)
            new_groups.append(_CubeGroup(index=idx, positions=positions[idx, : k + 1]))
        old = {g.positions.shape[1]: g for g in state.groups}
        changed_total = 0
        for g in new_groups:
            prev = old.get(g.positions.shape[1])
            if prev is not None and prev.state is not None and np.array_equal(prev.index, g.index):
                changed = np.any(prev.positions != g.positions, axis=(1, 2))
                g.state, g.w = prev.state, prev.w
            else:
                changed = np.ones(len(g.index), dtype=bool)
            g.changed = changed
            changed_total += int(changed.sum())
        state.groups = new_groups
    else:
        for g in state.groups:
            g.changed = np.zeros(len(g.index), dtype=bool)
        changed_total = 0

    resid = 0.0
    for g in state.groups:
        cubes = pe.extract_cubes(xn, g.positions, spec)
        if g.state is None:
            g.state = KbrState.from_cube(cubes, params.epsilon)
            g.w = np.zeros_like(cubes)
        elif np.any(g.changed):
            idx = np.flatnonzero(g.changed)
            g.state.put(idx, KbrState.from_cube(cubes[idx], params.epsilon))
            g.w[idx] = 0.0

        def work(a, b, g=g, cubes=cubes):
            sub = g.state.take(slice(a, b))
            kbr_step(sub, cubes[a:b], g.w[a:b] / state.scale, params, config.inner_iters)
            g.state.put(slice(a, b), sub)

        _run_chunks(work, len(g.index), config)
        t_cube = g.state.recon * state.scale
        x_cube = cubes * state.scale
        # Bregman feedback update.
        g.w = g.w - config.rho * (t_cube - x_cube)
        resid += float(np.sum(np.sqrt(np.sum((t_cube - x_cube) ** 2, axis=(1, 2, 3)))))
    return changed_total, resid


def nlctf_reconstruct(sinos, geom, config, reference=None, callback=None):
    """NLCTF reconstruction; returns ``(volume, trace)``.

    Each outer iteration: image update, normalization, (re)matching every
    ``match_interval`` iterations, one KBR pass per cube, feedback update.
    ``trace`` rows hold the data residual ``||y - Hx||``, the multiplier
    residual ``sum_l ||T_l - E_l x||_F`` and, when ``reference`` is given,
    per-channel RMSE and PSNR.
    """
    op = geom if isinstance(geom, DataOperator) else data_operator(geom, config.n_subsets)
    y = _check_sino(op, sinos)
    n_s = y.shape[2]
    state = ReconState(x=np.zeros(op.geom.image_shape + (n_s,)))
    refs = pe.build_grid(op.geom.image_shape, config.patch)
    for it in range(config.outer_iters):
        t0 = time.perf_counter()
        try:
            state.x = nlctf_image_update(state, y, op, config)
            if not np.all(np.isfinite(state.x)):
                raise FloatingPointError("image update produced non-finite values")
            row = {"iteration": it + 1}
            if config.mu > 0:
                prev_scale = state.scale
                xn, state.scale = pe.normalize(state.x)
                for g in state.groups:
                    g.state.scale(prev_scale / state.scale)
                rematch = it % config.match_interval == 0
                changed, resid = _cube_phase(state, xn, refs, config, rematch)
                row["changed_cubes"] = changed
                row["multiplier_residual"] = resid
        except (FloatingPointError, ValueError, np.linalg.LinAlgError) as exc:
            raise ReconError(f"outer iteration {it + 1}: {exc}") from exc
        state.iteration = it + 1
        row["data_residual"] = float(np.linalg.norm(op.forward(state.x) - y))
        if reference is not None:
            _add_reference_metrics(row, state.x, reference)
        state.trace.append(row)
        log.info("iteration %d (%.1f s): %s", it + 1, time.perf_counter() - t0, row)
        if callback is not None:
            callback(it + 1, state)
    return state.x, state.trace
