"""2-D fan-beam projector with exact (Siddon) ray tracing.

Conventions
-----------
* Images are arrays of shape ``(n_h, n_w)`` (rows, cols); the isocenter is
  the image center. Row 0 is the top (largest ``y``), column 0 is the
  left (smallest ``x``).
* View ``v`` has angle ``2*pi*v/n_views`` measured counterclockwise from
  the ``+x`` axis; the source sits at ``sod*(cos, sin)`` of that angle.
* The detector is flat, perpendicular to the central ray, at distance
  ``sdd`` from the source. Cell ``k`` is centered at offset
  ``(k - (n_det-1)/2)*det_pitch`` along ``(-sin, cos)``.
* One ray per detector cell, from the source to the cell center.

Sinograms have shape ``(n_views, n_det)``; weights are intersection
lengths in mm.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

__all__ = ["FanBeamGeometry", "FanBeamProjector", "GeometryError", "trace_ray"]


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class FanBeamGeometry:
    sod: float = 132.0
    sdd: float = 180.0
    n_det: int = 512
    det_pitch: float = 0.1
    n_views: int = 640
    n_w: int = 512
    n_h: int = 512
    pixel_size: float = 0.0726

    def __post_init__(self):
        if not (self.sdd > self.sod > 0):
            raise GeometryError(f"need sdd > sod > 0, got sdd={self.sdd}, sod={self.sod}")
        for name in ("n_det", "n_views", "n_w", "n_h"):
            if int(getattr(self, name)) < 1:
                raise GeometryError(f"{name} must be at least 1")
        if not (self.det_pitch > 0 and self.pixel_size > 0):
            raise GeometryError("det_pitch and pixel_size must be positive")
        circle = min(self.n_w, self.n_h) * self.pixel_size
        if self.fov_diameter < circle * (1 - 1e-9):
            raise GeometryError(
                f"field of view {self.fov_diameter:.3f} mm does not cover the "
                f"reconstruction circle of {circle:.3f} mm"
            )

    @property
    def fov_diameter(self):
        half = self.n_det * self.det_pitch / 2
        return 2 * self.sod * np.sin(np.arctan(half / self.sdd))

    @property
    def image_shape(self):
        return (self.n_h, self.n_w)

    @property
    def sino_shape(self):
        return (self.n_views, self.n_det)

    @property
    def angles(self):
        return 2 * np.pi * np.arange(self.n_views) / self.n_views

    def ray_endpoints(self, view):
        """Source point and detector-cell centers (mm) for one view."""
        beta = self.angles[view]
        c, s = np.cos(beta), np.sin(beta)
        src = np.array([self.sod * c, self.sod * s])
        det_center = -(self.sdd - self.sod) * np.array([c, s])
        offs = (np.arange(self.n_det) - (self.n_det - 1) / 2) * self.det_pitch
        dets = det_center[None, :] + offs[:, None] * np.array([-s, c])[None, :]
        return src, dets


def _trace(src, dets, geom):
    """Vectorized Siddon traversal of all rays of one view.

    Returns ``(ray_index, pixel_index, length)`` arrays; pixel indices are
    row-major (``row * n_w + col``).
    """
    nw, nh, ps = geom.n_w, geom.n_h, geom.pixel_size
    x0, y_top = -nw * ps / 2, nh * ps / 2
    xs = x0 + ps * np.arange(nw + 1)
    ys = y_top - ps * np.arange(nh + 1)
    d = dets - src[None, :]
    length = np.hypot(d[:, 0], d[:, 1])
    with np.errstate(divide="ignore", invalid="ignore"):
        ax = (xs[None, :] - src[0]) / d[:, :1]
        ay = (ys[None, :] - src[1]) / d[:, 1:2]
    par_x = d[:, 0] == 0
    par_y = d[:, 1] == 0
    # Entry/exit parameters of the grid box.
    lo_x = np.where(par_x, -np.inf, np.minimum(ax[:, 0], ax[:, -1]))
    hi_x = np.where(par_x, np.inf, np.maximum(ax[:, 0], ax[:, -1]))
    lo_y = np.where(par_y, -np.inf, np.minimum(ay[:, 0], ay[:, -1]))
    hi_y = np.where(par_y, np.inf, np.maximum(ay[:, 0], ay[:, -1]))
    inside_x = (src[0] > xs[0]) & (src[0] < xs[-1])
    inside_y = (src[1] < ys[0]) & (src[1] > ys[-1])
    lo_x = np.where(par_x & ~inside_x, np.inf, lo_x)
    lo_y = np.where(par_y & ~inside_y, np.inf, lo_y)
    a_min = np.maximum.reduce([np.zeros(len(d)), lo_x, lo_y])
    a_max = np.minimum.reduce([np.ones(len(d)), hi_x, hi_y])
    hit = a_max > a_min
    a_min = np.where(hit, a_min, 0.0)
    a_max = np.where(hit, a_max, 0.0)
    ax = np.where(par_x[:, None], a_min[:, None], ax)
    ay = np.where(par_y[:, None], a_min[:, None], ay)
    alphas = np.concatenate([a_min[:, None], ax, ay, a_max[:, None]], axis=1)
    alphas = np.clip(alphas, a_min[:, None], a_max[:, None])
    alphas.sort(axis=1)
    seg = np.diff(alphas, axis=1)
    mid = 0.5 * (alphas[:, 1:] + alphas[:, :-1])
    px = src[0] + mid * d[:, :1]
    py = src[1] + mid * d[:, 1:2]
    col = np.floor((px - x0) / ps).astype(np.int64)
    row = np.floor((y_top - py) / ps).astype(np.int64)
    seg_mm = seg * length[:, None]
    keep = (seg_mm > 1e-12) & (col >= 0) & (col < nw) & (row >= 0) & (row < nh)
    ray = np.broadcast_to(np.arange(len(d))[:, None], seg.shape)[keep]
    return ray, (row * nw + col)[keep], seg_mm[keep]


def trace_ray(geom, view, det):
    """Pixels crossed by one ray and the intersection lengths (mm)."""
    src, dets = geom.ray_endpoints(view)
    _, pix, w = _trace(src, dets[det : det + 1], geom)
    return pix, w


class FanBeamProjector:
    """System matrix of a :class:`FanBeamGeometry`, applied matrix-free or
    from cached per-view sparse blocks.

    Images may carry a trailing channel axis: ``forward`` maps
    ``(n_h, n_w[, S])`` to ``(n_views, n_det[, S])`` and ``back`` is its
    exact transpose.
    """

    def __init__(self, geom, cache=None, cache_budget=1.5e9):
        self.geom = geom
        if cache is None:
            est = geom.n_views * geom.n_det * 1.6 * max(geom.n_w, geom.n_h) * 12
            cache = est <= cache_budget
        self.cache = bool(cache)
        self._blocks = {}
        self._row_sums = None
        self._col_sums = {}

    @property
    def n_pixels(self):
        return self.geom.n_w * self.geom.n_h

    def block(self, view):
        """Sparse ``(n_det, n_pixels)`` block of one view."""
        blk = self._blocks.get(view)
        if blk is not None:
            return blk
        src, dets = self.geom.ray_endpoints(view)
        ray, pix, w = _trace(src, dets, self.geom)
        blk = sp.csr_matrix((w, (ray, pix)), shape=(self.geom.n_det, self.n_pixels))
        blk.sum_duplicates()
        if self.cache:
            self._blocks[view] = blk
        return blk

    def subset_matrix(self, views):
        views = list(views)
        if len(views) == 1:
            return self.block(views[0])
        return sp.vstack([self.block(v) for v in views], format="csr")

    def _as_columns(self, image):
        image = np.asarray(image, dtype=np.float64)
        if image.shape[:2] != self.geom.image_shape:
            raise GeometryError(
                f"image shape {image.shape[:2]} does not match geometry {self.geom.image_shape}"
            )
        return image.reshape(self.n_pixels, -1), image.shape[2:]

    def forward(self, image, views=None):
        cols, extra = self._as_columns(image)
        views = range(self.geom.n_views) if views is None else views
        out = np.stack([self.block(v) @ cols for v in views])
        return out.reshape((len(out), self.geom.n_det) + extra)

    def back(self, sino, views=None):
        sino = np.asarray(sino, dtype=np.float64)
        views = list(range(self.geom.n_views)) if views is None else list(views)
        if sino.shape[:2] != (len(views), self.geom.n_det):
            raise GeometryError(
                f"sinogram shape {sino.shape[:2]} does not match {(len(views), self.geom.n_det)}"
            )
        extra = sino.shape[2:]
        acc = np.zeros((self.n_pixels,) + ((int(np.prod(extra)),) if extra else ()))
        for i, v in enumerate(views):
            rhs = sino[i].reshape(self.geom.n_det, -1) if extra else sino[i]
            acc += self.block(v).T @ rhs
        return acc.reshape(self.geom.image_shape + extra)

    def row_sums(self):
        """Per-ray weight sums, shape ``(n_views, n_det)``."""
        if self._row_sums is None:
            self._row_sums = np.stack(
                [np.asarray(self.block(v).sum(axis=1)).ravel() for v in range(self.geom.n_views)]
            )
        return self._row_sums

    def col_sums(self, views=None):
        """Per-pixel weight sums over ``views`` (all by default), image-shaped."""
        key = None if views is None else tuple(views)
        if key not in self._col_sums:
            vs = range(self.geom.n_views) if views is None else views
            acc = np.zeros(self.n_pixels)
            for v in vs:
                acc += np.asarray(self.block(v).sum(axis=0)).ravel()
            self._col_sums[key] = acc.reshape(self.geom.image_shape)
        return self._col_sums[key]

    def sart_normalizers(self):
        """``(row_sums, col_sums)`` of the full system matrix."""
        return self.row_sums(), self.col_sums()
