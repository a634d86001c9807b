"""Non-local cube construction: patch grid, block matching, extraction and
aggregation.

Volumes are arrays of shape ``(rows, cols, S)``. A patch position is the
top-left pixel ``(row, col)`` of a ``patch_h x patch_w`` window. A cube
stacks the reference patch and its matched neighbors into an array of
shape ``(patch_h*patch_w, S, 1 + n_neighbors)``; inside a slab the patch is
vectorized column-major (row index fastest).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "PatchGridSpec",
    "MatchSet",
    "CubeStack",
    "build_grid",
    "search_offsets",
    "match_all",
    "match_patches",
    "extract_cubes",
    "extract_cube",
    "aggregate",
    "average",
    "normalize",
    "denormalize",
]


@dataclass(frozen=True)
class PatchGridSpec:
    """Patch size, grid stride, search window side and neighbor count."""

    patch_w: int = 6
    patch_h: int = 6
    stride: int = 2
    search_window: int = 80
    t: int = 50

    def __post_init__(self):
        if self.patch_w < 2 or self.patch_h < 2:
            raise ValueError("patch_w and patch_h must be at least 2")
        if self.stride < 1:
            raise ValueError("stride must be at least 1")
        if self.t < 1:
            raise ValueError("t must be at least 1")
        if self.search_window < max(self.patch_w, self.patch_h):
            raise ValueError("search_window must be at least the patch size")

    @property
    def patch_size(self):
        return self.patch_w * self.patch_h


@dataclass
class MatchSet:
    reference_pos: tuple
    neighbor_pos: np.ndarray  # (n, 2)
    distances: np.ndarray  # (n,), non-decreasing

    @property
    def positions(self):
        """All slot positions, reference first."""
        return np.vstack([np.asarray(self.reference_pos)[None, :], self.neighbor_pos])


@dataclass
class CubeStack:
    data: np.ndarray
    origin: MatchSet
    scale: float = 1.0


def _axis_positions(n, p, stride):
    last = n - p
    if stride >= n:
        return np.array([0])
    pos = list(range(0, last + 1, stride))
    if pos[-1] != last:
        pos.append(last)
    return np.array(pos)


def build_grid(image_dims, spec):
    """Reference positions in raster order, shape ``(L, 2)``.

    Positions step by ``stride`` and always include the last valid row and
    column so every pixel is covered, except that a stride reaching the
    image size yields the single position ``(0, 0)``.
    """
    rows, cols = int(image_dims[0]), int(image_dims[1])
    if spec.patch_h > rows or spec.patch_w > cols:
        raise ValueError(
            f"patch {spec.patch_h}x{spec.patch_w} does not fit in image {rows}x{cols}"
        )
    r = _axis_positions(rows, spec.patch_h, spec.stride)
    c = _axis_positions(cols, spec.patch_w, spec.stride)
    rr, cc = np.meshgrid(r, c, indexing="ij")
    return np.stack([rr.ravel(), cc.ravel()], axis=1)


def search_offsets(spec):
    """Candidate offsets ``(dr, dc)`` in lexicographic (= raster) order.

    The window is centered on the reference patch: every candidate patch
    lies inside a ``search_window`` square around it.
    """
    hr = (spec.search_window - spec.patch_h) // 2
    hc = (spec.search_window - spec.patch_w) // 2
    dr, dc = np.meshgrid(np.arange(-hr, hr + 1), np.arange(-hc, hc + 1), indexing="ij")
    return np.stack([dr.ravel(), dc.ravel()], axis=1)


def _box_sum(img, h, w):
    # Sum over every h x w window (valid positions); fixed addition order.
    out = img[: img.shape[0] - h + 1]
    for u in range(1, h):
        out = out + img[u : u + img.shape[0] - h + 1]
    acc = out[:, : out.shape[1] - w + 1]
    for v in range(1, w):
        acc = acc + out[:, v : v + out.shape[1] - w + 1]
    return acc


def _offset_distances(volume, refs, dr, dc, ph, pw):
    rows, cols = volume.shape[:2]
    n_r, n_c = rows - ph + 1, cols - pw + 1
    r0, r1 = max(0, -dr), min(n_r, n_r - dr)
    c0, c1 = max(0, -dc), min(n_c, n_c - dc)
    out = np.full(len(refs), np.inf)
    if r1 <= r0 or c1 <= c0:
        return out
    a = volume[r0 : r1 + ph - 1, c0 : c1 + pw - 1]
    b = volume[r0 + dr : r1 + dr + ph - 1, c0 + dc : c1 + dc + pw - 1]
    diff = a - b
    energy = np.einsum("ijs,ijs->ij", diff, diff)
    box = _box_sum(energy, ph, pw)
    rr, cc = refs[:, 0], refs[:, 1]
    ok = (rr >= r0) & (rr < r1) & (cc >= c0) & (cc < c1)
    out[ok] = box[rr[ok] - r0, cc[ok] - c0]
    return out


def match_all(volume, refs, spec, block=None):
    """Block matching for many references at once.

    Distance is the squared Euclidean norm over the full spatial-spectral
    patch. Returns ``(positions, distances, counts)``: ``positions`` has
    shape ``(L, 1 + t, 2)`` with the reference in slot 0, ``distances`` has
    shape ``(L, t)`` (``inf`` marks unused slots when fewer than ``t``
    candidates exist) and ``counts`` holds the number of real neighbors.
    Ties are broken by candidate raster order.
    """
    volume = np.asarray(volume, dtype=np.float64)
    refs = np.asarray(refs, dtype=np.int64).reshape(-1, 2)
    offsets = search_offsets(spec)
    t = spec.t
    n_ref = len(refs)
    if block is None:
        block = max(64, int(2e7 // max(n_ref, 1)))
    best_d = np.full((n_ref, 0), np.inf)
    best_o = np.zeros((n_ref, 0), dtype=np.int64)
    for start in range(0, len(offsets), block):
        chunk = offsets[start : start + block]
        cols = []
        for dr, dc in chunk:
            if dr == 0 and dc == 0:
                cols.append(np.full(n_ref, np.inf))
            else:
                cols.append(
                    _offset_distances(volume, refs, int(dr), int(dc), spec.patch_h, spec.patch_w)
                )
        d = np.concatenate([best_d, np.stack(cols, axis=1)], axis=1)
        o = np.concatenate(
            [best_o, np.broadcast_to(np.arange(start, start + len(chunk)), (n_ref, len(chunk)))],
            axis=1,
        )
        # Earlier blocks precede later ones and best_* is already ordered, so
        # a stable sort keeps raster order among equal distances.
        order = np.argsort(d, axis=1, kind="stable")[:, :t]
        best_d = np.take_along_axis(d, order, axis=1)
        best_o = np.take_along_axis(o, order, axis=1)
    counts = np.isfinite(best_d).sum(axis=1)
    neigh = refs[:, None, :] + offsets[best_o]
    unused = ~np.isfinite(best_d)
    neigh[unused] = np.broadcast_to(refs[:, None, :], neigh.shape)[unused]
    positions = np.concatenate([refs[:, None, :], neigh], axis=1)
    if best_d.shape[1] < t:
        pad = t - best_d.shape[1]
        best_d = np.pad(best_d, ((0, 0), (0, pad)), constant_values=np.inf)
        positions = np.concatenate([positions, positions[:, :1].repeat(pad, axis=1)], axis=1)
    return positions, best_d, counts


def match_patches(volume, ref_pos, spec):
    """Match one reference patch; see :func:`match_all`."""
    positions, dist, counts = match_all(volume, [ref_pos], spec)
    n = int(counts[0])
    return MatchSet(
        reference_pos=(int(ref_pos[0]), int(ref_pos[1])),
        neighbor_pos=positions[0, 1 : 1 + n].copy(),
        distances=dist[0, :n].copy(),
    )


def extract_cubes(volume, positions, spec):
    """Gather cubes for a batch of slot positions ``(L, K, 2)``.

    Returns an array of shape ``(L, patch_h*patch_w, S, K)``.
    """
    volume = np.asarray(volume, dtype=np.float64)
    positions = np.asarray(positions)
    if positions.ndim == 2:
        positions = positions[None]
    windows = sliding_window_view(volume, (spec.patch_h, spec.patch_w), axis=(0, 1))
    try:
        g = windows[positions[..., 0], positions[..., 1]]  # (L, K, S, ph, pw)
    except IndexError as exc:
        raise IndexError("patch position outside the volume") from exc
    g = g.transpose(0, 4, 3, 2, 1)  # (L, pw, ph, S, K)
    return np.ascontiguousarray(g).reshape(g.shape[0], spec.patch_size, volume.shape[2], -1)


def extract_cube(volume, match, spec, scale=1.0):
    data = extract_cubes(volume, match.positions, spec)[0]
    return CubeStack(data=data, origin=match, scale=scale)


def aggregate(cubes, positions, image_dims, n_channels, spec):
    """Scatter-add every slab of every cube back to its source patch.

    ``cubes`` is ``(L, patch_h*patch_w, S, K)`` and ``positions`` is
    ``(L, K, 2)``. Returns ``(sum_volume, counts)``, both of shape
    ``(rows, cols, S)``. Contributions are accumulated in a canonical order
    (cubes sorted by reference position), so permuting the input cube list
    does not change a single output bit.
    """
    rows, cols = int(image_dims[0]), int(image_dims[1])
    total = np.zeros((rows, cols, n_channels))
    counts = np.zeros((rows, cols, n_channels))
    cubes = np.asarray(cubes, dtype=np.float64)
    positions = np.asarray(positions)
    if len(cubes) == 0:
        return total, counts
    if cubes.shape[1] != spec.patch_size or cubes.shape[2] != n_channels:
        raise ValueError(f"cube shape {cubes.shape[1:]} does not match the patch spec")
    order = np.lexsort((positions[:, 0, 1], positions[:, 0, 0]))
    cubes = cubes[order]
    positions = positions[order]
    # Pixel offsets of the vectorized patch (row fastest).
    vv, uu = np.meshgrid(np.arange(spec.patch_w), np.arange(spec.patch_h), indexing="ij")
    du, dv = uu.ravel(), vv.ravel()
    size = rows * cols
    chan = np.arange(n_channels)
    for k in range(cubes.shape[3]):
        pr = positions[:, k, 0][:, None] + du[None, :]
        pc = positions[:, k, 1][:, None] + dv[None, :]
        pix = (pr * cols + pc)[:, :, None] * n_channels + chan[None, None, :]
        flat = pix.ravel()
        total += np.bincount(flat, weights=cubes[:, :, :, k].ravel(), minlength=size * n_channels).reshape(
            rows, cols, n_channels
        )
        counts += np.bincount(flat, minlength=size * n_channels).reshape(rows, cols, n_channels)
    return total, counts


def average(total, counts):
    """``total / counts`` with zero where nothing was aggregated."""
    return np.divide(total, counts, out=np.zeros_like(total), where=counts > 0)


def normalize(volume):
    """Scale by the global maximum; returns ``(normalized, scale)``."""
    volume = np.asarray(volume, dtype=np.float64)
    peak = float(volume.max()) if volume.size else 0.0
    scale = peak if peak > 0 else 1.0
    return volume / scale, scale


def denormalize(tensor, scale):
    return np.asarray(tensor, dtype=np.float64) * scale
