"""Phantoms, binned x-ray spectra and noisy photon-counting measurements.

Attenuation is kept in 1/cm and geometry in mm. The only unit conversion
between the two is :data:`MM_TO_CM`, applied in :func:`line_integrals`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .geometry import FanBeamGeometry, FanBeamProjector, GeometryError

__all__ = [
    "MM_TO_CM",
    "Ellipse",
    "PhantomSpec",
    "GroundTruth",
    "SpectrumModel",
    "load_materials",
    "load_spectrum_curve",
    "default_phantom",
    "rasterize_phantom",
    "line_integrals",
    "expected_counts",
    "simulate_counts",
    "counts_to_sinogram",
]

MM_TO_CM = 0.1


def _data_json(name):
    return json.loads(resources.files("spectral_nlctf").joinpath("data", name).read_text())


@dataclass(frozen=True)
class Ellipse:
    center: tuple  # (x, y) in mm, y up
    axes: tuple  # semi-axes (a, b) in mm
    rotation: float = 0.0  # radians, counterclockwise
    material: int = 0
    priority: int = 0

    def __post_init__(self):
        if len(self.center) != 2 or len(self.axes) != 2:
            raise ValueError("ellipse center and axes need two values each")
        if min(self.axes) <= 0:
            raise ValueError(f"ellipse semi-axes must be positive, got {self.axes}")

    def contains(self, x, y):
        c, s = np.cos(self.rotation), np.sin(self.rotation)
        dx, dy = x - self.center[0], y - self.center[1]
        u = (c * dx + s * dy) / self.axes[0]
        v = (-s * dx + c * dy) / self.axes[1]
        return u * u + v * v <= 1.0


@dataclass
class PhantomSpec:
    """Materials ``[(name, mu_per_bin), ...]``, ellipses and pixel grid.

    ``grid`` is ``(n_w, n_h, pixel_size_mm)``.
    """

    materials: list
    shapes: list
    grid: tuple

    def __post_init__(self):
        if not self.materials:
            raise ValueError("materials: at least one material is required")
        n_bins = None
        for name, mu in self.materials:
            mu = np.asarray(mu, dtype=np.float64)
            if mu.ndim != 1 or mu.size == 0:
                raise ValueError(f"materials: {name!r} needs a 1-D list of per-bin values")
            if not np.all(mu > 0):
                raise ValueError(f"materials: {name!r} has non-positive attenuation")
            if n_bins is None:
                n_bins = mu.size
            elif mu.size != n_bins:
                raise ValueError(f"materials: {name!r} has {mu.size} bins, expected {n_bins}")
        for sh in self.shapes:
            if not 0 <= sh.material < len(self.materials):
                raise ValueError(f"shapes: material index {sh.material} out of range")
        n_w, n_h, ps = self.grid
        if int(n_w) < 1 or int(n_h) < 1 or not ps > 0:
            raise ValueError(f"grid: invalid grid {self.grid}")

    @property
    def n_bins(self):
        return len(self.materials[0][1])

    @property
    def names(self):
        return [name for name, _ in self.materials]


@dataclass
class GroundTruth:
    """Per-bin attenuation images ``(n_h, n_w, S)`` in 1/cm and a label map
    (``0`` background, ``m + 1`` for material ``m``)."""

    volume: np.ndarray
    labels: np.ndarray
    material_names: list = field(default_factory=list)


@dataclass(frozen=True)
class SpectrumModel:
    bin_edges: tuple
    photons_per_path: float
    fractions: tuple

    def __post_init__(self):
        edges = np.asarray(self.bin_edges, dtype=np.float64)
        frac = np.asarray(self.fractions, dtype=np.float64)
        if edges.ndim != 1 or edges.size < 2 or np.any(np.diff(edges) <= 0):
            raise ValueError("spectrum: bin edges must be strictly increasing")
        if frac.size != edges.size - 1:
            raise ValueError("spectrum: need one fraction per bin")
        if np.any(frac < 0) or abs(frac.sum() - 1.0) > 1e-9:
            raise ValueError("spectrum: fractions must be nonnegative and sum to 1")
        if not self.photons_per_path > 0:
            raise ValueError("spectrum: photons_per_path must be positive")

    @property
    def n_bins(self):
        return len(self.fractions)

    @property
    def n0(self):
        """Unattenuated photons per ray in each bin."""
        return self.photons_per_path * np.asarray(self.fractions, dtype=np.float64)

    @classmethod
    def from_curve(cls, energies, weights, bin_edges, photons_per_path):
        """Bin a sampled spectrum (photon-number weights vs keV).

        The curve is linearly interpolated on a 0.01 keV grid and
        integrated over each bin; fractions are normalized to sum to 1.
        """
        energies = np.asarray(energies, dtype=np.float64)
        weights = np.asarray(weights, dtype=np.float64)
        edges = np.asarray(bin_edges, dtype=np.float64)
        grid = np.arange(edges[0], edges[-1] + 5e-3, 0.01)
        w = np.interp(grid, energies, weights, left=0.0, right=0.0)
        cum = np.concatenate([[0.0], np.cumsum(0.5 * (w[1:] + w[:-1]) * np.diff(grid))])
        at_edges = np.interp(edges, grid, cum)
        per_bin = np.diff(at_edges)
        if per_bin.sum() <= 0:
            raise ValueError("spectrum: curve has no weight inside the bins")
        return cls(tuple(edges), float(photons_per_path), tuple(per_bin / per_bin.sum()))


def load_materials(path=None):
    """``(bin_edges, {name: mu_per_bin})`` from a materials file (packaged
    default when ``path`` is None)."""
    data = _data_json("materials.json") if path is None else json.loads(open(path).read())
    return list(data["bin_edges_kev"]), {k: list(v) for k, v in data["materials"].items()}


def load_spectrum_curve(path=None):
    """``(energies_kev, weights)`` of a sampled source spectrum."""
    data = _data_json("spectrum_50kvp.json") if path is None else json.loads(open(path).read())
    return np.asarray(data["energy_kev"], dtype=np.float64), np.asarray(data["weight"], dtype=np.float64)


def default_phantom(n_w=128, n_h=128, pixel_size=0.29, materials=None, shapes_path=None):
    """Mouse-thorax analogue with water, bone and iodine regions."""
    if materials is None:
        _, table = load_materials()
        materials = [(k, table[k]) for k in ("water", "bone", "iodine")]
    names = [m[0] for m in materials]
    data = _data_json("mouse_thorax.json") if shapes_path is None else json.loads(open(shapes_path).read())
    shapes = []
    for s in data["shapes"]:
        if s["material"] not in names:
            raise ValueError(f"shapes: unknown material {s['material']!r}")
        shapes.append(
            Ellipse(
                center=tuple(s["center_mm"]),
                axes=tuple(s["semi_axes_mm"]),
                rotation=float(s.get("rotation_rad", 0.0)),
                material=names.index(s["material"]),
                priority=int(s.get("priority", 0)),
            )
        )
    return PhantomSpec(materials=list(materials), shapes=shapes, grid=(n_w, n_h, pixel_size))


def rasterize_phantom(spec):
    """Sample the phantom at pixel centers.

    Each pixel takes the material of the highest-priority ellipse that
    contains its center; among equal priorities the later shape wins.
    """
    n_w, n_h, ps = int(spec.grid[0]), int(spec.grid[1]), float(spec.grid[2])
    x = (np.arange(n_w) - (n_w - 1) / 2) * ps
    y = ((n_h - 1) / 2 - np.arange(n_h)) * ps
    xx, yy = np.meshgrid(x, y)
    labels = np.zeros((n_h, n_w), dtype=np.int64)
    order = sorted(range(len(spec.shapes)), key=lambda i: spec.shapes[i].priority)
    for i in order:
        sh = spec.shapes[i]
        labels[sh.contains(xx, yy)] = sh.material + 1
    table = np.vstack([np.zeros(spec.n_bins)] + [np.asarray(mu, dtype=np.float64) for _, mu in spec.materials])
    return GroundTruth(volume=table[labels], labels=labels, material_names=spec.names)


def _projector(geom):
    if isinstance(geom, FanBeamProjector):
        return geom
    if isinstance(geom, FanBeamGeometry):
        return FanBeamProjector(geom)
    raise TypeError(f"expected a FanBeamGeometry or FanBeamProjector, got {type(geom).__name__}")


def _volume(truth):
    return truth.volume if isinstance(truth, GroundTruth) else np.asarray(truth, dtype=np.float64)


def line_integrals(truth, geom):
    """Dimensionless line integrals ``(n_views, n_det, S)`` of an attenuation
    volume in 1/cm over rays measured in mm."""
    proj = _projector(geom)
    vol = _volume(truth)
    if vol.shape[:2] != proj.geom.image_shape:
        raise GeometryError(
            f"phantom grid {vol.shape[:2]} does not match geometry {proj.geom.image_shape}"
        )
    return proj.forward(vol) * MM_TO_CM


def expected_counts(truth, geom, spectrum):
    p = line_integrals(truth, geom)
    if p.shape[2] != spectrum.n_bins:
        raise ValueError(f"phantom has {p.shape[2]} bins, spectrum has {spectrum.n_bins}")
    return spectrum.n0[None, None, :] * np.exp(-p)


def simulate_counts(truth, geom, spectrum, rng_seed):
    """Poisson photon counts ``(n_views, n_det, S)`` as float64.

    Every (bin, view) pair draws from its own stream seeded by
    ``(rng_seed, bin, view)``, so results do not depend on evaluation order.
    """
    lam = expected_counts(truth, geom, spectrum)
    counts = np.empty_like(lam)
    for s in range(lam.shape[2]):
        for v in range(lam.shape[0]):
            rng = np.random.default_rng(np.random.SeedSequence([int(rng_seed), s, v]))
            counts[v, :, s] = rng.poisson(lam[v, :, s])
    return counts


def counts_to_sinogram(counts, spectrum):
    """Log-domain data ``ln(N0_s / max(counts, 1))``."""
    counts = np.asarray(counts, dtype=np.float64)
    if np.any(counts < 0):
        raise ValueError("counts must be nonnegative")
    return np.log(spectrum.n0[None, None, :] / np.maximum(counts, 1.0))
