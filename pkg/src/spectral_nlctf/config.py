"""Run configuration: built-in profiles, YAML/JSON files and ``key=value``
overrides, validated before any computation."""

from __future__ import annotations

import copy
from pathlib import Path

import yaml

from .geometry import FanBeamGeometry, GeometryError
from .patches import PatchGridSpec
from .recon import ReconConfig
from .simulation import SpectrumModel, default_phantom, load_materials, load_spectrum_curve

__all__ = ["ConfigError", "PROFILES", "load_config", "apply_override", "RunConfig"]


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key."""


_GEOMETRY = {"sod", "sdd", "n_det", "det_pitch", "n_views", "n_w", "n_h", "pixel_size"}
_RECON = {
    "alpha", "tau", "theta", "mu", "beta", "rho", "epsilon", "c_const",
    "patch_w", "patch_h", "stride", "search_window", "t",
    "outer_iters", "inner_iters", "match_interval", "n_subsets", "data_step", "chunk",
}  # fmt: skip
SCHEMA = {
    "geometry": _GEOMETRY,
    "spectrum": {"photons_per_path", "curve_file", "noise"},
    "phantom": {"materials", "materials_file", "shapes_file", "basis"},
    "recon": _RECON,
    "output": {"dir", "png"},
    "seed": None,
    "profile": None,
}

_COMMON = {
    "spectrum": {"photons_per_path": 2.0e4, "curve_file": None, "noise": True},
    "phantom": {
        "materials": ["water", "bone", "iodine"],
        "materials_file": None,
        "shapes_file": None,
        "basis": ["water", "iodine", "bone"],
    },
    "output": {"dir": "out", "png": True},
    "seed": 0,
}

PROFILES = {
    "paper-sim": {
        "geometry": {
            "sod": 132.0, "sdd": 180.0, "n_det": 512, "det_pitch": 0.1,
            "n_views": 640, "n_w": 512, "n_h": 512, "pixel_size": 0.0726,
        },
        "recon": {
            "alpha": 10.0, "tau": 0.05, "theta": 250.0, "mu": 0.5, "beta": 0.03,
            "rho": 1.0, "epsilon": 1e-3, "c_const": 1e-3,
            "patch_w": 6, "patch_h": 6, "stride": 2, "search_window": 80, "t": 50,
            "outer_iters": 50, "inner_iters": 1, "match_interval": 1,
            "n_subsets": None, "data_step": "sart", "chunk": 256,
        },
    },
    "desk": {
        "geometry": {
            "sod": 132.0, "sdd": 180.0, "n_det": 256, "det_pitch": 0.2,
            "n_views": 160, "n_w": 128, "n_h": 128, "pixel_size": 0.29,
        },
        "recon": {
            "alpha": 10.0, "tau": 0.05, "theta": 250.0, "mu": 0.5, "beta": 0.03,
            "rho": 1.0, "epsilon": 1e-3, "c_const": 1e-3,
            "patch_w": 6, "patch_h": 6, "stride": 2, "search_window": 80, "t": 20,
            "outer_iters": 50, "inner_iters": 1, "match_interval": 1,
            "n_subsets": None, "data_step": "sart", "chunk": 256,
        },
    },
}  # fmt: skip
for _p in PROFILES.values():
    for _k, _v in _COMMON.items():
        _p[_k] = copy.deepcopy(_v)


def _merge(base, extra, where=""):
    out = copy.deepcopy(base)
    for key, val in extra.items():
        name = f"{where}{key}"
        if isinstance(val, dict) and isinstance(out.get(key), dict) and key != "materials":
            out[key] = _merge(out[key], val, name + ".")
        else:
            out[key] = copy.deepcopy(val)
    return out


def _check_keys(cfg):
    for key, val in cfg.items():
        if key not in SCHEMA:
            raise ConfigError(f"unknown configuration key {key!r}")
        allowed = SCHEMA[key]
        if allowed is None:
            continue
        if not isinstance(val, dict):
            raise ConfigError(f"section {key!r} must be a mapping")
        for sub in val:
            if sub not in allowed:
                raise ConfigError(f"unknown configuration key '{key}.{sub}'")


def apply_override(cfg, item):
    """Apply one ``section.key=value`` override (value parsed as YAML)."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, _, raw = item.partition("=")
    parts = key.strip().split(".")
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"override {key}: cannot parse value {raw!r}") from exc
    if len(parts) == 1:
        patch = {parts[0]: value}
    elif len(parts) == 2:
        patch = {parts[0]: {parts[1]: value}}
    else:
        raise ConfigError(f"override key {key!r} must be 'section.key' or a top-level key")
    _check_keys(patch)
    return _merge(cfg, patch)


def load_config(path=None, overrides=(), profile=None, seed=None):
    """Merge profile, file and overrides into a validated :class:`RunConfig`.

    Without a file the ``desk`` profile is used. A file is complete on its
    own unless it names a ``profile`` (or one is passed), in which case it
    only overrides that profile.
    """
    data = {}
    if path is not None:
        try:
            data = yaml.safe_load(Path(path).read_text()) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"config file {path} is not valid YAML/JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"config file {path} must hold a mapping")
    _check_keys(data)
    name = profile or data.get("profile") or (None if path is not None else "desk")
    if name is not None and name not in PROFILES:
        raise ConfigError(f"profile: unknown profile {name!r} (choose from {sorted(PROFILES)})")
    cfg = _merge(PROFILES[name], data) if name else copy.deepcopy(data)
    cfg["profile"] = name or "custom"
    for item in overrides:
        cfg = apply_override(cfg, item)
    if seed is not None:
        cfg["seed"] = seed
    return RunConfig(cfg)


def _section(cfg, name, keys=None):
    sec = cfg.get(name)
    if sec is None:
        raise ConfigError(f"missing section {name!r}")
    for k in keys or ():
        if k not in sec:
            raise ConfigError(f"missing key '{name}.{k}'")
    return sec


class RunConfig:
    """Validated configuration plus the objects built from it."""

    def __init__(self, raw):
        self.raw = raw
        self.seed = raw.get("seed", 0)
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError(f"seed must be a nonnegative integer, got {self.seed!r}")
        self.geometry = self._geometry()
        self.bin_edges, self.material_table = self._materials()
        self.materials = self._phantom_materials()
        self.spectrum = self._spectrum()
        self.recon = self._recon()
        out = _section(raw, "output", ["dir"])
        self.out_dir = Path(out["dir"])
        self.png = bool(out.get("png", True))
        self.noise = bool(raw["spectrum"].get("noise", True))
        for name in self.basis:
            if name not in self.material_table:
                raise ConfigError(f"phantom.basis: unknown material {name!r}")

    def _geometry(self):
        sec = _section(self.raw, "geometry", sorted(_GEOMETRY))
        try:
            return FanBeamGeometry(**{k: sec[k] for k in _GEOMETRY})
        except (GeometryError, TypeError) as exc:
            raise ConfigError(f"geometry: {exc}") from exc

    def _materials(self):
        ph = self.raw.get("phantom") or {}
        if not ph.get("materials"):
            raise ConfigError("phantom.materials: missing or empty materials section")
        try:
            edges, table = load_materials(ph.get("materials_file"))
        except (OSError, KeyError, ValueError) as exc:
            raise ConfigError(f"phantom.materials_file: {exc}") from exc
        if isinstance(ph["materials"], dict):
            table = {k: list(v) for k, v in ph["materials"].items()}
        return edges, table

    def _phantom_materials(self):
        mats = self.raw["phantom"]["materials"]
        names = list(mats) if isinstance(mats, (list, dict)) else None
        if not names:
            raise ConfigError("phantom.materials must list material names or map names to values")
        out = []
        for n in names:
            if n not in self.material_table:
                raise ConfigError(f"phantom.materials: unknown material {n!r}")
            mu = self.material_table[n]
            if len(mu) != len(self.bin_edges) - 1:
                raise ConfigError(f"phantom.materials: {n!r} needs {len(self.bin_edges) - 1} bin values")
            out.append((n, mu))
        return out

    @property
    def basis(self):
        return list(self.raw["phantom"].get("basis") or [m[0] for m in self.materials])

    def _spectrum(self):
        sec = _section(self.raw, "spectrum", ["photons_per_path"])
        try:
            e, w = load_spectrum_curve(sec.get("curve_file"))
            return SpectrumModel.from_curve(e, w, self.bin_edges, float(sec["photons_per_path"]))
        except (OSError, KeyError, ValueError) as exc:
            raise ConfigError(f"spectrum: {exc}") from exc

    def _recon(self):
        sec = _section(self.raw, "recon", sorted(_RECON - {"n_subsets", "chunk"}))
        try:
            patch = PatchGridSpec(
                patch_w=int(sec["patch_w"]),
                patch_h=int(sec["patch_h"]),
                stride=int(sec["stride"]),
                search_window=int(sec["search_window"]),
                t=int(sec["t"]),
            )
            kw = {k: sec[k] for k in _RECON - {"patch_w", "patch_h", "stride", "search_window", "t"} if k in sec}
            for k in ("outer_iters", "inner_iters", "match_interval", "chunk"):
                if k in kw:
                    kw[k] = int(kw[k])
            for k in ("alpha", "tau", "theta", "mu", "beta", "rho", "epsilon", "c_const"):
                kw[k] = float(kw[k])
            return ReconConfig(patch=patch, seed=self.seed, **kw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"recon: {exc}") from exc

    def phantom_spec(self):
        ph = self.raw["phantom"]
        g = self.geometry
        try:
            return default_phantom(g.n_w, g.n_h, g.pixel_size, self.materials, ph.get("shapes_file"))
        except (OSError, KeyError, ValueError) as exc:
            raise ConfigError(f"phantom.shapes_file: {exc}") from exc

    def dump(self):
        return yaml.safe_dump(self.raw, sort_keys=True)
