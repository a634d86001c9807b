"""Raw volume files with plain-text headers, and PNG previews.

A volume ``name`` is stored as two files:

``name.f64``
    64-bit little-endian floats in Fortran order (first index fastest),
    the same layout as :func:`spectral_nlctf.tensor_core.flatten`.
``name.hdr``
    ``key = value`` lines; ``dims`` lists the array shape.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

__all__ = ["VolumeFile", "write_volume", "read_volume", "write_png", "write_rgb_png", "write_table", "read_table"]

MAGIC = "spectral-nlctf volume"


class VolumeFile:
    """Array plus header fields (strings, numbers or lists of numbers)."""

    def __init__(self, data, **header):
        self.data = np.asarray(data, dtype=np.float64)
        self.header = dict(header)

    @property
    def dims(self):
        return self.data.shape


def _fmt(value):
    if isinstance(value, (list, tuple, np.ndarray)):
        return " ".join(_fmt(v) for v in value)
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def _parse(text):
    parts = text.split()
    vals = []
    for p in parts:
        try:
            vals.append(int(p))
        except ValueError:
            try:
                vals.append(float(p))
            except ValueError:
                return text
    return vals[0] if len(vals) == 1 else vals


def _paths(path):
    path = Path(path)
    stem = path.with_suffix("") if path.suffix in (".f64", ".hdr") else path
    return stem.with_suffix(".f64"), stem.with_suffix(".hdr")


def write_volume(path, data, **header):
    """Write ``data`` and its header; returns the payload path."""
    data = np.asarray(data, dtype=np.float64)
    payload, hdr = _paths(path)
    payload.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"# {MAGIC}", f"dims = {_fmt(list(data.shape))}", "dtype = float64-le", "layout = fortran"]
    for key in sorted(header):
        if key in ("dims", "dtype", "layout"):
            raise ValueError(f"reserved header key {key!r}")
        lines.append(f"{key} = {_fmt(header[key])}")
    hdr.write_text("\n".join(lines) + "\n")
    payload.write_bytes(data.astype("<f8").tobytes(order="F"))
    return payload


def read_volume(path):
    payload, hdr = _paths(path)
    if not hdr.exists() or not payload.exists():
        raise FileNotFoundError(f"volume {payload} or its header {hdr} is missing")
    header = {}
    lines = hdr.read_text().splitlines()
    if not lines or lines[0].strip() != f"# {MAGIC}":
        raise ValueError(f"{hdr}: not a volume header")
    for ln in lines[1:]:
        if not ln.strip() or ln.startswith("#"):
            continue
        key, _, val = ln.partition("=")
        header[key.strip()] = _parse(val.strip())
    dims = header.pop("dims")
    dims = [dims] if isinstance(dims, int) else dims
    if not isinstance(dims, list) or not dims or min(dims) < 1:
        raise ValueError(f"{hdr}: dims must be positive integers")
    raw = payload.read_bytes()
    if len(raw) != 8 * int(np.prod(dims)):
        raise ValueError(f"{payload}: {len(raw)} bytes, expected {8 * int(np.prod(dims))} for dims {dims}")
    header.pop("dtype", None)
    header.pop("layout", None)
    data = np.frombuffer(raw, dtype="<f8").reshape(dims, order="F").astype(np.float64)
    return VolumeFile(data, **header)


def _to_u8(img, lo, hi):
    span = hi - lo if hi > lo else 1.0
    return (np.clip((img - lo) / span, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def write_png(path_prefix, image, window):
    """8-bit grayscale preview; the window is part of the file name."""
    lo, hi = float(window[0]), float(window[1])
    path = Path(f"{path_prefix}_w{lo:.4g}-{hi:.4g}.png")
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(_to_u8(np.asarray(image, dtype=np.float64), lo, hi), mode="L").save(path)
    return path


def write_rgb_png(path, rgb):
    """RGB overlay from three ``[0, 1]`` maps stacked on the last axis."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(_to_u8(np.asarray(rgb, dtype=np.float64), 0.0, 1.0), mode="RGB").save(path)
    return path


def write_table(path, rows):
    """Tab-separated table from a list of dicts sharing their keys."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not rows:
        path.write_text("")
        return path
    keys = list(rows[0])
    for r in rows[1:]:
        keys += [k for k in r if k not in keys]
    out = ["\t".join(keys)]
    for r in rows:
        out.append("\t".join(_fmt(r[k]) if k in r else "" for k in keys))
    path.write_text("\n".join(out) + "\n")
    return path


def read_table(path):
    lines = [ln for ln in Path(path).read_text().splitlines() if ln]
    if not lines:
        return []
    keys = lines[0].split("\t")
    rows = []
    for ln in lines[1:]:
        row = {}
        for k, v in zip(keys, ln.split("\t")):
            if v == "":
                continue
            row[k] = _parse(v)
        rows.append(row)
    return rows
