"""Image quality metrics and basis-material decomposition.

Volumes are ``(n_h, n_w, S)`` arrays; every metric is reported per
channel.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d
from scipy.optimize import nnls

__all__ = [
    "MetricReport",
    "BasisSet",
    "rmse",
    "psnr",
    "ssim",
    "evaluate",
    "decompose",
    "gaussian_window",
]

SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_RANGE = 255.0


def _pair(x, ref):
    x = np.asarray(x, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if x.shape != ref.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {ref.shape}")
    if x.ndim == 2:
        x, ref = x[..., None], ref[..., None]
    return x, ref


def rmse(x, ref):
    """Root mean square error per channel."""
    x, ref = _pair(x, ref)
    return np.sqrt(np.mean((x - ref) ** 2, axis=(0, 1)))


def psnr(x, ref):
    """``20*log10(max(ref_s) / rmse_s)`` in dB; ``inf`` when the channel is
    reproduced exactly."""
    x, ref = _pair(x, ref)
    peak = ref.max(axis=(0, 1))
    if np.any(peak <= 0):
        raise ValueError("psnr: reference channel has no positive value")
    err = rmse(x, ref)
    with np.errstate(divide="ignore"):
        return np.where(err > 0, 20.0 * np.log10(peak / np.where(err > 0, err, 1.0)), np.inf)


def gaussian_window(size=11, sigma=1.5):
    r = np.arange(size) - (size - 1) / 2
    w = np.exp(-0.5 * (r / sigma) ** 2)
    return w / w.sum()


def _filter(img, w):
    out = correlate1d(img, w, axis=0, mode="reflect")
    return correlate1d(out, w, axis=1, mode="reflect")


def _ssim_channel(x, ref, w):
    lo, hi = ref.min(), ref.max()
    span = hi - lo
    gain = SSIM_RANGE / span if span > 0 else 1.0
    a = (x - lo) * gain
    b = (ref - lo) * gain
    c1 = (SSIM_K1 * SSIM_RANGE) ** 2
    c2 = (SSIM_K2 * SSIM_RANGE) ** 2
    ua, ub = _filter(a, w), _filter(b, w)
    vaa = _filter(a * a, w) - ua * ua
    vbb = _filter(b * b, w) - ub * ub
    vab = _filter(a * b, w) - ua * ub
    smap = ((2 * ua * ub + c1) * (2 * vab + c2)) / ((ua * ua + ub * ub + c1) * (vaa + vbb + c2))
    pad = (len(w) - 1) // 2
    return float(smap[pad:-pad, pad:-pad].mean())


def ssim(x, ref, win_size=11, sigma=1.5):
    """Mean SSIM per channel.

    Both images are mapped by the affine transform that takes the
    reference channel onto ``[0, 255]``; local statistics use a Gaussian
    window and only window positions fully inside the image are averaged.
    """
    x, ref = _pair(x, ref)
    if min(x.shape[:2]) < win_size:
        raise ValueError(f"ssim: image smaller than the {win_size}x{win_size} window")
    w = gaussian_window(win_size, sigma)
    return np.array([_ssim_channel(x[..., s], ref[..., s], w) for s in range(x.shape[2])])


@dataclass
class MetricReport:
    rmse: np.ndarray
    psnr: np.ndarray
    ssim: np.ndarray
    residual: dict = field(default_factory=dict)

    @property
    def mean_rmse(self):
        return float(np.mean(self.rmse))

    @property
    def mean_psnr(self):
        return float(np.mean(self.psnr))

    @property
    def mean_ssim(self):
        return float(np.mean(self.ssim))

    def to_text(self):
        """``key=value`` lines, one per channel and metric."""
        lines = []
        for s in range(len(self.rmse)):
            r, p, q = float(self.rmse[s]), float(self.psnr[s]), float(self.ssim[s])
            lines.append(f"channel={s + 1} rmse={r!r} psnr={p!r} ssim={q!r}")
        lines.append(f"mean rmse={self.mean_rmse!r} psnr={self.mean_psnr!r} ssim={self.mean_ssim!r}")
        for k, v in self.residual.items():
            lines.append(f"residual {k}={float(v)!r}")
        return "\n".join(lines) + "\n"

    def to_table(self):
        rows = ["channel\trmse\tpsnr\tssim"]
        for s in range(len(self.rmse)):
            rows.append(f"{s + 1}\t{float(self.rmse[s])!r}\t{float(self.psnr[s])!r}\t{float(self.ssim[s])!r}")
        return "\n".join(rows) + "\n"

    @classmethod
    def from_table(cls, text):
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines or lines[0].split("\t") != ["channel", "rmse", "psnr", "ssim"]:
            raise ValueError("not a metric table")
        vals = np.array([[float(v) for v in ln.split("\t")[1:]] for ln in lines[1:]]).reshape(-1, 3)
        return cls(rmse=vals[:, 0], psnr=vals[:, 1], ssim=vals[:, 2])


def evaluate(x, ref):
    return MetricReport(rmse=rmse(x, ref), psnr=psnr(x, ref), ssim=ssim(x, ref))


@dataclass
class BasisSet:
    """Material signatures ``(n_materials, S)`` in 1/cm."""

    names: list
    signatures: np.ndarray

    def __post_init__(self):
        self.signatures = np.atleast_2d(np.asarray(self.signatures, dtype=np.float64))
        if len(self.names) != self.signatures.shape[0]:
            raise ValueError("basis: one name per signature required")

    @property
    def condition_number(self):
        return float(np.linalg.cond(self.signatures.T))


def decompose(volume, basis):
    """Per-pixel nonnegative least-squares fractions of each basis material.

    Returns ``(fractions, residual)`` with shapes ``(n_h, n_w, M)`` and
    ``(n_h, n_w)``; the residual is the 2-norm misfit of each pixel.
    """
    vol = np.asarray(volume, dtype=np.float64)
    a = basis.signatures.T  # (S, M)
    if vol.shape[-1] != a.shape[0]:
        raise ValueError(f"volume has {vol.shape[-1]} channels, basis has {a.shape[0]}")
    if a.shape[0] < a.shape[1]:
        raise ValueError("decompose: need at least as many channels as materials")
    cond = basis.condition_number
    if cond > 1e8:
        warnings.warn(f"basis is ill-conditioned (condition number {cond:.3g})", RuntimeWarning)
    pix = vol.reshape(-1, a.shape[0])
    frac = np.zeros((len(pix), a.shape[1]))
    res = np.zeros(len(pix))
    for i, b in enumerate(pix):
        if np.any(b):
            frac[i], res[i] = nnls(a, b)
    return frac.reshape(vol.shape[:-1] + (a.shape[1],)), res.reshape(vol.shape[:-1])
