"""Spectral CT reconstruction with non-local cube tensor factorization."""

from .geometry import FanBeamGeometry, FanBeamProjector, GeometryError
from .kbr import KbrParams, KbrState, kbr_step, scalar_logsum_prox
from .metrics import BasisSet, MetricReport, decompose, psnr, rmse, ssim
from .patches import PatchGridSpec, build_grid, match_patches, normalize, denormalize
from .recon import ReconConfig, nlctf_reconstruct, sart_reconstruct
from .simulation import (
    PhantomSpec,
    SpectrumModel,
    counts_to_sinogram,
    default_phantom,
    rasterize_phantom,
    simulate_counts,
)
from .tensor_core import fold, hosvd, unfold

__version__ = "0.1.0"
