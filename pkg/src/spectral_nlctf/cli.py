"""``spectral-nlctf`` command-line front end.

Exit codes: 0 success, 2 configuration or input error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import simulation as sim
from .config import ConfigError, load_config
from .geometry import FanBeamProjector, GeometryError
from .metrics import BasisSet, decompose, evaluate
from .recon import ReconError, data_operator, nlctf_reconstruct, sart_reconstruct
from .volume_io import read_volume, write_png, write_rgb_png, write_table, write_volume

log = logging.getLogger("spectral_nlctf")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


class InputError(ValueError):
    pass


def _previews(cfg, stem, vol, windows=None):
    if not cfg.png:
        return
    for s in range(vol.shape[2]):
        hi = float(vol[..., s].max()) if windows is None else windows[s]
        write_png(cfg.out_dir / "png" / f"{stem}_ch{s + 1}", vol[..., s], (0.0, hi if hi > 0 else 1.0))


def _common_header(cfg):
    return {
        "profile": cfg.raw["profile"],
        "seed": cfg.seed,
        "bin_edges_kev": list(cfg.bin_edges),
    }


def _check_image(cfg, vol, what):
    if vol.ndim != 3 or vol.shape[:2] != cfg.geometry.image_shape:
        raise InputError(f"{what}: dims {list(vol.shape)} do not match the geometry grid {cfg.geometry.image_shape}")


def cmd_phantom(cfg, args):
    truth = sim.rasterize_phantom(cfg.phantom_spec())
    hdr = _common_header(cfg)
    p = write_volume(
        cfg.out_dir / "truth", truth.volume, kind="attenuation", units="1/cm",
        pixel_size_mm=cfg.geometry.pixel_size, materials=" ".join(truth.material_names), **hdr,
    )  # fmt: skip
    write_volume(cfg.out_dir / "labels", truth.labels[..., None].astype(np.float64), kind="labels",
                 materials=" ".join(truth.material_names), **hdr)  # fmt: skip
    _previews(cfg, "truth", truth.volume)
    print(f"wrote {p}")


def cmd_project(cfg, args):
    truth = read_volume(args.truth).data
    _check_image(cfg, truth, "truth")
    if truth.shape[2] != cfg.spectrum.n_bins:
        raise InputError(f"truth has {truth.shape[2]} channels, spectrum has {cfg.spectrum.n_bins} bins")
    proj = FanBeamProjector(cfg.geometry)
    if cfg.noise:
        counts = sim.simulate_counts(truth, proj, cfg.spectrum, cfg.seed)
    else:
        counts = sim.expected_counts(truth, proj, cfg.spectrum)
    sino = sim.counts_to_sinogram(counts, cfg.spectrum)
    hdr = dict(_common_header(cfg), n0=list(cfg.spectrum.n0), noise=int(cfg.noise))
    write_volume(cfg.out_dir / "counts", counts, kind="counts", **hdr)
    p = write_volume(cfg.out_dir / "sino", sino, kind="sinogram", units="line integral", **hdr)
    print(f"wrote {p}")


def _trace_logger(algo):
    def cb(it, _state):
        log.info("%s iteration %d done", algo, it)

    return cb


def cmd_recon(cfg, args):
    sino = read_volume(args.sino).data
    if sino.ndim != 3 or sino.shape[:2] != cfg.geometry.sino_shape:
        raise InputError(f"sinogram dims {list(sino.shape)} do not match the geometry {cfg.geometry.sino_shape}")
    ref = None
    if args.reference:
        ref = read_volume(args.reference).data
        _check_image(cfg, ref, "reference")
        if ref.shape[2] != sino.shape[2]:
            raise InputError("reference and sinogram channel counts differ")
    rc = cfg.recon.with_updates(threads=args.threads)
    op = data_operator(FanBeamProjector(cfg.geometry), rc.n_subsets)
    if args.algo == "sart":
        vol, trace = sart_reconstruct(sino, op, rc.outer_iters, rc.beta, reference=ref)
    else:
        vol, trace = nlctf_reconstruct(sino, op, rc, reference=ref, callback=_trace_logger("nlctf"))
    stem = args.name or f"recon_{args.algo}"
    p = write_volume(cfg.out_dir / stem, vol, kind="attenuation", units="1/cm", algo=args.algo,
                     iterations=rc.outer_iters, **_common_header(cfg))  # fmt: skip
    write_table(cfg.out_dir / f"{stem}_trace.tsv", trace)
    _previews(cfg, stem, vol)
    if trace and "rmse_mean" in trace[-1]:
        print(f"final rmse_mean={trace[-1]['rmse_mean']!r}")
    print(f"wrote {p}")


def cmd_evaluate(cfg, args):
    x = read_volume(args.volume).data
    ref = read_volume(args.reference).data
    if x.shape != ref.shape:
        raise InputError(f"volume dims {list(x.shape)} and reference dims {list(ref.shape)} differ")
    report = evaluate(x, ref)
    stem = args.name or f"report_{Path(args.volume).stem}"
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    (cfg.out_dir / f"{stem}.txt").write_text(report.to_text())
    (cfg.out_dir / f"{stem}.tsv").write_text(report.to_table())
    sys.stdout.write(report.to_text())


def cmd_decompose(cfg, args):
    vol = read_volume(args.volume).data
    basis = BasisSet(cfg.basis, np.array([cfg.material_table[n] for n in cfg.basis]))
    if vol.ndim != 3 or vol.shape[2] != basis.signatures.shape[1]:
        raise InputError(f"volume dims {list(vol.shape)} do not match a {basis.signatures.shape[1]}-bin basis")
    frac, resid = decompose(vol, basis)
    stem = args.name or f"decomp_{Path(args.volume).stem}"
    hdr = dict(_common_header(cfg), materials=" ".join(basis.names))
    write_volume(cfg.out_dir / f"{stem}_fractions", frac, kind="fractions", **hdr)
    write_volume(cfg.out_dir / f"{stem}_residual", resid[..., None], kind="residual", units="1/cm", **hdr)
    rgb_order = [n for n in ("bone", "water", "iodine")]
    if all(n in basis.names for n in rgb_order):
        rgb = np.stack([frac[..., basis.names.index(n)] for n in rgb_order], axis=-1)
        write_rgb_png(cfg.out_dir / f"{stem}_overlay_rgb.png", rgb)
    lines = [f"materials={' '.join(basis.names)}", f"condition_number={basis.condition_number!r}",
             f"residual_mean={float(resid.mean())!r}"]  # fmt: skip
    if args.labels:
        labels = read_volume(args.labels)
        names = str(labels.header.get("materials", "")).split()
        lab = labels.data[..., 0].astype(int)
        body = lab > 0
        if body.any():
            mapped = np.array([-1] + [basis.names.index(n) if n in basis.names else -1 for n in names])
            agree = np.argmax(frac, axis=-1)[body] == mapped[lab[body]]
            lines.append(f"label_agreement={float(agree.mean())!r}")
    (cfg.out_dir / f"{stem}_report.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))


COMMANDS = {
    "phantom": cmd_phantom,
    "project": cmd_project,
    "recon": cmd_recon,
    "evaluate": cmd_evaluate,
    "decompose": cmd_decompose,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML or JSON configuration file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a configuration value, e.g. recon.mu=0")  # fmt: skip
    common.add_argument("--seed", type=int, help="random seed (overrides the config)")
    common.add_argument("--threads", type=int, default=os.cpu_count() or 1, help="worker threads")
    common.add_argument("--profile", choices=["paper-sim", "desk"], help="built-in parameter profile")
    common.add_argument("--out", help="output directory (same as --set output.dir=...)")
    common.add_argument("--name", help="stem of the output files")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="spectral-nlctf", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("phantom", parents=[common], help="rasterize the ground-truth phantom")
    p = sub.add_parser("project", parents=[common], help="simulate photon counts and sinograms")
    p.add_argument("--truth", required=True)
    p = sub.add_parser("recon", parents=[common], help="reconstruct a spectral volume")
    p.add_argument("--sino", required=True)
    p.add_argument("--algo", default="nlctf", help="sart or nlctf")
    p.add_argument("--reference", help="volume used for per-iteration RMSE/PSNR")
    p = sub.add_parser("evaluate", parents=[common], help="RMSE/PSNR/SSIM against a reference")
    p.add_argument("--volume", required=True)
    p.add_argument("--reference", required=True)
    p = sub.add_parser("decompose", parents=[common], help="nonnegative basis-material fractions")
    p.add_argument("--volume", required=True)
    p.add_argument("--labels", help="label map to score the material assignment against")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be at least 1")
        if args.command == "recon" and args.algo not in ("sart", "nlctf"):
            raise ConfigError(f"unknown algo {args.algo!r} (choose sart or nlctf)")
        overrides = list(args.set) + ([f"output.dir={args.out}"] if args.out else [])
        cfg = load_config(args.config, overrides, args.profile, args.seed)
        with threadpool_limits(limits=1):
            COMMANDS[args.command](cfg, args)
    except ReconError as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, InputError, GeometryError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
