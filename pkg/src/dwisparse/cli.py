"""Command line interface for the denoising pipeline and its stages.

Subcommands map 1:1 onto the library: ``denoise`` runs the full
pipeline, ``stabilize`` only the bias removal, ``estimate-noise``
writes a sigma map, ``simulate`` corrupts a clean volume and
``evaluate`` reports quality metrics.  Every output volume gets a
line-oriented ``key=value`` provenance sidecar sufficient to reproduce
the run.  Exit codes: 0 success, 1 runtime failure, 2 usage or input
error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time

import numpy as np

from .blocks import BlockConfig
from .io import (
    Volume4D,
    VolumeIOError,
    read_gradients,
    read_mask,
    read_volume,
    write_volume,
)
from .metrics import quality_report
from .noise import (
    NoBackgroundError,
    NoiseField,
    estimate_noise_field,
    estimate_sigma_piesno,
    local_noise_variance,
)
from .reconstruct import DenoiseConfig, nlsam_denoise
from .simulate import NoiseSpec, add_noise
from .stabilization import stabilize_volume

log = logging.getLogger("dwisparse")

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


class UsageError(Exception):
    """Bad arguments or unreadable inputs; maps to exit code 2."""


def _require_file(path: str, role: str) -> str:
    if not os.path.isfile(path):
        raise UsageError(f"{role} file not found: {path}")
    return path


def _sidecar(out_path: str, entries: dict) -> None:
    path = out_path + ".provenance.txt"
    with open(path, "w") as fh:
        for key, val in entries.items():
            fh.write(f"{key}={val}\n")
    log.info("provenance written to %s", path)


def _load_noise_field(args, vol: Volume4D) -> NoiseField:
    """Build the sigma field the way the user asked for."""
    if args.noise_source == "map":
        if not args.noise_map:
            raise UsageError("--noise-source map requires --noise-map")
        _require_file(args.noise_map, "noise map")
        sig = read_volume(args.noise_map)
        return NoiseField(sig.data[..., 0] if sig.data.ndim == 4 else sig.data,
                          n_coils=args.coils, provenance="noise_map")
    if args.noise_source == "piesno":
        return estimate_sigma_piesno(vol, n_coils=args.coils)
    if args.noise_source == "field":
        return estimate_noise_field(vol, n_coils=args.coils)
    raise UsageError(f"unknown noise source: {args.noise_source}")


def _denoise_config(args) -> DenoiseConfig:
    block = BlockConfig(patch_size=args.patch_size, angular_neighbors=args.angular_neighbors)
    return DenoiseConfig(
        block=block,
        stabilize=not args.no_stabilize,
        fast_mode=args.mode == "fast",
        global_dictionary=args.dictionary == "global",
        literal_weights=args.eq5 == "literal",
        epochs=args.epochs,
        n_threads=args.threads,
        seed=args.seed,
    )


def _common_run_entries(args, started: float) -> dict:
    return {
        "command": " ".join(sys.argv[1:]),
        "seed": getattr(args, "seed", ""),
        "wall_time_s": f"{time.monotonic() - started:.3f}",
    }


def cmd_denoise(args) -> int:
    started = time.monotonic()
    _require_file(args.input, "input volume")
    _require_file(args.bval, "bval")
    _require_file(args.bvec, "bvec")
    vol = read_volume(args.input)
    table = read_gradients(args.bval, args.bvec, b0_threshold=args.b0_threshold)
    mask = read_mask(_require_file(args.mask, "mask")) if args.mask else None
    field = _load_noise_field(args, vol)
    cfg = _denoise_config(args)
    out = nlsam_denoise(vol, table, field, config=cfg, mask=mask)
    write_volume(out, args.output)
    entries = {
        "subcommand": "denoise",
        "input": args.input,
        "bval": args.bval,
        "bvec": args.bvec,
        "mask": args.mask or "",
        "coils": args.coils,
        "mode": args.mode,
        "stabilize": not args.no_stabilize,
        "noise_source": args.noise_source,
        "noise_map": args.noise_map or "",
        "sigma_provenance": field.provenance,
        "sigma_median": f"{float(np.median(field.sigma)):.6g}",
        "patch_size": args.patch_size,
        "angular_neighbors": args.angular_neighbors,
        "epochs": args.epochs,
        "dictionary": args.dictionary,
        "eq5": args.eq5,
        "threads": args.threads,
        "b0_threshold": args.b0_threshold,
    }
    entries.update(_common_run_entries(args, started))
    _sidecar(args.output, entries)
    log.info("denoised volume written to %s", args.output)
    return EXIT_OK


def cmd_stabilize(args) -> int:
    started = time.monotonic()
    _require_file(args.input, "input volume")
    vol = read_volume(args.input)
    field = _load_noise_field(args, vol)
    out = stabilize_volume(vol, field)
    write_volume(out, args.output)
    entries = {
        "subcommand": "stabilize",
        "input": args.input,
        "coils": args.coils,
        "noise_source": args.noise_source,
        "noise_map": args.noise_map or "",
        "sigma_provenance": field.provenance,
        "sigma_median": f"{float(np.median(field.sigma)):.6g}",
    }
    entries.update(_common_run_entries(args, started))
    _sidecar(args.output, entries)
    log.info("stabilized volume written to %s", args.output)
    return EXIT_OK


def cmd_estimate_noise(args) -> int:
    started = time.monotonic()
    _require_file(args.input, "input volume")
    vol = read_volume(args.input)
    if args.method == "piesno":
        field = estimate_sigma_piesno(vol, n_coils=args.coils)
    elif args.method == "local":
        field = local_noise_variance(vol, n_coils=args.coils)
    elif args.method == "field":
        field = estimate_noise_field(vol, n_coils=args.coils)
    else:  # argparse choices guard this
        raise UsageError(f"unknown method: {args.method}")
    sigma_vol = Volume4D(field.sigma[..., None], spacing=vol.spacing)
    write_volume(sigma_vol, args.output, dtype="float64")
    print(f"sigma_median={float(np.median(field.sigma)):.6g}")
    print(f"sigma_mean={float(field.sigma.mean()):.6g}")
    entries = {
        "subcommand": "estimate-noise",
        "input": args.input,
        "method": args.method,
        "coils": args.coils,
        "sigma_provenance": field.provenance,
        "sigma_median": f"{float(np.median(field.sigma)):.6g}",
    }
    entries.update(_common_run_entries(args, started))
    _sidecar(args.output, entries)
    return EXIT_OK


def cmd_simulate(args) -> int:
    started = time.monotonic()
    _require_file(args.input, "input volume")
    vol = read_volume(args.input)
    mask = None
    if args.mask:
        mask = read_mask(_require_file(args.mask, "mask"))
    table = None
    if args.bval and args.bvec:
        table = read_gradients(
            _require_file(args.bval, "bval"),
            _require_file(args.bvec, "bvec"),
            b0_threshold=args.b0_threshold,
        )
    spec = NoiseSpec(snr=args.snr, n_coils=args.coils, beta=args.beta, seed=args.seed)
    noisy, field = add_noise(vol, spec, table=table, mask=mask)
    write_volume(noisy, args.output)
    if args.sigma_out:
        write_volume(
            Volume4D(field.sigma[..., None], spacing=vol.spacing),
            args.sigma_out,
            dtype="float64",
        )
    entries = {
        "subcommand": "simulate",
        "input": args.input,
        "snr": args.snr,
        "coils": args.coils,
        "beta": args.beta,
        "mask": args.mask or "",
        "sigma_out": args.sigma_out or "",
    }
    entries.update(_common_run_entries(args, started))
    _sidecar(args.output, entries)
    log.info("noisy volume written to %s", args.output)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    _require_file(args.reference, "reference volume")
    _require_file(args.test, "test volume")
    ref = read_volume(args.reference)
    test = read_volume(args.test)
    mask = None
    if args.mask:
        mask = read_mask(_require_file(args.mask, "mask"))
    report = quality_report(ref, test, mask=mask)
    print(f"psnr={report.psnr_mean:.4f}")
    print(f"ssim={report.ssim_mean:.6f}")
    for v, (p, s) in enumerate(zip(report.psnr_db, report.ssim)):
        print(f"psnr_vol{v}={p:.4f}")
        print(f"ssim_vol{v}={s:.6f}")
    return EXIT_OK


def _add_noise_source_args(p: argparse.ArgumentParser) -> None:
    p.add_argument(
        "--noise-source",
        choices=("piesno", "field", "map"),
        default="piesno",
        help="where the sigma field comes from",
    )
    p.add_argument("--noise-map", default=None, help="sigma volume for --noise-source map")
    p.add_argument("--coils", type=int, default=1, help="number of receiver coils N")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dwisparse",
        description="Sparse angular-neighbor denoising for diffusion MRI",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="info-level logging")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    d = sub.add_parser("denoise", help="run the full denoising pipeline")
    d.add_argument("--in", dest="input", required=True, help="input 4D NIfTI volume")
    d.add_argument("--bval", required=True, help="b-values text file")
    d.add_argument("--bvec", required=True, help="gradient directions text file")
    d.add_argument("--out", dest="output", required=True, help="output volume path")
    d.add_argument("--mask", default=None, help="restrict processing to this mask")
    d.add_argument("--mode", choices=("full", "fast"), default="full")
    d.add_argument("--no-stabilize", action="store_true", help="skip bias removal")
    d.add_argument("--patch-size", type=int, default=3, help="cubic patch side, odd")
    d.add_argument("--angular-neighbors", type=int, default=4)
    d.add_argument("--epochs", type=int, default=150, help="dictionary training passes")
    d.add_argument(
        "--dictionary",
        choices=("per-subset", "global"),
        default="per-subset",
        help="train one dictionary per subset or share one",
    )
    d.add_argument(
        "--eq5",
        choices=("inverse", "literal"),
        default="inverse",
        help="aggregation weight form (see reconstruct module)",
    )
    d.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--b0-threshold", type=float, default=50.0)
    _add_noise_source_args(d)
    d.set_defaults(func=cmd_denoise)

    s = sub.add_parser("stabilize", help="remove the magnitude noise bias")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", dest="output", required=True)
    _add_noise_source_args(s)
    s.set_defaults(func=cmd_stabilize)

    e = sub.add_parser("estimate-noise", help="write a sigma map")
    e.add_argument("--in", dest="input", required=True)
    e.add_argument("--out", dest="output", required=True)
    e.add_argument("--method", choices=("piesno", "local", "field"), default="piesno")
    e.add_argument("--coils", type=int, default=1)
    e.set_defaults(func=cmd_estimate_noise)

    m = sub.add_parser("simulate", help="corrupt a clean volume with magnitude noise")
    m.add_argument("--in", dest="input", required=True)
    m.add_argument("--out", dest="output", required=True)
    m.add_argument("--snr", type=float, required=True)
    m.add_argument("--coils", type=int, default=1)
    m.add_argument("--beta", choices=("constant", "sphere"), default="constant")
    m.add_argument("--mask", default=None, help="mask for the b0 mean and beta center")
    m.add_argument("--bval", default=None)
    m.add_argument("--bvec", default=None)
    m.add_argument("--b0-threshold", type=float, default=50.0)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--sigma-out", default=None, help="also write the true sigma field")
    m.set_defaults(func=cmd_simulate)

    q = sub.add_parser("evaluate", help="psnr and ssim between two volumes")
    q.add_argument("--ref", dest="reference", required=True)
    q.add_argument("--test", required=True)
    q.add_argument("--mask", default=None)
    q.set_defaults(func=cmd_evaluate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse uses 2 for usage errors already
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (VolumeIOError, NoBackgroundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
