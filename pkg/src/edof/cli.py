"""Command line entry point: ``edof {fuse,simulate,synth,eval,bench,train}``.

Exit status: 0 success, 1 at least one stack failed, 2 usage error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import acquisition, neural, pipeline
from .imaging import load_stack, read_manifest, save_stack

EXIT_OK, EXIT_PARTIAL, EXIT_USAGE = 0, 1, 2

# published reference timings, seconds for 100 stacks of 512x512 (3 / 5 planes)
REFERENCE_TIMINGS = {
    3: {"wavelet": 142.0, "wavelet-parallel": 37.0, "cnn-3d": 29.0, "cnn-max": 18.0},
    5: {"wavelet": 234.0, "wavelet-parallel": 64.0, "cnn-3d": 31.0, "cnn-max": 20.0},
}


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", type=Path, default=Path("out"))
    p.add_argument("--seed", type=int, default=0)


def _fusion_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--method", choices=pipeline.METHODS, default="wavelet")
    p.add_argument("--levels", type=int, default=12)
    p.add_argument("--wavelet", choices=["sym8", "haar"], default="sym8")
    p.add_argument("--weights", type=Path)
    p.add_argument("--scenario", default="none",
                   help="none | zstep:K | bin:F | lowmag[:NA[:SCALE]]")
    p.add_argument("--bit-depth", type=int, choices=[8, 16], default=16)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="edof", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fuse", help="fuse stacks into EDoF images")
    p.add_argument("inputs", nargs="*", type=Path, help="manifest files or directories")
    _common(p)
    _fusion_flags(p)

    p = sub.add_parser("simulate", help="degrade stacks into a low-resolution scenario")
    p.add_argument("inputs", nargs="*", type=Path)
    _common(p)
    p.add_argument("--mode", choices=["zstep", "bin", "lowmag"], required=True)
    p.add_argument("--stride", type=int, default=3)
    p.add_argument("--factor", type=int, default=4)
    p.add_argument("--na", type=float, default=0.6)
    p.add_argument("--wavelength", type=float, default=0.55)
    p.add_argument("--downscale", type=float, default=2.5)
    p.add_argument("--bit-depth", type=int, choices=[8, 16], default=16)

    p = sub.add_parser("synth", help="write synthetic stacks with ground truth")
    _common(p)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--planes", type=int, default=5)
    p.add_argument("--size", type=int, nargs=2, metavar=("H", "W"), default=[128, 128])
    p.add_argument("--objects", type=int, default=12)
    p.add_argument("--blur-slope", type=float, default=1.5)
    p.add_argument("--noise", type=float, default=0.005)
    p.add_argument("--pixel-pitch", type=float, default=0.065)
    p.add_argument("--z-step", type=float, default=0.5)
    p.add_argument("--bit-depth", type=int, choices=[8, 16], default=16)

    p = sub.add_parser("eval", help="SSIM and Dice of fused images against references")
    p.add_argument("reference", type=Path)
    p.add_argument("test", type=Path)
    _common(p)
    p.add_argument("--pixel-pitch", type=float, default=0.065)
    p.add_argument("--method", default="")
    p.add_argument("--scenario", default="")

    p = sub.add_parser("bench", help="sequential vs parallel fusion timing")
    p.add_argument("inputs", nargs="*", type=Path)
    _common(p)
    _fusion_flags(p)

    p = sub.add_parser("train", help="train a fusion network on wavelet EDoF targets")
    p.add_argument("data", type=Path)
    _common(p)
    p.add_argument("--arch", choices=["max", "volumetric"], default="max")
    p.add_argument("--width", type=int, default=32)
    p.add_argument("--blocks", type=int, default=9)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=1)
    p.add_argument("--patch", type=int, default=64)
    p.add_argument("--scenario", default="none")
    p.add_argument("--levels", type=int, default=12)
    p.add_argument("--wavelet", choices=["sym8", "haar"], default="sym8")
    return parser


def _job(args) -> pipeline.BatchJob:
    return pipeline.BatchJob(
        manifests=tuple(pipeline.discover_manifests(args.inputs)),
        method=args.method,
        scenario=pipeline.Scenario.parse(args.scenario),
        workers=args.workers,
        out_dir=args.out,
        levels=args.levels,
        wavelet=args.wavelet,
        weights=args.weights,
        bit_depth=args.bit_depth,
    )


def cmd_fuse(args) -> int:
    results = pipeline.run_fuse_batch(_job(args))
    failed = [r for r in results if not r.ok]
    for r in failed:
        print(f"{r.stack_id}: {r.error}", file=sys.stderr)
    print(f"fused {len(results) - len(failed)}/{len(results)} stacks into {args.out}")
    return EXIT_PARTIAL if failed else EXIT_OK


def cmd_simulate(args) -> int:
    manifests = pipeline.discover_manifests(args.inputs)
    if not manifests:
        raise pipeline.UsageError("no stack manifests given")
    if args.mode == "zstep":
        scenario = pipeline.Scenario("zstep", stride=args.stride)
    elif args.mode == "bin":
        scenario = pipeline.Scenario("bin", factor=args.factor)
    else:
        scenario = pipeline.Scenario("lowmag", na=args.na, wavelength=args.wavelength,
                                     scale=args.downscale)
    failures = 0
    for m in manifests:
        try:
            stack = scenario.apply(load_stack(read_manifest(m)))
            save_stack(stack, args.out, pipeline.stack_id(m), args.bit_depth)
        except Exception as exc:
            failures += 1
            print(f"{pipeline.stack_id(m)}: {type(exc).__name__}: {exc}", file=sys.stderr)
    print(f"wrote {len(manifests) - failures} {scenario.label} stacks to {args.out}")
    return EXIT_PARTIAL if failures else EXIT_OK


def cmd_synth(args) -> int:
    h, w = args.size
    cfg = acquisition.SynthConfig(
        seed=args.seed, height=h, width=w, planes=args.planes, objects=args.objects,
        blur_slope=args.blur_slope, noise_sigma=args.noise,
        pixel_pitch=args.pixel_pitch, z_step=args.z_step)
    paths = pipeline.write_synthetic(args.out, cfg, args.count, bit_depth=args.bit_depth)
    print(f"wrote {len(paths)} synthetic stacks to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    args.out.mkdir(parents=True, exist_ok=True)
    out_csv = args.out / "eval.csv"
    rows = pipeline.run_eval(args.reference, args.test, args.pixel_pitch, out_csv,
                             args.method, args.scenario)
    print(f"SSIM {pipeline.format_mean_std(r.ssim for r in rows)}  "
          f"Dice {pipeline.format_mean_std(r.dice for r in rows)}  -> {out_csv}")
    return EXIT_OK


def cmd_bench(args) -> int:
    report = pipeline.run_bench(_job(args))
    ref = REFERENCE_TIMINGS.get(report.planes, {})
    print(f"method={report.method} planes={report.planes} stacks={report.stacks}")
    print(f"sequential {report.sequential_s:.2f} s, {report.workers} workers "
          f"{report.parallel_s:.2f} s, speedup {report.speedup:.2f}x")
    if ref:
        print(f"reference (100 stacks, 512x512): wavelet {ref['wavelet']:.0f} s, "
              f"parallel {ref['wavelet-parallel']:.0f} s, cnn-max {ref['cnn-max']:.0f} s")
    return EXIT_OK


def cmd_train(args) -> int:
    arch = neural.ArchConfig(args.arch, args.width, args.blocks)
    tcfg = neural.TrainConfig(steps=args.steps, learning_rate=args.lr,
                              batch_size=args.batch_size, patch_size=args.patch, seed=args.seed)
    out = args.out if args.out.suffix else args.out / "weights.edof"
    _, arch, losses = pipeline.run_train(args.data, arch, tcfg, out,
                                         pipeline.Scenario.parse(args.scenario),
                                         args.levels, args.wavelet)
    if losses:
        print(f"trained {arch.variant} F={arch.width} R={arch.residual_blocks}: "
              f"loss {losses[0]:.5f} -> {losses[-1]:.5f}; weights in {out}")
    return EXIT_OK


COMMANDS = {
    "fuse": cmd_fuse, "simulate": cmd_simulate, "synth": cmd_synth,
    "eval": cmd_eval, "bench": cmd_bench, "train": cmd_train,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except pipeline.UsageError as exc:
        print(f"edof {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
