"""Throughput comparison against the published reference timings.

Writes ``--stacks`` synthetic stacks, then times wavelet fusion with one worker
and with ``--workers``, and an untrained cnn-max network of the chosen width.
Only the ratios are meaningful; the reference numbers come from other hardware.

    python scripts/bench_throughput.py --stacks 20 --planes 3 --workers 4
"""
import argparse
import os
import tempfile
import time
from pathlib import Path

import numpy as np

from edof import neural, pipeline
from edof.acquisition import SynthConfig
from edof.cli import REFERENCE_TIMINGS
from edof.imaging import load_stack, read_manifest


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--stacks", type=int, default=20)
    ap.add_argument("--planes", type=int, choices=[3, 5], default=3)
    ap.add_argument("--size", type=int, default=512)
    ap.add_argument("--workers", type=int, default=4)
    ap.add_argument("--width", type=int, default=4, help="cnn-max feature width F")
    ap.add_argument("--blocks", type=int, default=2, help="cnn-max residual blocks R")
    args = ap.parse_args()

    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        cfg = SynthConfig(seed=0, height=args.size, width=args.size, planes=args.planes, objects=150)
        manifests = pipeline.write_synthetic(tmp / "data", cfg, args.stacks)
        job = pipeline.BatchJob(tuple(manifests), workers=args.workers, out_dir=tmp / "out")
        report = pipeline.run_bench(job)

        arch = neural.ArchConfig("max", args.width, args.blocks)
        weights = tmp / "cnn.edof"
        neural.save_weights(neural.init_params(arch, 0, np.float32), arch, weights)
        cnn_job = pipeline.BatchJob(tuple(manifests), method="cnn-max", weights=weights)
        stacks = [load_stack(read_manifest(m)) for m in manifests]
        t0 = time.perf_counter()
        for s in stacks:
            pipeline.fuse(s, cnn_job)
        cnn_s = time.perf_counter() - t0

    ref = REFERENCE_TIMINGS[args.planes]
    scale = 100 / args.stacks
    print(f"{args.stacks} stacks of {args.planes}x{args.size}x{args.size}, {os.cpu_count()} CPU(s)")
    print(f"{'method':<20} {'seconds':>9} {'per 100':>9} {'reference':>10}")
    print(f"{'wavelet':<20} {report.sequential_s:9.2f} {report.sequential_s * scale:9.1f} {ref['wavelet']:10.0f}")
    print(f"{'wavelet x' + str(args.workers):<20} {report.parallel_s:9.2f} {report.parallel_s * scale:9.1f} "
          f"{ref['wavelet-parallel']:10.0f}")
    print(f"{f'cnn-max F={args.width} R={args.blocks}':<20} {cnn_s:9.2f} {cnn_s * scale:9.1f} {ref['cnn-max']:10.0f}")
    print(f"speedup {report.speedup:.2f}x (reference {ref['wavelet'] / ref['wavelet-parallel']:.2f}x); "
          f"cnn-max / wavelet {cnn_s / report.sequential_s:.2f} "
          f"(reference {ref['cnn-max'] / ref['wavelet']:.2f})")


if __name__ == "__main__":
    main()
