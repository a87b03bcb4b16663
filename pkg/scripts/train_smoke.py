"""Train a small fusion network on wavelet EDoF targets and compare it on held-out stacks.

    python scripts/train_smoke.py --train 8 --test 4 --steps 300
"""
import argparse

import numpy as np

from edof import metrics, neural
from edof.acquisition import SynthConfig, gen_synthetic_stack
from edof.pipeline import Scenario, format_mean_std
from edof.wavelet import fuse_wavelet


def pairs(seeds, size, scenario):
    out = []
    for seed in seeds:
        stack, gt = gen_synthetic_stack(SynthConfig(seed=seed, height=size, width=size, planes=14))
        degraded = neural.pre_upsample(scenario.apply(stack), size, size)
        out.append((degraded, fuse_wavelet(stack), gt))
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--train", type=int, default=8)
    ap.add_argument("--test", type=int, default=4)
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--steps", type=int, default=300)
    ap.add_argument("--patch", type=int, default=32)
    ap.add_argument("--width", type=int, default=4)
    ap.add_argument("--blocks", type=int, default=2)
    ap.add_argument("--arch", choices=["max", "volumetric"], default="max")
    ap.add_argument("--scenario", default="zstep:5")
    args = ap.parse_args()

    scenario = Scenario.parse(args.scenario)
    train_set = pairs(range(args.train), args.size, scenario)
    test_set = pairs(range(1000, 1000 + args.test), args.size, scenario)
    planes = len(train_set[0][0]) if args.arch == "volumetric" else 0
    arch = neural.ArchConfig(args.arch, args.width, args.blocks, planes)
    tcfg = neural.TrainConfig(steps=args.steps, patch_size=args.patch)
    params, losses = neural.train(neural.init_params(arch, 0), arch,
                                  [(s, t) for s, t, _ in train_set], tcfg)
    k = max(1, len(losses) // 10)
    print(f"loss: first {k} steps {np.mean(losses[:k]):.5f}, last {k} steps {np.mean(losses[-k:]):.5f}")

    cnn, wav = [], []
    for stack, _, gt in test_set:
        cnn.append(metrics.ssim(neural.forward(params, arch, stack), gt))
        wav.append(metrics.ssim(fuse_wavelet(stack), gt))
    print(f"held-out SSIM vs GT ({scenario.label}): cnn-{args.arch} {format_mean_std(cnn)}, "
          f"wavelet {format_mean_std(wav)}")


if __name__ == "__main__":
    main()
