"""Batch orchestration: degrade, fuse, evaluate, benchmark and train over many stacks."""
from __future__ import annotations

import csv
import logging
import multiprocessing
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import acquisition, metrics, neural, wavelet
from .imaging import (Image, ZStack, encode_pgm, load_image, load_stack, quantize,
                      read_manifest, save_pgm, save_stack)

log = logging.getLogger(__name__)

METHODS = ("wavelet", "cnn-max", "cnn-3d")
FUSE_HEADER = ["stack_id", "method", "scenario", "planes", "seconds", "status", "error"]
EVAL_HEADER = ["stack_id", "method", "scenario", "ssim", "dice"]
LOSS_HEADER = ["step", "loss"]


class UsageError(ValueError):
    """Invalid job description; maps to CLI exit status 2."""


@dataclass(frozen=True)
class Scenario:
    kind: str = "none"  # none | zstep | bin | lowmag
    stride: int = 1
    factor: int = 4
    na: float = 0.6
    wavelength: float = 0.55
    scale: float = 2.5

    @classmethod
    def parse(cls, text: str) -> "Scenario":
        """Parse ``none``, ``zstep:3``, ``bin:4`` or ``lowmag:0.6:2.5``."""
        kind, *args = text.split(":")
        try:
            if kind == "none" and not args:
                return cls()
            if kind == "zstep" and len(args) == 1:
                return cls("zstep", stride=int(args[0]))
            if kind == "bin" and len(args) == 1:
                return cls("bin", factor=int(args[0]))
            if kind == "lowmag" and len(args) <= 2:
                na = float(args[0]) if args else 0.6
                scale = float(args[1]) if len(args) > 1 else 2.5
                return cls("lowmag", na=na, scale=scale)
        except ValueError:
            pass
        raise UsageError(f"cannot parse scenario {text!r}")

    @property
    def label(self) -> str:
        if self.kind == "zstep":
            return f"zstep:{self.stride}"
        if self.kind == "bin":
            return f"bin:{self.factor}"
        if self.kind == "lowmag":
            return f"lowmag:{self.na:g}:{self.scale:g}"
        return "none"

    def apply(self, stack: ZStack) -> ZStack:
        if self.kind == "zstep":
            return acquisition.subsample_zstep(stack, self.stride)
        if self.kind == "bin":
            return acquisition.bin_stack(stack, self.factor)
        if self.kind == "lowmag":
            params = acquisition.PsfParams(self.na, self.wavelength)
            return acquisition.simulate_low_mag(stack, params, self.scale)
        return stack


@dataclass(frozen=True)
class BatchJob:
    manifests: tuple[Path, ...]
    method: str = "wavelet"
    scenario: Scenario = field(default_factory=Scenario)
    workers: int = 1
    out_dir: Path = Path("out")
    levels: int = 12
    wavelet: str = "sym8"
    weights: Path | None = None
    bit_depth: int = 16

    def validate(self) -> None:
        if not self.manifests:
            raise UsageError("no stack manifests given")
        if self.workers < 1:
            raise UsageError("workers must be >= 1")
        if self.method not in METHODS:
            raise UsageError(f"method must be one of {METHODS}")
        if self.method != "wavelet":
            if self.weights is None or not Path(self.weights).exists():
                raise UsageError(f"method {self.method} needs an existing --weights file")
        wavelet.get_bank(self.wavelet)


@dataclass(frozen=True)
class StackResult:
    stack_id: str
    planes: int
    seconds: float
    fused: np.ndarray | None = None
    pixel_pitch: float = 1.0
    error: str = ""

    @property
    def ok(self) -> bool:
        return not self.error


@dataclass(frozen=True)
class TimingReport:
    method: str
    planes: int
    stacks: int
    workers: int
    sequential_s: float
    parallel_s: float

    @property
    def speedup(self) -> float:
        return self.sequential_s / self.parallel_s


def stack_id(manifest: Path) -> str:
    return Path(manifest).stem


def discover_manifests(paths) -> list[Path]:
    """Expand directories to their ``*.manifest`` files, sorted by stack id."""
    found = []
    for p in paths:
        p = Path(p)
        if p.is_dir():
            found.extend(sorted(p.glob("*.manifest")))
        else:
            found.append(p)
    return sorted(found, key=stack_id)


# --------------------------------------------------------------------------
# fusion

_NET_CACHE: dict = {}


def _network(path):
    key = str(path)
    if key not in _NET_CACHE:
        _NET_CACHE[key] = neural.load_weights(path)
    return _NET_CACHE[key]


def prepare(stack: ZStack, job: BatchJob) -> ZStack:
    """Degrade per the job's scenario and upsample back to the source plane size.

    Every method sees the same upsampled stack, so fused outputs always match
    the size of the full-resolution reference.
    """
    degraded = job.scenario.apply(stack)
    h, w = stack.shape
    return neural.pre_upsample(degraded, h, w)


def fuse(stack: ZStack, job: BatchJob) -> Image:
    if job.method == "wavelet":
        return wavelet.fuse_wavelet(stack, wavelet.get_bank(job.wavelet), job.levels)
    params, cfg = _network(job.weights)
    expected = "max" if job.method == "cnn-max" else "volumetric"
    if cfg.variant != expected:
        raise ValueError(f"weights hold a {cfg.variant} network, method {job.method} needs {expected}")
    return neural.forward(params, cfg, stack)


def _process(manifest: Path, job: BatchJob) -> StackResult:
    sid = stack_id(manifest)
    try:
        stack = prepare(load_stack(read_manifest(manifest)), job)
        t0 = time.perf_counter()
        fused = fuse(stack, job)
        elapsed = time.perf_counter() - t0
        return StackResult(sid, len(stack), elapsed, fused.pixels, fused.pixel_pitch)
    except Exception as exc:  # recorded per stack, the batch carries on
        return StackResult(sid, 0, 0.0, error=f"{type(exc).__name__}: {exc}")


def _map(fn, items, workers: int, **kwargs):
    if workers == 1:
        return [fn(item, **kwargs) for item in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(fn, item, **kwargs) for item in items]
        return [f.result() for f in futures]


def run_fuse_batch(job: BatchJob) -> list[StackResult]:
    """Fuse every stack, write ``<stack_id>_fused.pgm`` files and ``fuse.csv``."""
    job.validate()
    out = Path(job.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifests = sorted(job.manifests, key=stack_id)
    results = _map(_process, manifests, job.workers, job=job)
    with open(out / "fuse.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(FUSE_HEADER)
        for r in sorted(results, key=lambda r: r.stack_id):
            if r.ok:
                path = out / f"{r.stack_id}_fused.pgm"
                path.write_bytes(encode_pgm(quantize(r.fused, job.bit_depth),
                                            255 if job.bit_depth == 8 else 65535))
            writer.writerow([r.stack_id, job.method, job.scenario.label, r.planes,
                             f"{r.seconds:.6f}", "ok" if r.ok else "error", r.error])
    failures = sum(not r.ok for r in results)
    if failures:
        log.warning("%d of %d stacks failed", failures, len(results))
    return results


# --------------------------------------------------------------------------
# benchmark

_BENCH: dict = {}


def _bench_fuse(index: int) -> tuple[int, np.ndarray]:
    stack, job = _BENCH["stacks"][index], _BENCH["job"]
    return index, fuse(stack, job).pixels


def _worker_pid(_):
    return os.getpid()


def _bench_load(manifests, job):
    _BENCH["stacks"] = [prepare(load_stack(read_manifest(m)), job) for m in manifests]
    _BENCH["job"] = job


def run_bench(job: BatchJob, check_identical: bool = True) -> TimingReport:
    """Time fusion of the whole workload with 1 worker and with ``job.workers``.

    Stacks are loaded and degraded before timing starts. Worker processes are
    forked after loading so they inherit the stacks without I/O.
    """
    job.validate()
    manifests = sorted(job.manifests, key=stack_id)
    _bench_load(manifests, job)
    n = len(manifests)
    planes = len(_BENCH["stacks"][0])

    t0 = time.perf_counter()
    sequential = [_bench_fuse(i)[1] for i in range(n)]
    t_seq = time.perf_counter() - t0

    if job.workers == 1:
        t0 = time.perf_counter()
        parallel = [_bench_fuse(i)[1] for i in range(n)]
        t_par = time.perf_counter() - t0
    else:
        methods = multiprocessing.get_all_start_methods()
        if "fork" in methods:
            ctx = multiprocessing.get_context("fork")
            pool = ctx.Pool(job.workers)
        else:
            pool = multiprocessing.Pool(job.workers, initializer=_bench_load,
                                        initargs=(manifests, job))
        with pool:
            pool.map(_worker_pid, range(job.workers))  # make sure all workers are up
            t0 = time.perf_counter()
            results = pool.map(_bench_fuse, range(n), chunksize=1)
            t_par = time.perf_counter() - t0
        parallel = [r[1] for r in sorted(results, key=lambda r: r[0])]

    if check_identical and any(not np.array_equal(a, b) for a, b in zip(sequential, parallel)):
        raise RuntimeError("parallel fusion output differs from the sequential run")
    _BENCH.clear()
    return TimingReport(job.method, planes, n, job.workers, t_seq, t_par)


# --------------------------------------------------------------------------
# evaluation

_ID_SUFFIXES = ("_fused", "_gt", "_target", "_edof")


def image_stack_id(path: Path) -> str:
    stem = Path(path).stem
    for suffix in _ID_SUFFIXES:
        if stem.endswith(suffix):
            return stem[: -len(suffix)]
    return stem


def _index_images(directory) -> dict[str, Path]:
    return {image_stack_id(p): p for p in sorted(Path(directory).glob("*.pgm"))}


def format_mean_std(values) -> str:
    values = np.asarray([v for v in values if v is not None], dtype=np.float64)
    if values.size == 0:
        return ""
    std = values.std(ddof=1) if values.size > 1 else 0.0
    return f"{values.mean():.2f} ± {std:.2f}"


@dataclass(frozen=True)
class EvalRow:
    stack_id: str
    ssim: float
    dice: float | None


def evaluate_pair(test: Image, reference: Image) -> EvalRow:
    if test.shape != reference.shape:
        raise metrics.MetricError(f"test {test.shape} and reference {reference.shape} differ in size")
    s = metrics.ssim(test, reference)
    try:
        d = metrics.dice(metrics.segment_parasite_regions(test),
                         metrics.segment_parasite_regions(reference))
    except metrics.DegenerateHistogramError:
        d = None
    return EvalRow("", s, d)


def run_eval(reference_dir, test_dir, pixel_pitch: float, out_csv=None,
             method: str = "", scenario: str = "") -> list[EvalRow]:
    """SSIM and segmentation Dice of every test image against its reference.

    Images pair up by stack id (file stem minus a ``_fused``/``_gt``/``_target``/``_edof``
    suffix). Reference dimensions win; test images of another size are rejected.
    """
    refs, tests = _index_images(reference_dir), _index_images(test_dir)
    unmatched = sorted(set(refs) ^ set(tests))
    if unmatched:
        raise UsageError(f"unmatched stack ids: {', '.join(unmatched)}")
    if not refs:
        raise UsageError(f"no PGM images in {reference_dir}")
    rows = []
    for sid in sorted(refs):
        ref = load_image(refs[sid], pixel_pitch)
        test = load_image(tests[sid], pixel_pitch)
        row = evaluate_pair(test, ref)
        rows.append(replace(row, stack_id=sid))
    if out_csv is not None:
        write_eval_csv(out_csv, rows, method, scenario)
    return rows


def write_eval_csv(path, rows, method: str = "", scenario: str = "") -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(EVAL_HEADER)
        for r in sorted(rows, key=lambda r: r.stack_id):
            writer.writerow([r.stack_id, method, scenario, f"{r.ssim:.6f}",
                             "" if r.dice is None else f"{r.dice:.6f}"])
        writer.writerow(["mean±std", method, scenario,
                         format_mean_std(r.ssim for r in rows),
                         format_mean_std(r.dice for r in rows)])


# --------------------------------------------------------------------------
# training

def build_training_pairs(manifests, scenario: Scenario, levels: int = 12,
                         bank: str = "sym8") -> list[tuple[ZStack, Image]]:
    """(degraded + upsampled stack, wavelet EDoF of the full stack) per manifest."""
    pairs = []
    for m in sorted(manifests, key=stack_id):
        stack = load_stack(read_manifest(m))
        target = wavelet.fuse_wavelet(stack, wavelet.get_bank(bank), levels)
        h, w = stack.shape
        degraded = neural.pre_upsample(scenario.apply(stack), h, w)
        pairs.append((degraded, target))
    return pairs


def run_train(data_dir, arch: neural.ArchConfig, tcfg: neural.TrainConfig, out_path,
              scenario: Scenario = Scenario(), levels: int = 12, bank: str = "sym8"):
    """Train a fusion network on every stack under ``data_dir``.

    Writes the weights file and ``<out_path>.loss.csv``; returns (params, arch, losses).
    """
    manifests = discover_manifests([data_dir])
    if not manifests:
        raise UsageError(f"no stack manifests in {data_dir}")
    pairs = build_training_pairs(manifests, scenario, levels, bank)
    if arch.variant == "volumetric" and arch.planes == 0:
        arch = replace(arch, planes=len(pairs[0][0]))
    params = neural.init_params(arch, tcfg.seed)
    params, losses = neural.train(params, arch, pairs, tcfg)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    neural.save_weights(params, arch, out_path)
    with open(loss_log_path(out_path), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOSS_HEADER)
        for i, loss in enumerate(losses, start=1):
            writer.writerow([i, repr(loss)])
    return params, arch, losses


def loss_log_path(weights_path) -> Path:
    weights_path = Path(weights_path)
    return weights_path.with_name(weights_path.name + ".loss.csv")


# --------------------------------------------------------------------------
# synthetic workloads

def write_synthetic(out_dir, cfg: acquisition.SynthConfig, count: int,
                    prefix: str = "stack", bit_depth: int = 16) -> list[Path]:
    """Write ``count`` synthetic stacks (seeds ``cfg.seed + i``).

    Ground truth goes to ``out_dir/truth/<stack_id>_gt.pgm``.
    """
    out_dir = Path(out_dir)
    (out_dir / "truth").mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(count):
        stack, truth = acquisition.gen_synthetic_stack(replace(cfg, seed=cfg.seed + i))
        sid = f"{prefix}_{i:04d}"
        paths.append(save_stack(stack, out_dir, sid, bit_depth))
        save_pgm(truth, bit_depth, out_dir / "truth" / f"{sid}_gt.pgm")
    return paths
