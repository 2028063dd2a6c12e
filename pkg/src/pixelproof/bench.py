"""Measurement harness: cold vs warm timing, per-stage and end-to-end stats,
worker/batch sweeps, ingestion-format comparison, and environment capture.

Every timing the harness reports is wall time from ``time.perf_counter_ns``.
"End to end" is the wall time of a whole batch, measured around the worker
pool dispatch, so it includes everything the stages do not.
"""
from __future__ import annotations

import functools
import json
import math
import os
import platform
import random
import statistics
import sys
import sysconfig
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from . import __version__
from .imaging import Image
from .manifest import ColorMode, Manifest, parse_manifest, validate
from .pipeline import StageTrace, digest, execute, run_pipeline, run_stage
from .records import pack_records, read_pack

__all__ = [
    "BenchConfig",
    "BenchError",
    "EnvInfo",
    "Stats",
    "WORKERS_ENV",
    "apply_env_overrides",
    "capture_environment",
    "compare_ingestion",
    "harness_overhead",
    "load_corpus",
    "run_bench",
    "summarize",
    "timer_resolution",
]

SCHEMA = "bench/1"
WORKERS_ENV = "PIXELPROOF_WORKERS"


class BenchError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# Statistics


@dataclass(frozen=True)
class Stats:
    count: int
    min: int
    max: int
    mean: float
    median: int
    p90: int
    p99: int
    stddev: float

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def _nearest_rank(ordered: Sequence[int], p: int) -> int:
    # ceil(p/100 * n) in integers; the float form overshoots for some n.
    rank = -(-p * len(ordered) // 100)
    return ordered[max(rank, 1) - 1]


def summarize(samples: Sequence[int]) -> Stats:
    """Nearest-rank percentiles (no interpolation) over ns samples."""
    if not samples:
        raise ValueError("summarize needs at least one sample")
    ordered = sorted(samples)
    return Stats(
        count=len(ordered),
        min=ordered[0],
        max=ordered[-1],
        mean=statistics.fmean(ordered),
        median=_nearest_rank(ordered, 50),
        p90=_nearest_rank(ordered, 90),
        p99=_nearest_rank(ordered, 99),
        stddev=statistics.pstdev(ordered),
    )


# --------------------------------------------------------------------------
# Clock and harness self-measurement


def timer_resolution(reads: int = 1_000_000) -> int:
    """Smallest positive delta seen across back-to-back monotonic clock reads."""
    clock = time.perf_counter_ns
    best = 0
    prev = clock()
    for _ in range(reads):
        now = clock()
        d = now - prev
        if d > 0 and (best == 0 or d < best):
            best = d
        prev = now
    return best if best > 0 else 1


def _noop(x):
    return x


def harness_overhead(iters: int = 10_000) -> float:
    """Mean ns per call of a no-op stage routed through the stage dispatcher."""
    if iters < 1000:
        raise ValueError("harness_overhead needs iters >= 1000")
    probe = Image(np.zeros((1, 1, 3), dtype=np.uint8), ColorMode.RGB, "noop")
    trace = StageTrace()
    t0 = time.perf_counter_ns()
    for _ in range(iters):
        run_stage(trace, "noop", _noop, probe)
    return (time.perf_counter_ns() - t0) / iters


# --------------------------------------------------------------------------
# Environment capture

_SIMD_FLAGS = (
    "mmx", "sse", "sse2", "sse3", "ssse3", "sse4_1", "sse4_2", "avx", "avx2", "fma",
    "f16c", "avx512f", "avx512bw", "avx512cd", "avx512dq", "avx512vl", "avx512_vnni",
    "amx_tile", "neon", "asimd", "asimdhp", "sve", "sve2", "vsx", "altivec",
)


@dataclass(frozen=True)
class EnvInfo:
    os_name: str
    os_version: str
    cpu_model: str
    physical_cores: int
    logical_cores: int
    simd_flags: tuple[str, ...]
    python: str
    compiler: str
    optimization_flags: str
    build_timestamp: str
    numpy_version: str
    numpy_simd: tuple[str, ...]
    harness_version: str

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["simd_flags"] = list(self.simd_flags)
        d["numpy_simd"] = list(self.numpy_simd)
        return d


def _read_cpuinfo() -> str:
    try:
        return Path("/proc/cpuinfo").read_text(errors="replace")
    except OSError:
        return ""


def _cpu_model(cpuinfo: str) -> str:
    for line in cpuinfo.splitlines():
        key, _, value = line.partition(":")
        if key.strip() in ("model name", "Model", "cpu model", "Hardware"):
            return value.strip()
    return platform.processor() or "unknown"


def _physical_cores(cpuinfo: str, logical: int) -> int:
    cores = set()
    phys = core = None
    for line in cpuinfo.splitlines() + [""]:
        key, _, value = line.partition(":")
        key = key.strip()
        if key == "physical id":
            phys = value.strip()
        elif key == "core id":
            core = value.strip()
        elif not line.strip():
            if core is not None:
                cores.add((phys, core))
            phys = core = None
    n = len(cores) or logical
    return max(1, min(n, logical))


def _cpu_simd(cpuinfo: str) -> tuple[str, ...]:
    for line in cpuinfo.splitlines():
        key, _, value = line.partition(":")
        if key.strip() in ("flags", "Features"):
            present = set(value.split())
            return tuple(f for f in _SIMD_FLAGS if f in present)
    return ()


def _numpy_simd() -> tuple[str, ...]:
    try:
        cfg = np.show_config(mode="dicts")
        found = cfg["SIMD Extensions"]
        return tuple(found.get("baseline", [])) + tuple(found.get("found", []))
    except Exception:
        return ()


@functools.lru_cache(maxsize=None)
def capture_environment() -> EnvInfo:
    """Snapshot of host and build facts; cached so every report in a process agrees."""
    cpuinfo = _read_cpuinfo()
    logical = os.cpu_count() or 1
    uname = platform.uname()
    opt = sysconfig.get_config_var("OPT") or sysconfig.get_config_var("CFLAGS") or "unknown"
    return EnvInfo(
        os_name=uname.system or "unknown",
        os_version=uname.release or "unknown",
        cpu_model=_cpu_model(cpuinfo),
        physical_cores=_physical_cores(cpuinfo, logical),
        logical_cores=logical,
        simd_flags=_cpu_simd(cpuinfo) or _numpy_simd(),
        python=sys.version.split()[0],
        compiler=platform.python_compiler() or "unknown",
        optimization_flags=" ".join(str(opt).split()),
        build_timestamp=" ".join(platform.python_build()),
        numpy_version=np.__version__,
        numpy_simd=_numpy_simd(),
        harness_version=__version__,
    )


# --------------------------------------------------------------------------
# Configuration


def parse_int_list(text: str) -> list[int]:
    try:
        values = [int(tok) for tok in text.split(",") if tok.strip()]
    except ValueError:
        raise ValueError(f"expected comma-separated integers, got {text!r}") from None
    if not values:
        raise ValueError("empty integer list")
    return values


@dataclass(frozen=True)
class BenchConfig:
    manifest_path: Path
    inputs: Path | None = None  # directory of input files
    pack: Path | None = None  # RPAK file
    batch_sizes: tuple[int, ...] = (1,)
    worker_counts: tuple[int, ...] = (1,)
    warmup: int = 3
    iters: int = 10
    seed: int = 0

    def __post_init__(self) -> None:
        if (self.inputs is None) == (self.pack is None):
            raise ValueError("exactly one of inputs (directory) or pack (RPAK file) is required")
        if self.iters < 1:
            raise ValueError("iters must be >= 1")
        if self.warmup < 0:
            raise ValueError("warmup must be >= 0")
        if self.warmup == 0 and self.iters < 2:
            raise ValueError("with warmup=0 the first measured iteration is cold; iters must be >= 2")
        if not self.batch_sizes or min(self.batch_sizes) < 1:
            raise ValueError("batch sizes must be >= 1")
        if not self.worker_counts or min(self.worker_counts) < 1:
            raise ValueError("worker counts must be >= 1")

    def to_dict(self) -> dict[str, Any]:
        return {
            "manifest": str(self.manifest_path),
            "inputs": str(self.inputs) if self.inputs else None,
            "pack": str(self.pack) if self.pack else None,
            "batch_sizes": list(self.batch_sizes),
            "worker_counts": list(self.worker_counts),
            "warmup": self.warmup,
            "iters": self.iters,
            "seed": self.seed,
        }


def apply_env_overrides(cfg: BenchConfig, environ: Mapping[str, str] = os.environ) -> BenchConfig:
    """Let ``PIXELPROOF_WORKERS=1,2,4`` replace the worker sweep."""
    raw = environ.get(WORKERS_ENV)
    if not raw:
        return cfg
    return replace(cfg, worker_counts=tuple(parse_int_list(raw)))


def load_corpus(cfg: BenchConfig) -> list[bytes]:
    if cfg.pack is not None:
        corpus = list(read_pack(cfg.pack))
    else:
        root = Path(cfg.inputs)
        if not root.is_dir():
            raise BenchError(f"input directory not found: {root}")
        corpus = [
            p.read_bytes()
            for p in sorted(root.iterdir())
            if p.is_file() and not p.name.startswith(".")
        ]
    if not corpus:
        raise BenchError("input corpus is empty")
    return corpus


# --------------------------------------------------------------------------
# Running


def _run_cell(
    manifest: Manifest,
    corpus: list[bytes],
    batch: int,
    workers: int,
    cfg: BenchConfig,
    resolution: int,
) -> dict[str, Any]:
    order = list(range(len(corpus)))
    random.Random(cfg.seed).shuffle(order)

    def process(data: bytes) -> StageTrace:
        return run_pipeline(manifest, data)[1]

    cold_ns = 0
    batch_ns: list[int] = []
    item_ns: list[int] = []
    stage_ns: dict[str, list[int]] = {}
    cursor = 0
    with ThreadPoolExecutor(max_workers=workers) as pool:
        for it in range(cfg.warmup + cfg.iters):
            items = [corpus[order[(cursor + k) % len(order)]] for k in range(batch)]
            cursor += batch
            t0 = time.perf_counter_ns()
            traces = list(pool.map(process, items))
            wall = time.perf_counter_ns() - t0
            if it == 0:
                cold_ns = wall
                continue
            if it < cfg.warmup:
                continue
            batch_ns.append(wall)
            for tr in traces:
                item_ns.append(tr.end_to_end_ns)
                for rec in tr.stages:
                    stage_ns.setdefault(rec.name, []).append(rec.duration_ns)

        # Untimed pass: one digest per corpus item, merged back in input order.
        digests = [d.hex for d in pool.map(lambda data: digest(execute(manifest, data).tensor), corpus)]

    stages = {name: summarize(v) for name, v in stage_ns.items()}
    e2e = summarize(batch_ns)
    stage_sum = sum(s.mean for s in stages.values())
    warm_total_s = sum(batch_ns) / 1e9
    return {
        "batch_size": batch,
        "workers": workers,
        "cold_start_ns": cold_ns,
        "warm_iterations": len(batch_ns),
        "stages": {name: s.to_dict() for name, s in stages.items()},
        "item_latency": summarize(item_ns).to_dict(),
        "end_to_end": e2e.to_dict(),
        "stage_mean_sum_ns": stage_sum,
        "accounting_ok": stage_sum <= e2e.mean + resolution * len(stages),
        "throughput_items_per_s": batch * len(batch_ns) / warm_total_s if warm_total_s > 0 else math.inf,
        "digests": digests,
    }


def run_bench(cfg: BenchConfig) -> dict[str, Any]:
    """Run every (batch, workers) cell and return a ``bench/1`` report dict."""
    text = Path(cfg.manifest_path).read_text(encoding="utf-8")
    manifest = parse_manifest(text)
    errors = [i for i in validate(manifest) if i.severity == "error"]
    if errors:
        raise BenchError("manifest has errors: " + "; ".join(i.message for i in errors))
    corpus = load_corpus(cfg)

    env = capture_environment()
    resolution = timer_resolution()
    overhead = harness_overhead()

    cells = [
        _run_cell(manifest, corpus, batch, workers, cfg, resolution)
        for batch in cfg.batch_sizes
        for workers in cfg.worker_counts
    ]
    decode_mean = cells[0]["stages"]["decode"]["mean"]
    return {
        "schema": SCHEMA,
        "harness_version": __version__,
        "env": env.to_dict(),
        "config": cfg.to_dict(),
        "corpus_size": len(corpus),
        "timer_resolution_ns": resolution,
        "harness_overhead_ns": overhead,
        "overhead_to_decode_ratio": overhead / decode_mean if decode_mean > 0 else None,
        "digests_consistent": all(c["digests"] == cells[0]["digests"] for c in cells),
        "cells": cells,
    }


def report_json(report: Mapping[str, Any]) -> str:
    return json.dumps(report, indent=2) + "\n"


# --------------------------------------------------------------------------
# Ingestion format comparison


@dataclass(frozen=True)
class IngestionResult:
    records: int
    record_bytes: int
    per_file_s: float
    packed_s: float

    @property
    def speedup(self) -> float:
        return self.per_file_s / self.packed_s if self.packed_s > 0 else math.inf

    def to_dict(self) -> dict[str, Any]:
        return {**asdict(self), "speedup": self.speedup}


def compare_ingestion(
    payloads: Sequence[bytes], workdir: str | os.PathLike | None = None, repeats: int = 3
) -> IngestionResult:
    """Time reading ``payloads`` as one file each vs. sequentially from one RPAK.

    Both layouts are written once, then each read path is timed ``repeats``
    times and the fastest run kept.
    """
    with tempfile.TemporaryDirectory(dir=workdir) as tmp:
        root = Path(tmp)
        files = root / "files"
        files.mkdir()
        paths = []
        for i, p in enumerate(payloads):
            path = files / f"{i:08d}.bin"
            path.write_bytes(p)
            paths.append(path)
        pack_path = root / "corpus.rpak"
        pack_path.write_bytes(pack_records(payloads))

        def read_files() -> int:
            n = 0
            for path in paths:
                with open(path, "rb") as fh:
                    n += len(fh.read())
            return n

        def read_packed() -> int:
            return sum(len(r) for r in read_pack(pack_path))

        best_files = best_pack = math.inf
        for _ in range(repeats):
            t0 = time.perf_counter()
            read_files()
            best_files = min(best_files, time.perf_counter() - t0)
            t0 = time.perf_counter()
            read_packed()
            best_pack = min(best_pack, time.perf_counter() - t0)
    total = sum(len(p) for p in payloads)
    return IngestionResult(len(payloads), total, best_files, best_pack)
