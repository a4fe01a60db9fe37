"""Single-image inference throughput measurement."""
from __future__ import annotations

import csv
import os
import statistics
import time
from contextlib import nullcontext
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from threadpoolctl import threadpool_info, threadpool_limits

from .errors import ContractError
from .model import ModelParams, model_forward

# published throughput at 512x512 on unstated hardware; printed for context only
REFERENCE_FPS = 80.60


@dataclass
class BenchReport:
    iterations: int
    warmup: int
    latencies: list[float]
    input_dims: tuple[int, int, int, int]
    workers: int

    @property
    def total_s(self) -> float:
        return float(sum(self.latencies))

    @property
    def mean_s(self) -> float:
        return self.total_s / self.iterations

    @property
    def median_s(self) -> float:
        return float(statistics.median(self.latencies))

    @property
    def p95_s(self) -> float:
        return float(np.percentile(self.latencies, 95))

    @property
    def fps_mean(self) -> float:
        return self.iterations / self.total_s

    def text(self) -> str:
        n, c, h, w = self.input_dims
        return "\n".join(
            [
                f"input        {n}x{c}x{h}x{w} (batch {n}, {h}x{w})",
                f"workers      {self.workers}",
                f"iterations   {self.iterations} timed, {self.warmup} warmup",
                f"latency      mean {self.mean_s * 1e3:.2f} ms, median {self.median_s * 1e3:.2f} ms, "
                f"p95 {self.p95_s * 1e3:.2f} ms",
                f"throughput   {self.fps_mean:.2f} FPS",
                f"reference    {REFERENCE_FPS:.2f} FPS published at 512x512 on other hardware "
                "(hardware-dependent, not comparable)",
            ]
        )

    def csv_row(self) -> list[str]:
        return [
            str(self.iterations),
            str(self.warmup),
            repr(self.mean_s),
            repr(self.median_s),
            repr(self.p95_s),
            repr(self.fps_mean),
        ]

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("iters", "warmup", "mean_s", "median_s", "p95_s", "fps"))
            w.writerow(self.csv_row())


def run_benchmark(
    params: ModelParams,
    input_size: int = 512,
    iters: int = 100,
    warmup: int = 10,
    workers: Optional[int] = None,
    seed: int = 0,
) -> BenchReport:
    """Time ``iters`` batch-1 forward passes after ``warmup`` untimed ones.

    Only the model forward is timed (no file I/O). ``workers`` caps the BLAS
    thread pool; None leaves it at its current setting.
    """
    if iters < 1:
        raise ContractError(f"iters must be >= 1, got {iters}")
    if warmup < 0:
        raise ContractError(f"warmup must be >= 0, got {warmup}")
    if workers is not None and workers < 1:
        raise ContractError(f"workers must be >= 1, got {workers}")
    dims = (1, params.arch.in_ch, input_size, input_size)
    x = np.random.default_rng(seed).random(dims, dtype=np.float32)
    limit = threadpool_limits(limits=workers, user_api="blas") if workers else nullcontext()
    with limit:
        effective = workers or _blas_threads()
        for _ in range(warmup):
            model_forward(params, x)
        latencies = []
        for _ in range(iters):
            t0 = time.perf_counter()
            model_forward(params, x)
            latencies.append(time.perf_counter() - t0)
    return BenchReport(iters, warmup, latencies, dims, effective)


def _blas_threads() -> int:
    counts = [p["num_threads"] for p in threadpool_info() if p.get("user_api") == "blas"]
    return max(counts) if counts else (os.cpu_count() or 1)
