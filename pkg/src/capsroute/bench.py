"""Micro-benchmarks of the routing algorithms with honest statistics.

Each measurement times one full routing call on a pre-generated instance
with ``time.perf_counter_ns``, discards warmup runs, and reports the median
and interquartile range of the remaining samples.  The input for a given
(n, m, k, seed) is generated once and shared across algorithms, and the
timed code path is exactly the public routing API — asserted by
checksumming a timed result against an untimed call.  Runs whose median is
within 100x of the timer resolution are refused rather than reported.

``threads > 1`` times a batch of independent instances dispatched across a
thread pool; those records are labeled ``<algo>+mt<threads>`` so they never
mix with single-thread rows.
"""

from __future__ import annotations

import csv
import hashlib
import json
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from os import PathLike

import numpy as np

from . import routing

__all__ = [
    "BenchRecord",
    "run_bench",
    "run_sweep",
    "write_csv",
    "write_json",
    "check_monotone",
    "CSV_HEADER",
    "DEFAULT_GRID",
    "ALGORITHMS",
]

CSV_HEADER = ["algorithm", "n", "m", "k", "iters", "repeats", "median_ns", "iqr_ns"]

# Default sweep: fan-ins from one primary-capsule column up to a full
# convolutional grid, 10 output classes, 16 features.
DEFAULT_GRID = (64, 256, 1152)

ALGORITHMS = ("fm", "dynamic", "brute")


@dataclass(frozen=True)
class BenchRecord:
    """Summary statistics of one timed configuration."""

    algorithm: str
    n: int
    m: int
    k: int
    iters: int  # routing iterations (0 for the non-iterative algorithms)
    repeats: int
    median_ns: int
    iqr_ns: int

    def __post_init__(self):
        if self.repeats < 10:
            raise ValueError(f"need at least 10 repeats for stable quartiles, got {self.repeats}")
        if self.median_ns < 0 or self.iqr_ns < 0:
            raise ValueError("negative timing statistics")


def bench_input(n: int, m: int, k: int, seed: int) -> np.ndarray:
    """The shared instance for one configuration (independent of algorithm)."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, n, m, k)))
    return rng.standard_normal((n, m, k))


def _make_call(algorithm: str, iters: int):
    if algorithm == "fm":
        return routing.fm_agreement
    if algorithm == "dynamic":
        config = routing.DynamicRoutingConfig(iterations=iters)
        return lambda u: routing.dynamic_routing(u, config)
    if algorithm == "brute":
        return routing.fm_agreement_bruteforce
    raise ValueError(f"unknown algorithm {algorithm!r} (expected one of {ALGORITHMS})")


def _checksum(result: routing.RoutingResult) -> str:
    digest = hashlib.sha256()
    digest.update(np.ascontiguousarray(result.s_hat).tobytes())
    digest.update(np.ascontiguousarray(result.activation).tobytes())
    return digest.hexdigest()


def run_bench(
    algorithm: str,
    n: int,
    m: int = 10,
    k: int = 16,
    iters: int = 3,
    repeats: int = 10,
    warmup: int = 3,
    seed: int = 0,
    threads: int = 1,
) -> BenchRecord:
    """Time one algorithm at one size; returns the summary record.

    ``warmup`` runs (>= 3) are executed and discarded before the ``repeats``
    (>= 10) timed samples.  The median must clear 100x the timer resolution
    or a RuntimeError asks for a bigger problem instead of a noisy number.
    """
    if warmup < 3:
        raise ValueError(f"need at least 3 warmup runs, got {warmup}")
    if repeats < 10:
        raise ValueError(f"need at least 10 timed repeats, got {repeats}")
    if threads < 1:
        raise ValueError(f"threads must be >= 1, got {threads}")
    call = _make_call(algorithm, iters)
    u = bench_input(n, m, k, seed)
    reference = _checksum(call(u))

    if threads == 1:
        def timed_once():
            start = time.perf_counter_ns()
            result = call(u)
            return time.perf_counter_ns() - start, result
    else:
        pool = ThreadPoolExecutor(max_workers=threads)
        # independent read-only views; the routing ops are pure
        inputs = [u] * threads

        def timed_once():
            start = time.perf_counter_ns()
            results = list(pool.map(call, inputs))
            return time.perf_counter_ns() - start, results[0]

    last_result = None
    for _ in range(warmup):
        _, last_result = timed_once()
    samples = []
    for _ in range(repeats):
        elapsed, last_result = timed_once()
        samples.append(elapsed)
    if threads > 1:
        pool.shutdown()

    if _checksum(last_result) != reference:
        raise RuntimeError(
            f"timed {algorithm} output diverged from the untimed reference run"
        )

    median = statistics.median(samples)
    quartiles = statistics.quantiles(samples, n=4, method="inclusive")
    iqr = quartiles[2] - quartiles[0]
    resolution_ns = time.get_clock_info("perf_counter").resolution * 1e9
    if median < 100.0 * resolution_ns:
        raise RuntimeError(
            f"median {median:.0f} ns is within 100x the timer resolution "
            f"({resolution_ns:.0f} ns); increase the problem size"
        )
    assert median <= max(samples)
    label = algorithm if threads == 1 else f"{algorithm}+mt{threads}"
    return BenchRecord(
        algorithm=label,
        n=n,
        m=m,
        k=k,
        iters=iters if algorithm == "dynamic" else 0,
        repeats=repeats,
        median_ns=int(round(median)),
        iqr_ns=int(round(iqr)),
    )


def run_sweep(
    algorithms=ALGORITHMS,
    grid=DEFAULT_GRID,
    m: int = 10,
    k: int = 16,
    iters: int = 3,
    repeats: int = 10,
    warmup: int = 3,
    seed: int = 0,
    threads: int = 1,
) -> list[BenchRecord]:
    """Run every (algorithm, n) pair on the shared per-size inputs."""
    records = []
    for n in grid:
        for algorithm in algorithms:
            records.append(
                run_bench(
                    algorithm, n, m=m, k=k, iters=iters,
                    repeats=repeats, warmup=warmup, seed=seed, threads=threads,
                )
            )
    return records


def write_csv(records: list[BenchRecord], path: str | PathLike) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for rec in records:
            writer.writerow([getattr(rec, field) for field in CSV_HEADER])


def write_json(records: list[BenchRecord], path: str | PathLike, config: dict | None = None) -> None:
    payload = {"config": config or {}, "records": [asdict(rec) for rec in records]}
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")


def check_monotone(records: list[BenchRecord]) -> list[str]:
    """Median-vs-n monotonicity violations per algorithm label.

    A decrease is only a violation when the two interquartile ranges do not
    overlap (otherwise the difference is within measurement noise).  Returns
    human-readable descriptions; an empty list means all clear.
    """
    by_algo: dict[str, list[BenchRecord]] = {}
    for rec in records:
        by_algo.setdefault(f"{rec.algorithm}@{rec.iters}", []).append(rec)
    violations = []
    for label, group in by_algo.items():
        group = sorted(group, key=lambda r: r.n)
        for small, large in zip(group, group[1:]):
            if large.median_ns >= small.median_ns:
                continue
            small_low = small.median_ns - small.iqr_ns / 2
            large_high = large.median_ns + large.iqr_ns / 2
            if large_high < small_low:
                violations.append(
                    f"{label}: median fell from {small.median_ns} ns (n={small.n}) "
                    f"to {large.median_ns} ns (n={large.n}) beyond IQR overlap"
                )
    return violations
