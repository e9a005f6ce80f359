"""Forward-pass time and peak tracked allocation of the L2, SQ and WB variants.

Peak memory is the ``tracemalloc`` high-water mark during one forward pass
(numpy reports its buffers to ``tracemalloc``), not the process RSS.
"""

from __future__ import annotations

import csv
import time
import tracemalloc
from dataclasses import dataclass, replace

import numpy as np

from . import tensor as tn
from .errors import ContractError
from .net import NetConfig, build_coda_net


@dataclass
class BenchResult:
    variant: str
    batch: int
    mean_ms: float
    std_ms: float
    peak_bytes: int
    reps: int
    warmup: int
    finite: bool


def _peak_bytes(fn) -> int:
    tracemalloc.start()
    try:
        tracemalloc.reset_peak()
        base, _ = tracemalloc.get_traced_memory()
        fn()
        _, peak = tracemalloc.get_traced_memory()
    finally:
        tracemalloc.stop()
    return int(peak - base)


def bench_forward(net_config: NetConfig | None = None, variants=("L2", "SQ", "WB"), batch_sizes=(1, 16, 128),
                  reps: int = 10, warmup: int = 3, seed: int = 0, image_shape=(28, 28)) -> list:
    """Time ``reps`` forward passes per (variant, batch) after ``warmup`` untimed ones.

    All variants share the architecture and the random input batch; only the
    rescaler differs.  Forward passes run without gradient tracking.
    """
    if reps < 10 or warmup < 3:
        raise ContractError(f"need reps >= 10 and warmup >= 3, got reps={reps}, warmup={warmup}")
    net_config = net_config or NetConfig()
    rng = np.random.default_rng(seed)
    inputs = rng.uniform(0.0, 1.0, size=(max(batch_sizes), net_config.in_channels, *image_shape))
    inputs = inputs.astype(tn.get_dtype())
    results = []
    for variant in variants:
        net = build_coda_net(replace(net_config, kind=variant), seed=seed).eval()
        for batch in batch_sizes:
            x = inputs[:batch]
            with tn.no_grad():
                for _ in range(warmup):
                    out = net.forward(x)
                times = []
                for _ in range(reps):
                    t0 = time.perf_counter()
                    out = net.forward(x)
                    times.append((time.perf_counter() - t0) * 1e3)
                peak = _peak_bytes(lambda: net.forward(x))
            results.append(BenchResult(variant, int(batch), float(np.mean(times)), float(np.std(times)),
                                       peak, reps, warmup, bool(np.isfinite(out.data).all())))
    return results


BENCH_COLUMNS = ["variant", "batch", "mean_ms", "std_ms", "peak_bytes"]


def write_bench_csv(path, results) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(BENCH_COLUMNS)
        for r in results:
            writer.writerow([r.variant, r.batch, f"{r.mean_ms:.4f}", f"{r.std_ms:.4f}", r.peak_bytes])
