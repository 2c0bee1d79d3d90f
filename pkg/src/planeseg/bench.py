"""Timing of Fast NMS against Fast Feature NMS on random score-sorted instances."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass

import numpy as np

from .nms import NmsConfig, fast_nms, ff_nms_indices


def random_instance(rng: np.random.Generator, n: int, k: int, image_size: float = 550.0):
    """Score-sorted boxes (n, 4) and coefficients (n, k) resembling dense plane proposals."""
    centers = rng.uniform(0.0, image_size, size=(n, 2))
    sizes = rng.uniform(0.04, 0.55, size=(n, 2)) * image_size
    boxes = np.concatenate([centers - sizes / 2, centers + sizes / 2], axis=1)
    coeffs = rng.normal(size=(n, k))
    # mix in near-duplicates so the similarity band sees both outcomes
    dup = rng.random(n) < 0.3
    src = rng.integers(0, n, size=n)
    coeffs[dup] = coeffs[src[dup]] + 0.05 * rng.normal(size=(int(dup.sum()), k))
    coeffs[np.linalg.norm(coeffs, axis=1) == 0, 0] = 1.0
    return boxes, coeffs


@dataclass
class BenchReport:
    n: int
    k: int
    trials: int
    fast_median_ms: float
    fast_p95_ms: float
    ff_median_ms: float
    ff_p95_ms: float
    overhead_ms: float
    survivors_fast: int
    survivors_ff: int

    def to_dict(self) -> dict:
        return asdict(self)


def bench_nms(n: int = 200, k: int = 32, trials: int = 1000, cfg: NmsConfig | None = None,
              seed: int = 0) -> BenchReport:
    cfg = cfg or NmsConfig()
    rng = np.random.default_rng(seed)
    t_fast = np.empty(trials)
    t_ff = np.empty(trials)
    kept_fast = kept_ff = 0
    clock = time.perf_counter
    for i in range(trials):
        boxes, coeffs = random_instance(rng, n, k)
        # alternate which runs first so cache warm-up does not favor either
        if i % 2:
            t0 = clock(); a = fast_nms(boxes, cfg.n1); t1 = clock()
            b = ff_nms_indices(boxes, coeffs, cfg.n1, cfg.n2, cfg.t); t2 = clock()
            t_fast[i], t_ff[i] = t1 - t0, t2 - t1
        else:
            t0 = clock(); b = ff_nms_indices(boxes, coeffs, cfg.n1, cfg.n2, cfg.t); t1 = clock()
            a = fast_nms(boxes, cfg.n1); t2 = clock()
            t_ff[i], t_fast[i] = t1 - t0, t2 - t1
        kept_fast += len(a)
        kept_ff += len(b)
    ms = 1e3
    return BenchReport(
        n=n,
        k=k,
        trials=trials,
        fast_median_ms=float(np.median(t_fast) * ms),
        fast_p95_ms=float(np.percentile(t_fast, 95) * ms),
        ff_median_ms=float(np.median(t_ff) * ms),
        ff_p95_ms=float(np.percentile(t_ff, 95) * ms),
        overhead_ms=float((np.median(t_ff) - np.median(t_fast)) * ms),
        survivors_fast=kept_fast,
        survivors_ff=kept_ff,
    )
