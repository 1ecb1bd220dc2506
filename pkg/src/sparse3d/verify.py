"""Equivalence and structural checks for the attention operators.

Each check returns a ``CheckResult``; ``run_verification`` collects the whole
suite for a scale preset. The segment-wise oracle here enumerates segment
indices by its own loop rather than through ``build_segment_plan``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import (AttentionConfig, AttentionWeights, attention, build_segment_plan,
                        flash_mhsa, gather_segments, naive_mhsa, scatter_segments,
                        sparse_flash_mhsa, CORE_TAG)
from .counter import count_ops
from .rng import Rng
from .tensor import Tensor

GRIDS = {
    "toy": {"n": (16, 64, 256), "d": (16, 64), "h": 4},
    "paper": {"n": (512,), "d": (768,), "h": 12},
}
SEEDS = (0, 1, 2)


@dataclass
class CheckResult:
    name: str
    passed: bool
    metric: str
    value: float
    threshold: float
    cases: int

    def line(self) -> str:
        status = "pass" if self.passed else "FAIL"
        return (f"{self.name}: {status} ({self.metric}={self.value:.3e}, "
                f"threshold={self.threshold:.0e}, cases={self.cases})")


def _setup(n: int, d: int, seed: int):
    rng = Rng(seed)
    wts = AttentionWeights.init(d, rng.fork("weights"))
    x = Tensor(rng.fork("input").normal((n, d)))
    return x, wts


def _max_abs(a: Tensor, b: Tensor) -> float:
    return float(np.abs(a.data.astype(np.float64) - b.data).max())


def check_flash_vs_naive(grid: dict, tiles: int = 16, seeds=SEEDS, tol: float = 1e-5) -> CheckResult:
    worst, cases = 0.0, 0
    for n in grid["n"]:
        for d in grid["d"]:
            cfg = AttentionConfig(d, grid["h"], block_rows=tiles, block_cols=tiles)
            for seed in seeds:
                x, wts = _setup(n, d, seed)
                worst = max(worst, _max_abs(flash_mhsa(x, wts, cfg), naive_mhsa(x, wts, cfg)))
                cases += 1
    return CheckResult("flash_vs_naive", worst <= tol, "max_abs", worst, tol, cases)


def check_dense_limit(grid: dict, tiles: int = 16, seeds=SEEDS, tol: float = 1e-6) -> CheckResult:
    worst, cases = 0.0, 0
    for n in grid["n"]:
        for d in grid["d"]:
            dense = AttentionConfig(d, grid["h"], block_rows=tiles, block_cols=tiles)
            sparse = AttentionConfig(d, grid["h"], n, 1, tiles, tiles)
            for seed in seeds:
                x, wts = _setup(n, d, seed)
                worst = max(worst, _max_abs(sparse_flash_mhsa(x, wts, sparse),
                                            flash_mhsa(x, wts, dense)))
                cases += 1
    return CheckResult("sparse_dense_limit", worst <= tol, "max_abs", worst, tol, cases)


def random_valid_triple(rng: Rng, max_blocks: int = 8) -> tuple[int, int, int]:
    w = int(rng.integers(1, 33))
    r = int(rng.integers(1, 9))
    blocks = int(rng.integers(1, max_blocks + 1))
    return blocks * w * r, w, r


def partition_violations(n: int, w: int, r: int) -> int:
    """Number of broken partition / stride properties of the plan for (n, w, r)."""
    plan = build_segment_plan(n, w, r)
    flat = plan.indices.reshape(-1)
    bad = 0
    bad += int(len(flat) != len(set(flat.tolist())))            # disjoint
    bad += int(set(flat.tolist()) != set(range(n)))             # complete
    bad += int(plan.indices.shape[1] != w)
    bad += int(np.any(np.diff(plan.indices, axis=1) != r))      # stride r
    return bad


def check_partition(trials: int = 200, seed: int = 0) -> CheckResult:
    rng = Rng(seed).fork("partition")
    bad = sum(partition_violations(*random_valid_triple(rng)) for _ in range(trials))
    return CheckResult("segment_partition", bad == 0, "violations", float(bad), 0.0, trials)


def segment_oracle(x: Tensor, wts: AttentionWeights, cfg: AttentionConfig) -> np.ndarray:
    """Per-segment dense attention with explicitly enumerated dilated indices."""
    n, d = x.shape
    w, r = cfg.segment_size, cfg.dilation
    q = x.data @ wts.wq.data + wts.bq.data
    k = x.data @ wts.wk.data + wts.bk.data
    v = x.data @ wts.wv.data + wts.bv.data
    out = np.zeros_like(q)
    for start in range(0, n, w * r):
        for offset in range(r):
            idx = [start + offset + j * r for j in range(w)]
            seg = attention(Tensor.wrap(q[idx]), Tensor.wrap(k[idx]), Tensor.wrap(v[idx]),
                            cfg.num_heads)
            out[idx] = seg.data
    return out @ wts.wo.data + wts.bo.data


def check_sparse_vs_segment_oracle(n: int = 16, d: int = 8, h: int = 2, w: int = 4, r: int = 2,
                                   tiles: int = 16, seeds=SEEDS, tol: float = 1e-5) -> CheckResult:
    cfg = AttentionConfig(d, h, w, r, tiles, tiles)
    worst = 0.0
    for seed in seeds:
        x, wts = _setup(n, d, seed)
        got = sparse_flash_mhsa(x, wts, cfg).data.astype(np.float64)
        worst = max(worst, float(np.abs(got - segment_oracle(x, wts, cfg)).max()))
    return CheckResult("sparse_vs_segment_oracle", worst <= tol, "max_abs", worst, tol, len(seeds))


def check_roundtrip(seeds=SEEDS) -> CheckResult:
    mismatches, cases = 0, 0
    for seed in seeds:
        rng = Rng(seed).fork("roundtrip")
        for n, w, r in [(8, 2, 2), (64, 16, 2), (96, 8, 3)]:
            plan = build_segment_plan(n, w, r)
            x = Tensor(rng.normal((n, 5)))
            segs = gather_segments(x, plan)
            back = scatter_segments(segs, plan)
            rev = scatter_segments(segs, plan, order=range(plan.num_segments - 1, -1, -1))
            mismatches += int(not np.array_equal(back.data, x.data))
            mismatches += int(not np.array_equal(rev.data, back.data))
            cases += 2
    return CheckResult("gather_scatter_roundtrip", mismatches == 0, "mismatches",
                       float(mismatches), 0.0, cases)


def check_cost_law(configs=((512, 64, 2), (256, 32, 1), (1024, 128, 4), (64, 16, 2)),
                   d: int = 16, h: int = 4) -> CheckResult:
    """Measured core flops of sparse vs dense must equal ``w / N`` exactly."""
    bad = 0
    x_rng = Rng(0).fork("cost")
    wts = AttentionWeights.init(d, x_rng)
    for n, w, r in configs:
        x = Tensor(x_rng.normal((n, d)))
        with count_ops() as dense:
            flash_mhsa(x, wts, AttentionConfig(d, h))
        with count_ops() as sparse:
            sparse_flash_mhsa(x, wts, AttentionConfig(d, h, w, r))
        bad += int(sparse.tag_flops(CORE_TAG) * n != dense.tag_flops(CORE_TAG) * w)
    return CheckResult("core_flops_law", bad == 0, "violations", float(bad), 0.0, len(configs))


def run_verification(scale: str = "toy", tiles: int = 16, seed: int = 0) -> list[CheckResult]:
    grid = GRIDS["paper" if scale.startswith("paper") else "toy"]
    seeds = tuple(seed + s for s in SEEDS)
    return [
        check_flash_vs_naive(grid, tiles, seeds),
        check_dense_limit(grid, tiles, seeds),
        check_partition(seed=seed),
        check_sparse_vs_segment_oracle(tiles=tiles, seeds=seeds),
        check_roundtrip(seeds),
        check_cost_law(),
    ]
