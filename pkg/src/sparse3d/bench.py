"""Analytic and instrumented cost accounting for attention variants and encoders.

Flops follow the 1 multiply-add = 2 flops convention and cover matrix
products only (projections, score and weighted-sum products, FFN, patch
embedding). Elementwise work such as softmax is not counted, which is what
lets the instrumented counter agree with the closed-form model exactly.

Memory is peak *transient* scratch inside the attention core (score matrices
or tiles plus accumulators), not resident weights or activations.
"""
from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .attention import CORE_TAG, VARIANTS, AttentionConfig, AttentionWeights, mhsa
from .counter import count_ops
from .encoder import ViTConfig
from .rng import Rng
from .tensor import Tensor


def _check_variant(variant: str) -> None:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")


def core_attention_flops(variant: str, n: int, d: int, w: int | None = None) -> int:
    """Score and weighted-sum products: ``4*N*N*d`` dense, ``4*N*w*d`` sparse."""
    _check_variant(variant)
    if variant == "sparse_flash":
        return 4 * n * (n if w is None else w) * d
    return 4 * n * n * d


def attention_flops(variant: str, n: int, d: int, w: int | None = None) -> int:
    return 8 * n * d * d + core_attention_flops(variant, n, d, w)


def analytic_flops(variant: str, n: int, d: int, h: int = 1, w: int | None = None,
                   r: int = 1, ffn_ratio: int = 4, layers: int = 1,
                   ffn_only_prefix: int = 0, patch_dim: int = 0) -> int:
    """Forward flops of an encoder stack (``h`` and ``r`` do not change the count)."""
    _check_variant(variant)
    ffn = 2 * ffn_ratio * 2 * n * d * d
    attn = attention_flops(variant, n, d, w)
    attn_layers = layers - ffn_only_prefix
    return layers * ffn + attn_layers * attn + 2 * n * patch_dim * d


def encoder_flops(cfg: ViTConfig) -> int:
    return analytic_flops(cfg.attention_variant, cfg.num_tokens, cfg.embed_dim,
                          cfg.num_heads, cfg.segment_size, cfg.dilation, cfg.ffn_ratio,
                          cfg.num_layers, cfg.ffn_only_prefix, cfg.patch_dim)


# -------------------------------------------------------------------- timing

@dataclass(frozen=True)
class TimingStats:
    median_ms: float
    iqr_ms: float
    samples_ms: tuple[float, ...]


def measure(runner: Callable[[], object], repetitions: int = 11, warmups: int = 3) -> TimingStats:
    """Median and interquartile range of ``runner`` wall time, in milliseconds."""
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    for _ in range(warmups):
        runner()
    samples = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        runner()
        samples.append((time.perf_counter() - t0) * 1e3)
    q1, med, q3 = np.percentile(samples, [25, 50, 75])
    return TimingStats(float(med), float(q3 - q1), tuple(samples))


# ------------------------------------------------------------------- reports

@dataclass(frozen=True)
class BenchConfig:
    variant: str
    n: int
    d: int
    h: int
    w: int | None = None
    r: int = 1
    block_rows: int = 16
    block_cols: int = 16

    def __post_init__(self):
        _check_variant(self.variant)

    def attention_config(self) -> AttentionConfig:
        seg = self.w if self.variant == "sparse_flash" else None
        r = self.r if self.variant == "sparse_flash" else 1
        return AttentionConfig(self.d, self.h, seg, r, self.block_rows, self.block_cols)


@dataclass
class CostReport:
    variant: str
    N: int
    d: int
    h: int
    w: int | None
    r: int
    tiles: str
    analytic_flops: int
    measured_flops: int
    peak_bytes: int
    time_ms_median: float
    time_ms_iqr: float
    speedup: float = 1.0
    flops_speedup: float = 1.0

    TIMING_FIELDS = ("time_ms_median", "time_ms_iqr", "speedup")

    def non_timing(self) -> dict:
        return {k: v for k, v in asdict(self).items() if k not in self.TIMING_FIELDS}


def run_variant(cfg: BenchConfig, seed: int = 0, repetitions: int = 11,
                warmups: int = 3) -> CostReport:
    """One instrumented forward for counters, then timed repetitions."""
    rng = Rng(seed)
    acfg = cfg.attention_config()
    wts = AttentionWeights.init(cfg.d, rng.fork("weights"))
    x = Tensor(rng.fork("input").normal((cfg.n, cfg.d)))
    with count_ops() as counter:
        mhsa(x, wts, acfg, cfg.variant)
    timing = measure(lambda: mhsa(x, wts, acfg, cfg.variant), repetitions, warmups)
    w = cfg.w if cfg.variant == "sparse_flash" else None
    return CostReport(
        variant=cfg.variant, N=cfg.n, d=cfg.d, h=cfg.h, w=w,
        r=cfg.r if cfg.variant == "sparse_flash" else 1,
        tiles=f"{cfg.block_rows}x{cfg.block_cols}" if cfg.variant != "naive" else "-",
        analytic_flops=core_attention_flops(cfg.variant, cfg.n, cfg.d, w),
        measured_flops=counter.tag_flops(CORE_TAG),
        peak_bytes=counter.peak_transient_bytes,
        time_ms_median=timing.median_ms, time_ms_iqr=timing.iqr_ms)


def compare_variants(configs: Sequence[BenchConfig], seed: int = 0, repetitions: int = 11,
                     warmups: int = 3) -> list[CostReport]:
    """Reports for every config, with speedups relative to the naive one.

    Without a naive config the first entry is the baseline. The ``speedup``
    column is a ratio of median wall times; ``flops_speedup`` compares
    core-attention flops.
    """
    if not configs:
        raise ValueError("no configs to compare")
    shape = {(c.n, c.d, c.h) for c in configs}
    if len(shape) != 1:
        raise ValueError(f"configs must share N, d, h; got {sorted(shape)}")
    reports = [run_variant(c, seed, repetitions, warmups) for c in configs]
    base_idx = next((i for i, c in enumerate(configs) if c.variant == "naive"), 0)
    base = reports[base_idx]
    for i, rep in enumerate(reports):
        if i == base_idx:
            rep.speedup = rep.flops_speedup = 1.0
            continue
        rep.speedup = base.time_ms_median / rep.time_ms_median if rep.time_ms_median > 0 else math.inf
        rep.flops_speedup = base.analytic_flops / rep.analytic_flops
    return reports


# ----------------------------------------------------------------- report io

REPORT_FIELDS = [f.name for f in fields(CostReport)]
_INT_FIELDS = {"N", "d", "h", "r", "analytic_flops", "measured_flops", "peak_bytes"}
_FLOAT_FIELDS = {"time_ms_median", "time_ms_iqr", "speedup", "flops_speedup"}


def reports_to_csv(reports: Sequence[CostReport]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=REPORT_FIELDS, lineterminator="\n")
    writer.writeheader()
    for rep in reports:
        row = asdict(rep)
        row["w"] = "" if rep.w is None else rep.w
        writer.writerow(row)
    return buf.getvalue()


def reports_from_csv(text: str) -> list[CostReport]:
    out = []
    for row in csv.DictReader(io.StringIO(text)):
        kw: dict = dict(row)
        for k in _INT_FIELDS:
            kw[k] = int(kw[k])
        for k in _FLOAT_FIELDS:
            kw[k] = float(kw[k])
        kw["w"] = int(kw["w"]) if kw["w"] else None
        out.append(CostReport(**kw))
    return out


def reports_to_json(reports: Sequence[CostReport], indent: int = 2) -> str:
    return json.dumps([asdict(r) for r in reports], indent=indent) + "\n"


def reports_from_json(text: str) -> list[CostReport]:
    return [CostReport(**rec) for rec in json.loads(text)]


def write_reports(reports: Sequence[CostReport], out_dir, stem: str = "bench") -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    csv_path, json_path = out_dir / f"{stem}.csv", out_dir / f"{stem}.json"
    csv_path.write_text(reports_to_csv(reports))
    json_path.write_text(reports_to_json(reports))
    return csv_path, json_path
