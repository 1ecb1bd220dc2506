"""Multi-head self-attention: a dense reference plus two tiled kernels.

All three variants share projections and the ``(N, d) -> (N, d)`` contract:

* ``naive_mhsa`` materializes every ``N x N`` score matrix.
* ``flash_mhsa`` walks query tiles and key tiles with a running max / running
  sum softmax so that only ``block_rows x block_cols`` scores exist at once.
* ``sparse_flash_mhsa`` splits the sequence into dilated segments (see
  ``build_segment_plan``), runs the flash kernel on every segment in one
  batched pass, and scatters the results back to their token positions.
"""
from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .counter import flop_tag, record_flops, scratch
from .rng import Rng
from .tensor import (Tensor, add_bias, differentiable, matmul, put_rows, record_op,
                     take_rows)

CORE_TAG = "attn_core"
PROJ_TAG = "attn_proj"
VARIANTS = ("naive", "flash", "sparse_flash")

_FAULTS: set[str] = set()


@contextmanager
def inject_fault(name: str) -> Iterator[None]:
    """Test hook: ``"flash_sign"`` flips the sign of one accumulation in the flash kernel."""
    _FAULTS.add(name)
    try:
        yield
    finally:
        _FAULTS.discard(name)


@dataclass(frozen=True)
class AttentionConfig:
    embed_dim: int
    num_heads: int
    segment_size: int | None = None  # None: whole sequence
    dilation: int = 1
    block_rows: int = 16
    block_cols: int = 16

    def __post_init__(self):
        if self.embed_dim < 1 or self.num_heads < 1:
            raise ValueError("embed_dim and num_heads must be positive")
        if self.embed_dim % self.num_heads:
            raise ValueError(f"embed_dim {self.embed_dim} is not divisible by "
                             f"num_heads {self.num_heads}")
        if self.segment_size is not None and self.segment_size < 1:
            raise ValueError(f"segment_size must be >= 1, got {self.segment_size}")
        if self.dilation < 1:
            raise ValueError(f"dilation must be >= 1, got {self.dilation}")
        if self.block_rows < 1 or self.block_cols < 1:
            raise ValueError("tile sizes must be positive")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads


@dataclass
class AttentionWeights:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    bq: Tensor | None = None
    bk: Tensor | None = None
    bv: Tensor | None = None
    bo: Tensor | None = None

    def __post_init__(self):
        d = self.wq.shape[0]
        for name in ("wq", "wk", "wv", "wo"):
            if getattr(self, name).shape != (d, d):
                raise ValueError(f"{name} must be {d}x{d}, got {getattr(self, name).shape}")
        for name in ("bq", "bk", "bv", "bo"):
            b = getattr(self, name)
            if b is not None and b.shape != (d,):
                raise ValueError(f"{name} must have length {d}, got {b.shape}")

    @property
    def embed_dim(self) -> int:
        return self.wq.shape[0]

    @classmethod
    def init(cls, d: int, rng: Rng, std: float | None = None, bias: bool = True,
             requires_grad: bool = False) -> "AttentionWeights":
        """Truncated-normal matrices (std ``1/sqrt(d)`` by default), zero biases."""
        std = 1.0 / math.sqrt(d) if std is None else std
        mats = {n: Tensor(rng.truncated_normal((d, d), std), requires_grad=requires_grad)
                for n in ("wq", "wk", "wv", "wo")}
        biases = {}
        if bias:
            biases = {n: Tensor(np.zeros(d), requires_grad=requires_grad)
                      for n in ("bq", "bk", "bv", "bo")}
        return cls(**mats, **biases)

    def parameters(self) -> dict[str, Tensor]:
        names = ("wq", "wk", "wv", "wo", "bq", "bk", "bv", "bo")
        return {n: getattr(self, n) for n in names if getattr(self, n) is not None}


# ------------------------------------------------------------- segment plans

@dataclass(frozen=True)
class SegmentPlan:
    """Which token positions form each sparse segment.

    ``indices[s, j]`` is the absolute token index of row ``j`` of segment ``s``.
    Segments come from consecutive blocks of ``segment_size * dilation``
    tokens; inside a block, segment ``i`` starts at block-local offset ``i``
    and takes every ``dilation``-th token.
    """
    token_count: int
    segment_size: int
    dilation: int
    indices: np.ndarray = field(repr=False)
    offset_convention: str = "block-local"

    @property
    def num_segments(self) -> int:
        return self.indices.shape[0]

    @property
    def segments(self) -> list[list[int]]:
        return self.indices.tolist()


def build_segment_plan(n: int, w: int, r: int = 1) -> SegmentPlan:
    if n < 1 or w < 1 or r < 1:
        raise ValueError(f"segment plan needs positive N, w, r (got N={n}, w={w}, r={r})")
    span = w * r
    if n % span:
        raise ValueError(f"token count N={n} is not divisible by w*r (w={w}, r={r}, w*r={span})")
    starts = (np.arange(n // span)[:, None] * span + np.arange(r)[None, :]).reshape(-1)
    indices = starts[:, None] + r * np.arange(w)[None, :]
    return SegmentPlan(n, w, r, indices.astype(np.int64))


def _plan_for(n: int, cfg: AttentionConfig) -> SegmentPlan:
    w = n if cfg.segment_size is None else cfg.segment_size
    return build_segment_plan(n, w, cfg.dilation)


@differentiable("gather_segments")
def gather_segments(x: Tensor, plan: SegmentPlan) -> Tensor:
    """``(N, d) -> (num_segments, w, d)`` following ``plan``."""
    if x.ndim != 2 or x.shape[0] != plan.token_count:
        raise ValueError(f"gather_segments: tensor {x.shape} does not match plan "
                         f"for N={plan.token_count}")
    return take_rows(x, plan.indices)


@differentiable("scatter_segments")
def scatter_segments(segments: Tensor, plan: SegmentPlan,
                     order: Sequence[int] | None = None) -> Tensor:
    """Inverse of ``gather_segments``; ``order`` only changes the write sequence."""
    s, w = plan.indices.shape
    if segments.ndim != 3 or segments.shape[:2] != (s, w):
        raise ValueError(f"scatter_segments: expected ({s}, {w}, d) segments, "
                         f"got {segments.shape}")
    return put_rows(segments, plan.indices, plan.token_count, order=order)


# ------------------------------------------------------------------ kernels

def _split_heads(a: np.ndarray, h: int) -> np.ndarray:
    *lead, n, d = a.shape
    b = int(np.prod(lead, dtype=np.int64))
    return a.reshape(b, n, h, d // h).transpose(0, 2, 1, 3).reshape(b * h, n, d // h)


def _merge_heads(a: np.ndarray, shape: tuple[int, ...], h: int) -> np.ndarray:
    *lead, n, d = shape
    b = int(np.prod(lead, dtype=np.int64))
    return a.reshape(b, h, n, d // h).transpose(0, 2, 1, 3).reshape(shape)


def _check_qkv(q: Tensor, k: Tensor, v: Tensor, h: int) -> None:
    if not (q.shape == k.shape == v.shape):
        raise ValueError(f"q/k/v shapes differ: {q.shape}, {k.shape}, {v.shape}")
    if q.ndim < 2 or q.shape[-1] % h:
        raise ValueError(f"last extent of {q.shape} is not divisible by {h} heads")


@differentiable("attention")
def attention(q: Tensor, k: Tensor, v: Tensor, num_heads: int) -> Tensor:
    """Dense scaled dot-product attention over the second-to-last axis."""
    _check_qkv(q, k, v, num_heads)
    qh, kh, vh = (_split_heads(t.data, num_heads) for t in (q, k, v))
    bh, n, dh = qh.shape
    sc = 1.0 / math.sqrt(dh)
    record_flops(4 * bh * n * n * dh, CORE_TAG)
    item = qh.dtype.itemsize
    with scratch(2 * bh * n * n * item):
        s = (qh @ kh.transpose(0, 2, 1)) * qh.dtype.type(sc)
        p = np.exp(s - s.max(axis=-1, keepdims=True))
        p /= p.sum(axis=-1, keepdims=True)
        oh = p @ vh
    out = _merge_heads(oh, q.shape, num_heads)

    def grad(g):
        gh = _split_heads(g, num_heads)
        dv = p.transpose(0, 2, 1) @ gh
        dp = gh @ vh.transpose(0, 2, 1)
        ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True))
        dq = (ds @ kh) * sc
        dk = (ds.transpose(0, 2, 1) @ qh) * sc
        return tuple(_merge_heads(a, q.shape, num_heads) for a in (dq, dk, dv))

    return record_op("attention", (q, k, v), out, grad)


def _flash_forward(qh, kh, vh, br: int, bc: int):
    """Tiled forward; returns the output and the per-row log-sum-exp."""
    bh, n, dh = qh.shape
    dt = qh.dtype
    sc = dt.type(1.0 / math.sqrt(dh))
    br, bc = min(br, n), min(bc, n)
    out = np.empty_like(qh)
    lse = np.empty((bh, n), dtype=dt)
    flip = "flash_sign" in _FAULTS
    item = dt.itemsize
    tile_bytes = item * bh * (2 * br * bc + (br + 2 * bc) * dh + br * dh + 2 * br)
    with scratch(tile_bytes):
        for i0 in range(0, n, br):
            qi = qh[:, i0:i0 + br]
            rows = qi.shape[1]
            m = np.full((bh, rows), -np.inf, dtype=dt)
            l = np.zeros((bh, rows), dtype=dt)
            acc = np.zeros((bh, rows, dh), dtype=dt)
            for j0 in range(0, n, bc):
                kj = kh[:, j0:j0 + bc]
                vj = vh[:, j0:j0 + bc]
                s = (qi @ kj.transpose(0, 2, 1)) * sc
                m_new = np.maximum(m, s.max(axis=-1))
                p = np.exp(s - m_new[..., None])
                alpha = np.exp(m - m_new)
                l = alpha * l + p.sum(axis=-1)
                pv = p @ vj
                if flip and i0 == 0 and j0 == 0:
                    pv = -pv
                acc = acc * alpha[..., None] + pv
                m = m_new
            out[:, i0:i0 + rows] = acc / l[..., None]
            lse[:, i0:i0 + rows] = m + np.log(l)
    return out, lse


def _flash_backward(qh, kh, vh, oh, lse, gh, br: int, bc: int):
    bh, n, dh = qh.shape
    sc = qh.dtype.type(1.0 / math.sqrt(dh))
    br, bc = min(br, n), min(bc, n)
    delta = (gh * oh).sum(axis=-1)
    dq = np.zeros_like(qh)
    dk = np.zeros_like(kh)
    dv = np.zeros_like(vh)
    item = qh.dtype.itemsize
    with scratch(item * bh * (4 * br * bc + 4 * bc * dh)):
        for j0 in range(0, n, bc):
            kj = kh[:, j0:j0 + bc]
            vj = vh[:, j0:j0 + bc]
            dkj = np.zeros_like(kj)
            dvj = np.zeros_like(vj)
            for i0 in range(0, n, br):
                qi = qh[:, i0:i0 + br]
                gi = gh[:, i0:i0 + br]
                p = np.exp((qi @ kj.transpose(0, 2, 1)) * sc - lse[:, i0:i0 + br, None])
                dvj += p.transpose(0, 2, 1) @ gi
                dp = gi @ vj.transpose(0, 2, 1)
                ds = p * (dp - delta[:, i0:i0 + br, None]) * sc
                dq[:, i0:i0 + br] += ds @ kj
                dkj += ds.transpose(0, 2, 1) @ qi
            dk[:, j0:j0 + bc] = dkj
            dv[:, j0:j0 + bc] = dvj
    return dq, dk, dv


@differentiable("flash_attention")
def flash_attention(q: Tensor, k: Tensor, v: Tensor, num_heads: int,
                    block_rows: int = 16, block_cols: int = 16) -> Tensor:
    """Exact attention computed tile by tile with an online softmax.

    Leading extents of ``q`` (beyond the last two) are treated as independent
    sequences and processed together with the heads.
    """
    _check_qkv(q, k, v, num_heads)
    qh, kh, vh = (_split_heads(t.data, num_heads) for t in (q, k, v))
    bh, n, dh = qh.shape
    record_flops(4 * bh * n * n * dh, CORE_TAG)
    oh, lse = _flash_forward(qh, kh, vh, block_rows, block_cols)
    out = _merge_heads(oh, q.shape, num_heads)

    def grad(g):
        gh = _split_heads(g, num_heads)
        grads = _flash_backward(qh, kh, vh, oh, lse, gh, block_rows, block_cols)
        return tuple(_merge_heads(a, q.shape, num_heads) for a in grads)

    return record_op("flash_attention", (q, k, v), out, grad)


@differentiable("sparse_flash_attention")
def sparse_flash_attention(q: Tensor, k: Tensor, v: Tensor, num_heads: int,
                           plan: SegmentPlan, block_rows: int = 16,
                           block_cols: int = 16) -> Tensor:
    """Flash attention restricted to the segments of ``plan``, recomposed to ``(N, d)``."""
    qs, ks, vs = (gather_segments(t, plan) for t in (q, k, v))
    os = flash_attention(qs, ks, vs, num_heads, block_rows, block_cols)
    return scatter_segments(os, plan)


# ------------------------------------------------------------ full operators

def _check_input(x: Tensor, wts: AttentionWeights, cfg: AttentionConfig) -> None:
    if x.ndim != 2:
        raise ValueError(f"attention input must be (N, d), got shape {x.shape}")
    if x.shape[1] != cfg.embed_dim or wts.embed_dim != cfg.embed_dim:
        raise ValueError(f"embed dim mismatch: input {x.shape[1]}, weights "
                         f"{wts.embed_dim}, config {cfg.embed_dim}")


def _linear(x: Tensor, w: Tensor, b: Tensor | None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add_bias(y, b)


def _mhsa(x: Tensor, wts: AttentionWeights, cfg: AttentionConfig, core) -> Tensor:
    _check_input(x, wts, cfg)
    with flop_tag(PROJ_TAG):
        q = _linear(x, wts.wq, wts.bq)
        k = _linear(x, wts.wk, wts.bk)
        v = _linear(x, wts.wv, wts.bv)
    o = core(q, k, v)
    with flop_tag(PROJ_TAG):
        return _linear(o, wts.wo, wts.bo)


def naive_mhsa(x: Tensor, wts: AttentionWeights, cfg: AttentionConfig) -> Tensor:
    return _mhsa(x, wts, cfg, lambda q, k, v: attention(q, k, v, cfg.num_heads))


def flash_mhsa(x: Tensor, wts: AttentionWeights, cfg: AttentionConfig) -> Tensor:
    return _mhsa(x, wts, cfg, lambda q, k, v: flash_attention(
        q, k, v, cfg.num_heads, cfg.block_rows, cfg.block_cols))


def sparse_flash_mhsa(x: Tensor, wts: AttentionWeights, cfg: AttentionConfig) -> Tensor:
    """Projections on the full sequence, attention only within dilated segments."""
    _check_input(x, wts, cfg)
    plan = _plan_for(x.shape[0], cfg)
    return _mhsa(x, wts, cfg, lambda q, k, v: sparse_flash_attention(
        q, k, v, cfg.num_heads, plan, cfg.block_rows, cfg.block_cols))


MHSA = {"naive": naive_mhsa, "flash": flash_mhsa, "sparse_flash": sparse_flash_mhsa}


def mhsa(x: Tensor, wts: AttentionWeights, cfg: AttentionConfig, variant: str) -> Tensor:
    try:
        fn = MHSA[variant]
    except KeyError:
        raise ValueError(f"unknown attention variant {variant!r}; expected one of {VARIANTS}")
    return fn(x, wts, cfg)
