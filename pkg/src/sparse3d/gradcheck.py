"""Central finite-difference checks of the tape gradients.

The analytic side runs the production float32 path on a tape. The numeric side
re-evaluates the same function on float64 copies of the inputs (no tape) and
differences it with step ``1e-3``. Agreement is measured per input tensor as
``||analytic - numeric|| / max(||analytic||, ||numeric||, floor)`` over the
checked elements, where ``floor`` is ``ABS_FLOOR`` times the largest numeric
gradient norm of the case. The floor only matters for gradients that are
identically zero (the key bias under softmax shift invariance, for example),
where float32 round-off would otherwise be divided by round-off.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import attention as attn
from . import tensor as T
from .distill import layerwise_loss, logit_loss
from .encoder import ViTConfig, encode, init_params
from .rng import Rng

DEFAULT_THRESHOLD = 1e-3
STEP = 1e-3
ABS_FLOOR = 1e-3

Fn = Callable[[dict[str, T.Tensor]], T.Tensor]


@dataclass
class GradcheckResult:
    name: str
    max_rel_err: float
    threshold: float
    n_checked: int

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.threshold


def _rel_err(a: np.ndarray, n: np.ndarray, floor: float) -> float:
    scale = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(a - n) / scale)


def check_gradients(name: str, fn: Fn, inputs: dict[str, np.ndarray],
                    wrt: list[str] | None = None, threshold: float = DEFAULT_THRESHOLD,
                    max_elems: int | None = 32, seed: int = 0,
                    step: float = STEP) -> GradcheckResult:
    """Compare tape gradients of scalar ``fn`` against central differences."""
    wrt = list(inputs) if wrt is None else wrt
    live = {k: T.Tensor(v, requires_grad=k in wrt) for k, v in inputs.items()}
    with T.Tape() as tape:
        loss = fn(live)
    grads = T.backward(tape, loss)

    shadow = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
    pick = Rng(seed).fork(name)

    def f64() -> float:
        return fn({k: T.Tensor(v, dtype=np.float64) for k, v in shadow.items()}).item()

    pairs = []
    for key in wrt:
        flat = shadow[key].reshape(-1)
        idx = np.arange(flat.size)
        if max_elems is not None and flat.size > max_elems:
            idx = np.sort(pick.integers(0, flat.size, max_elems))
        numeric = np.empty(len(idx))
        for j, e in enumerate(idx):
            orig = flat[e]
            flat[e] = orig + step
            up = f64()
            flat[e] = orig - step
            down = f64()
            flat[e] = orig
            numeric[j] = (up - down) / (2 * step)
        analytic = grads.of(live[key]).reshape(-1)[idx].astype(np.float64)
        pairs.append((analytic, numeric))
    floor = ABS_FLOOR * max(np.linalg.norm(n) for _, n in pairs)
    worst = max(_rel_err(a, n, floor) for a, n in pairs)
    return GradcheckResult(name, worst, threshold, sum(len(n) for _, n in pairs))


# --------------------------------------------------------------------- cases

def _project_scalar(out: T.Tensor, weights: np.ndarray) -> T.Tensor:
    """Fixed random linear functional, so no output direction cancels."""
    flat = T.reshape(out, (1, out.size))
    w = T.Tensor.wrap(weights.astype(out.dtype).reshape(out.size, 1))
    return T.reshape(T.matmul(flat, w), ())


def _unary(op, shape):
    def build(rng: Rng):
        x = rng.normal(shape)
        w = rng.normal((int(np.prod(shape)),))
        return (lambda t: _project_scalar(op(t["x"]), w)), {"x": x}, None
    return build


def _binary(op, sa, sb):
    def build(rng: Rng):
        a, b = rng.normal(sa), rng.normal(sb)
        out_shape = op(T.Tensor(a), T.Tensor(b)).shape
        w = rng.normal((int(np.prod(out_shape)),))
        return (lambda t: _project_scalar(op(t["a"], t["b"]), w)), {"a": a, "b": b}, None
    return build


def _layernorm(shape):
    def build(rng: Rng):
        d = shape[-1]
        inputs = {"x": rng.normal(shape), "gamma": 1.0 + 0.3 * rng.normal((d,)),
                  "beta": rng.normal((d,))}
        w = rng.normal((int(np.prod(shape)),))
        return (lambda t: _project_scalar(T.layernorm(t["x"], t["gamma"], t["beta"]), w)), \
            inputs, None
    return build


def _reduction(op, shape):
    def build(rng: Rng):
        return (lambda t: op(t["x"])), {"x": rng.normal(shape)}, None
    return build


def _rows(n, d, idx_shape):
    def build(rng: Rng):
        order = np.argsort(rng.uniform((n,)))
        index = order.reshape(idx_shape)
        x = rng.normal((n, d))
        w = rng.normal((n * d,))
        return (lambda t: _project_scalar(T.put_rows(T.take_rows(t["x"], index), index, n), w)), \
            {"x": x}, None
    return build


def _segments(n, w, r, d):
    def build(rng: Rng):
        plan = attn.build_segment_plan(n, w, r)
        x = rng.normal((n, d))
        wt = rng.normal((n * d,))
        # scale segments so the round trip is not the identity map
        return (lambda t: _project_scalar(
            attn.scatter_segments(T.scale(attn.gather_segments(t["x"], plan), 1.5), plan), wt)), \
            {"x": x}, None
    return build


def _core(kind, n, d, h, extra=None):
    def build(rng: Rng):
        inputs = {k: rng.normal((n, d)) for k in ("q", "k", "v")}
        w = rng.normal((n * d,))
        if kind == "attention":
            op = lambda t: attn.attention(t["q"], t["k"], t["v"], h)
        elif kind == "flash_attention":
            op = lambda t: attn.flash_attention(t["q"], t["k"], t["v"], h, *extra)
        else:
            plan = attn.build_segment_plan(n, *extra)
            op = lambda t: attn.sparse_flash_attention(t["q"], t["k"], t["v"], h, plan, 2, 2)
        return (lambda t: _project_scalar(op(t), w)), inputs, None
    return build


def _mhsa(variant, n, d, h, w=None, r=1):
    def build(rng: Rng):
        cfg = attn.AttentionConfig(d, h, w, r, block_rows=2, block_cols=4)
        wts = attn.AttentionWeights.init(d, rng.fork("w"))
        inputs = {"x": rng.normal((n, d))}
        inputs.update({k: v.data + 0.1 * rng.normal(v.shape)
                       for k, v in wts.parameters().items()})
        proj = rng.normal((n * d,))

        def fn(t):
            ws = attn.AttentionWeights(**{k: t[k] for k in wts.parameters()})
            return _project_scalar(attn.mhsa(t["x"], ws, cfg, variant), proj)
        return fn, inputs, None
    return build


def toy_encoder_pair(student_variant: str = "sparse_flash"):
    """A 2-block student and its 4-block teacher on a 4^3 volume (8 tokens, d=8)."""
    teacher = ViTConfig(4, 2, 8, 4, 2, attention_variant="naive")
    student = ViTConfig(4, 2, 8, 2, 2, ffn_only_prefix=1, attention_variant=student_variant,
                        segment_size=2, dilation=2, block_rows=2, block_cols=2)
    return teacher, student


def _distill_case(k: int, student_variant: str, logit: bool = False):
    def build(rng: Rng):
        tcfg, scfg = toy_encoder_pair(student_variant)
        tparams = {n: p.data for n, p in init_params(tcfg, rng.fork("teacher")).items()}
        # larger than the 0.02 init so that the attention path carries signal
        sparams = {"student." + n: p.data * 5.0 + 0.05 * rng.normal(p.shape)
                   for n, p in init_params(scfg, rng.fork("student")).items()}
        volume = rng.normal((4, 4, 4))
        inputs = {**{"teacher." + n: v for n, v in tparams.items()}, **sparams}

        def fn(t):
            tp = {n: t["teacher." + n] for n in tparams}
            sp = {n[len("student."):]: t[n] for n in sparams}
            t_out = encode(volume, tcfg, tp)
            s_out = encode(volume, scfg, sp)
            if logit:
                return logit_loss(t_out, s_out)
            return layerwise_loss(t_out, s_out, k)
        return fn, inputs, list(sparams)
    return build


# three seeded shapes per registered op, plus the full-loss cases
CASES: dict[str, list] = {
    "matmul": [_binary(T.matmul, (3, 4), (4, 5)), _binary(T.matmul, (1, 6), (6, 2)),
               _binary(T.matmul, (2, 3, 4), (4, 2))],
    "add": [_binary(T.add, s, s) for s in [(3,), (2, 3), (2, 2, 3)]],
    "sub": [_binary(T.sub, s, s) for s in [(4,), (3, 2), (2, 1, 3)]],
    "scale": [_unary(lambda x, c=c: T.scale(x, c), s)
              for c, s in [(2.5, (3,)), (-0.5, (2, 3)), (3.0, (2, 2, 2))]],
    "add_bias": [_binary(T.add_bias, sa, (sa[-1],)) for sa in [(3, 4), (1, 2), (2, 3, 5)]],
    "gelu": [_unary(T.gelu, s) for s in [(5,), (3, 4), (2, 2, 3)]],
    "softmax_lastdim": [_unary(T.softmax_lastdim, s) for s in [(5,), (3, 4), (2, 3, 6)]],
    "layernorm": [_layernorm(s) for s in [(6,), (3, 5), (2, 3, 8)]],
    "sum": [_reduction(T.sum_all, s) for s in [(3,), (2, 4), (2, 2, 2)]],
    "sumsq": [_reduction(T.sumsq, s) for s in [(3,), (2, 4), (2, 2, 2)]],
    "l2norm": [_reduction(T.l2norm, s) for s in [(3,), (2, 4), (2, 2, 2)]],
    "reshape": [_unary(lambda x, s=s: T.reshape(x, s[::-1]), s) for s in [(6,), (2, 3), (2, 3, 2)]],
    "take_rows": [_rows(4, 3, (4,)), _rows(6, 2, (3, 2)), _rows(8, 4, (2, 4))],
    "put_rows": [_rows(5, 2, (5,)), _rows(6, 3, (2, 3)), _rows(8, 1, (4, 2))],
    "gather_segments": [_segments(8, 2, 2, 3), _segments(6, 3, 1, 2), _segments(8, 4, 2, 4)],
    "scatter_segments": [_segments(8, 4, 1, 2), _segments(6, 2, 3, 3), _segments(8, 2, 4, 2)],
    "attention": [_core("attention", 4, 4, 1), _core("attention", 6, 4, 2),
                  _core("attention", 8, 6, 3)],
    "flash_attention": [_core("flash_attention", 5, 4, 1, (2, 2)),
                        _core("flash_attention", 8, 4, 2, (4, 2)),
                        _core("flash_attention", 8, 6, 3, (3, 5))],
    "sparse_flash_attention": [_core("sparse", 8, 4, 2, (2, 2)), _core("sparse", 8, 4, 1, (4, 1)),
                               _core("sparse", 6, 6, 3, (3, 2))],
    "naive_mhsa": [_mhsa("naive", n, d, h) for n, d, h in [(1, 4, 2), (4, 4, 2), (8, 6, 3)]],
    "flash_mhsa": [_mhsa("flash", n, d, h) for n, d, h in [(3, 4, 1), (6, 4, 2), (8, 6, 3)]],
    "sparse_flash_mhsa": [_mhsa("sparse_flash", n, d, h, w, r)
                          for n, d, h, w, r in [(4, 4, 2, 2, 1), (8, 4, 2, 2, 2), (8, 6, 3, 4, 2)]],
    "layerwise_loss": [_distill_case(1, "sparse_flash"), _distill_case(2, "sparse_flash"),
                       _distill_case(2, "flash")],
    "logit_loss": [_distill_case(0, "sparse_flash", logit=True),
                   _distill_case(0, "naive", logit=True),
                   _distill_case(0, "flash", logit=True)],
}


def run_case(name: str, index: int, seed: int = 0, threshold: float = DEFAULT_THRESHOLD,
             max_elems: int | None = 32) -> GradcheckResult:
    rng = Rng(seed).fork(f"{name}/{index}")
    fn, inputs, wrt = CASES[name][index](rng)
    return check_gradients(f"{name}[{index}]", fn, inputs, wrt, threshold, max_elems, seed)


def run_all(seed: int = 0, threshold: float = DEFAULT_THRESHOLD,
            max_elems: int | None = 32) -> list[GradcheckResult]:
    return [run_case(name, i, seed, threshold, max_elems)
            for name, builders in CASES.items() for i in range(len(builders))]
