"""Layer-wise progressive distillation followed by logit-level distillation.

Student block ``i`` (1-based) is matched to teacher block ``2i`` for the first
``k`` pairs, where ``k`` grows from 1 to 6 with the iteration count. After the
layer-wise phase the final (normed) encoder outputs are matched directly.
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from .encoder import LayerOutputs, Params, ViTConfig, encode, param_checksum
from .rng import Rng
from .tensor import Tape, Tensor, add_n, backward, l2norm, matmul, scale, sub

log = logging.getLogger(__name__)

NUM_STAGES = 6
LOSS_MODES = ("plain_l2", "rms")


@dataclass(frozen=True)
class DistillConfig:
    total_iterations: int = 36
    batch_size: int = 16
    learning_rate: float = 5e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    logit_phase_iterations: int = 12
    seed: int = 0
    loss_mode: str = "plain_l2"

    def __post_init__(self):
        if self.total_iterations < NUM_STAGES:
            raise ValueError(f"total_iterations must be >= {NUM_STAGES} so that k reaches "
                             f"{NUM_STAGES}, got {self.total_iterations}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.logit_phase_iterations < 0:
            raise ValueError("logit_phase_iterations must be >= 0")
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss_mode must be one of {LOSS_MODES}, got {self.loss_mode!r}")


def schedule_k(current: int, total: int) -> int:
    """Number of matched layer pairs at 1-based iteration ``current``."""
    if not 1 <= current <= total:
        raise ValueError(f"iteration {current} outside 1..{total}")
    return -(-current * NUM_STAGES // total)


# -------------------------------------------------------------------- losses

def _batch(outs) -> list:
    return [outs] if isinstance(outs, (LayerOutputs, Tensor)) else list(outs)


def _distance(t: Tensor, s: Tensor, mode: str) -> Tensor:
    if t.shape != s.shape:
        raise ValueError(f"teacher/student output shapes differ: {t.shape} vs {s.shape}")
    norm = l2norm(sub(t, s))
    return scale(norm, 1.0 / math.sqrt(t.size)) if mode == "rms" else norm


def _project(s: Tensor, proj: Tensor | None) -> Tensor:
    return s if proj is None else matmul(s, proj)


def layerwise_loss(teacher_outs, student_outs, k: int, mode: str = "plain_l2",
                   projections: Sequence[Tensor] | None = None) -> Tensor:
    """Mean over the batch of ``(1/k) * sum_i ||teacher[2i] - student[i]||``.

    Either argument may be a single ``LayerOutputs`` or a sequence of them (one
    per sample). ``projections[i-1]`` maps student layer ``i`` to teacher width
    when the two encoders differ in embedding size.
    """
    teachers, students = _batch(teacher_outs), _batch(student_outs)
    if len(teachers) != len(students) or not students:
        raise ValueError(f"batch sizes differ: {len(teachers)} teacher vs {len(students)} student")
    n_student = len(students[0])
    if len(teachers[0]) != 2 * n_student:
        raise ValueError(f"teacher needs twice the student's layers, got "
                         f"{len(teachers[0])} vs {n_student}")
    if not 1 <= k <= min(n_student, NUM_STAGES):
        raise ValueError(f"k={k} outside 1..{min(n_student, NUM_STAGES)}")
    if mode not in LOSS_MODES:
        raise ValueError(f"unknown loss mode {mode!r}")
    per_sample = []
    for t_out, s_out in zip(teachers, students):
        terms = [_distance(t_out.layers[2 * i - 1],
                           _project(s_out.layers[i - 1], projections[i - 1] if projections else None),
                           mode)
                 for i in range(1, k + 1)]
        per_sample.append(scale(add_n(terms), 1.0 / k))
    return scale(add_n(per_sample), 1.0 / len(per_sample))


def logit_loss(teacher_final, student_final, mode: str = "plain_l2",
               projection: Tensor | None = None) -> Tensor:
    """Batch-mean L2 distance between final encoder outputs."""
    teachers = [t.final if isinstance(t, LayerOutputs) else t for t in _batch(teacher_final)]
    students = [s.final if isinstance(s, LayerOutputs) else s for s in _batch(student_final)]
    if len(teachers) != len(students) or not students:
        raise ValueError("teacher/student batch sizes differ")
    terms = [_distance(t, _project(s, projection), mode) for t, s in zip(teachers, students)]
    return scale(add_n(terms), 1.0 / len(terms))


def init_projections(student_cfg: ViTConfig, teacher_cfg: ViTConfig,
                     rng: Rng) -> dict[str, Tensor]:
    """Learned width adapters, only needed when embedding sizes differ."""
    ds, dt = student_cfg.embed_dim, teacher_cfg.embed_dim
    if ds == dt:
        return {}
    names = [f"distill.proj.{i}" for i in range(1, student_cfg.num_layers + 1)]
    names.append("distill.proj.final")
    return {n: Tensor(rng.truncated_normal((ds, dt), 1.0 / math.sqrt(ds)), requires_grad=True)
            for n in names}


# ----------------------------------------------------------------- optimizer

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray],
              state: AdamState, cfg: DistillConfig):
    """Bias-corrected Adam update of ``params`` in place.

    A parameter without an entry in ``grads`` is treated as having zero
    gradient. Arithmetic happens in each parameter's own dtype.
    """
    state.step += 1
    b1, b2 = cfg.betas
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        g = g.astype(p.dtype, copy=False)
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1.0 - b2) * (g * g)
        update = cfg.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
        p.data = (p.data - update).astype(p.dtype, copy=False)
    return params, state


# ---------------------------------------------------------------------- data

def synthetic_volume(extent: int, rng: Rng, n_waves: int = 4) -> np.ndarray:
    """Gaussian noise on top of a few random low-frequency 3D cosines."""
    axis = np.arange(extent) / extent
    z, y, x = np.meshgrid(axis, axis, axis, indexing="ij")
    vol = 0.5 * rng.standard_normal((extent,) * 3)
    for _ in range(n_waves):
        fz, fy, fx = rng.uniform((3,), 0.0, 3.0).astype(np.float64)
        phase = float(rng.uniform((1,), 0.0, 2 * np.pi)[0])
        amp = float(rng.uniform((1,), 0.5, 1.5)[0])
        vol += amp * np.cos(2 * np.pi * (fz * z + fy * y + fx * x) + phase)
    return vol.astype(np.float32)


def synthetic_batches(extent: int, batch_size: int, rng: Rng) -> Iterator[list[np.ndarray]]:
    while True:
        yield [synthetic_volume(extent, rng) for _ in range(batch_size)]


# ------------------------------------------------------------------ training

@dataclass
class TrainRecord:
    iteration: int
    phase: str
    k: int | None
    loss: float
    elapsed_ms: float


@dataclass
class TrainHistory:
    records: list[TrainRecord] = field(default_factory=list)

    def phase(self, name: str) -> list[TrainRecord]:
        return [r for r in self.records if r.phase == name]

    @property
    def k_trace(self) -> list[int]:
        return [r.k for r in self.phase("layerwise")]

    def to_jsonl(self, timing: bool = True) -> str:
        lines = []
        for r in self.records:
            rec = asdict(r)
            if not timing:
                del rec["elapsed_ms"]
            lines.append(json.dumps(rec))
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_jsonl())

    @classmethod
    def read(cls, path) -> "TrainHistory":
        lines = Path(path).read_text().splitlines()
        return cls([TrainRecord(**json.loads(line)) for line in lines if line.strip()])


@dataclass
class DistillResult:
    history: TrainHistory
    student_params: Params
    projections: dict[str, Tensor]
    teacher_checksum: str


def _check_compatible(teacher_cfg: ViTConfig, student_cfg: ViTConfig) -> None:
    if teacher_cfg.num_layers != 2 * student_cfg.num_layers:
        raise ValueError(f"teacher must have twice the student's layers "
                         f"({teacher_cfg.num_layers} vs {student_cfg.num_layers})")
    if (teacher_cfg.input_extent, teacher_cfg.patch_size) != \
            (student_cfg.input_extent, student_cfg.patch_size):
        raise ValueError("teacher and student must tokenize the input identically")


def distill_train(teacher_cfg: ViTConfig, teacher_params: Params,
                  student_cfg: ViTConfig, student_params: Params,
                  cfg: DistillConfig = DistillConfig(),
                  data: Iterable[Sequence[np.ndarray]] | None = None,
                  projections: dict[str, Tensor] | None = None) -> DistillResult:
    """Run the layer-wise phase then the logit phase; returns history and the student.

    ``student_params`` are updated in place. Teacher parameters are only read,
    which is verified by checksum at the end.
    """
    _check_compatible(teacher_cfg, student_cfg)
    rng = Rng(cfg.seed)
    if data is None:
        data = synthetic_batches(student_cfg.input_extent, cfg.batch_size, rng.fork("data"))
    if projections is None:
        projections = init_projections(student_cfg, teacher_cfg, rng.fork("projections"))
    trainable = {**student_params, **projections}
    for p in trainable.values():
        p.requires_grad = True
    layer_proj = [projections[f"distill.proj.{i}"]
                  for i in range(1, student_cfg.num_layers + 1)] if projections else None
    final_proj = projections.get("distill.proj.final")

    checksum = param_checksum(teacher_params)
    state = AdamState()
    history = TrainHistory()
    batches = iter(data)
    start = time.perf_counter()
    total = cfg.total_iterations + cfg.logit_phase_iterations
    for it in range(1, total + 1):
        layerwise = it <= cfg.total_iterations
        k = schedule_k(it, cfg.total_iterations) if layerwise else None
        batch = next(batches)
        teacher_outs = [encode(v, teacher_cfg, teacher_params) for v in batch]
        with Tape() as tape:
            student_outs = [encode(v, student_cfg, student_params) for v in batch]
            if layerwise:
                loss = layerwise_loss(teacher_outs, student_outs, k, cfg.loss_mode, layer_proj)
            else:
                loss = logit_loss(teacher_outs, student_outs, cfg.loss_mode, final_proj)
        value = loss.item()
        if not math.isfinite(value):
            raise FloatingPointError(f"non-finite loss {value} at iteration {it} "
                                     f"({'layerwise' if layerwise else 'logit'}, k={k})")
        grads = backward(tape, loss)
        adam_step(trainable, {n: grads[p] for n, p in trainable.items() if p in grads},
                  state, cfg)
        elapsed = (time.perf_counter() - start) * 1e3
        rec = TrainRecord(it, "layerwise" if layerwise else "logit", k, value, round(elapsed, 3))
        history.records.append(rec)
        log.info("iter %d phase=%s k=%s loss=%.6g", it, rec.phase, k, value)

    if param_checksum(teacher_params) != checksum:
        raise RuntimeError("teacher parameters changed during distillation")
    return DistillResult(history, student_params, projections, checksum)
