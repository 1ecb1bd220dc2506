"""Layer-wise progressive distillation of a 12-block teacher into a 6-block student.

The student starts by matching only its first block to teacher block 2, and
each stage adds one more matched pair until all six are aligned. A short
logit phase on the final outputs follows.

    python3 demos/progressive_distillation.py [iterations]
"""
import sys

from sparse3d import (DistillConfig, distill_train, init_params, make_student_config,
                      make_teacher_config)
from sparse3d.rng import Rng

iterations = int(sys.argv[1]) if len(sys.argv) > 1 else 36
teacher_cfg = make_teacher_config("toy")
student_cfg = make_student_config("toy")
print(f"teacher: {teacher_cfg.num_layers} blocks, {teacher_cfg.num_heads} heads, "
      f"{teacher_cfg.attention_variant} attention")
print(f"student: {student_cfg.num_layers} blocks, {student_cfg.num_heads} heads, first "
      f"{student_cfg.ffn_only_prefix} blocks FFN-only, {student_cfg.attention_variant} "
      f"(w={student_cfg.segment_size}, r={student_cfg.dilation})")

rng = Rng(42)
teacher = init_params(teacher_cfg, rng.fork("teacher"))
student = init_params(student_cfg, rng.fork("student"))
cfg = DistillConfig(total_iterations=iterations, seed=42)
result = distill_train(teacher_cfg, teacher, student_cfg, student, cfg)

# A new k means one more layer enters the loss, so the loss jumps before it falls again.
prev_k = None
for rec in result.history.records:
    marker = " <- k grows" if rec.k is not None and rec.k != prev_k and prev_k is not None else ""
    print(f"{rec.iteration:>3} {rec.phase:<9} k={str(rec.k):<4} loss={rec.loss:8.3f}{marker}")
    prev_k = rec.k

layer = result.history.phase("layerwise")
print(f"\nlast/first layer-wise loss: {layer[-1].loss / layer[0].loss:.3f}")
