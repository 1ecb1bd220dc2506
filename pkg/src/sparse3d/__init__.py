"""Dilated segment attention and progressive distillation for 3-D ViT encoders."""
from .attention import (AttentionConfig, AttentionWeights, SegmentPlan, build_segment_plan,
                        flash_attention, flash_mhsa, gather_segments, mhsa, naive_mhsa,
                        scatter_segments, sparse_flash_attention, sparse_flash_mhsa)
from .bench import BenchConfig, CostReport, analytic_flops, compare_variants, measure
from .checkpoint import load_checkpoint, save_checkpoint
from .counter import OpCounter, count_ops
from .distill import (DistillConfig, distill_train, layerwise_loss, logit_loss,
                      schedule_k)
from .encoder import (LayerOutputs, ViTConfig, encode, init_params, make_student_config,
                      make_teacher_config, patch_embed_3d)
from .rng import Rng
from .tensor import GradMap, Tape, Tensor, backward

__version__ = "0.1.0"

__all__ = [
    "AttentionConfig", "AttentionWeights", "SegmentPlan", "build_segment_plan",
    "flash_attention", "flash_mhsa", "gather_segments", "mhsa", "naive_mhsa",
    "scatter_segments", "sparse_flash_attention", "sparse_flash_mhsa",
    "BenchConfig", "CostReport", "analytic_flops", "compare_variants", "measure",
    "load_checkpoint", "save_checkpoint", "OpCounter", "count_ops",
    "DistillConfig", "distill_train", "layerwise_loss", "logit_loss", "schedule_k",
    "LayerOutputs", "ViTConfig", "encode", "init_params", "make_student_config",
    "make_teacher_config", "patch_embed_3d", "Rng", "GradMap", "Tape", "Tensor", "backward",
]
