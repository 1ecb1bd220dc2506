"""Where the flops go in teacher and student encoders.

Checks the closed-form count against the instrumented counter, then shows
how the attention core shrinks with segment size.

    python3 demos/cost_accounting.py
"""
from sparse3d import count_ops, encode, init_params, make_student_config, make_teacher_config
from sparse3d.bench import core_attention_flops, encoder_flops
from sparse3d.distill import synthetic_volume
from sparse3d.rng import Rng

vol = synthetic_volume(32, Rng(0))
for label, cfg in (("teacher", make_teacher_config("toy")), ("student", make_student_config("toy"))):
    params = init_params(cfg, Rng(1))
    with count_ops() as c:
        encode(vol, cfg, params)
    split = ", ".join(f"{tag}={n:,}" for tag, n in sorted(c.flops_by_tag.items()))
    print(f"{label}: counted {c.flops:,} flops, model {encoder_flops(cfg):,}")
    print(f"  {split}")

n, d = 4096, 64
dense = core_attention_flops("naive", n, d)
print(f"\nattention core at N={n}, d={d}")
for w in (n, n // 2, n // 8, n // 64):
    sparse = core_attention_flops("sparse_flash", n, d, w)
    print(f"  w={w:>5}: {sparse:>14,} flops ({dense // sparse}x fewer than dense)")
