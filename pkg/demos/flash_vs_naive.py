"""Tiled online-softmax attention against the dense reference.

Walks through one flash forward at a small size, shows that it agrees with
the dense operator, then shows where the memory goes as N grows.

    python3 demos/flash_vs_naive.py
"""
import numpy as np

from sparse3d import AttentionConfig, AttentionWeights, Tensor, count_ops, flash_mhsa, naive_mhsa
from sparse3d.rng import Rng

d, h = 32, 4
rng = Rng(0)
wts = AttentionWeights.init(d, rng.fork("weights"))

# Same input, two kernels. Tiles smaller than N force several rescaling passes.
x = Tensor(rng.fork("x").normal((96, d)))
for tiles in (96, 32, 7):
    cfg = AttentionConfig(d, h, block_rows=tiles, block_cols=tiles)
    diff = np.abs(flash_mhsa(x, wts, cfg).data - naive_mhsa(x, wts, cfg).data).max()
    print(f"tiles {tiles:>3}x{tiles:<3} max |flash - naive| = {diff:.2e}")

# The dense kernel holds an N x N score matrix per head; flash only holds tiles.
print(f"\n{'N':>6} {'naive bytes':>14} {'flash bytes':>12}")
cfg = AttentionConfig(d, h)
for n in (256, 512, 1024, 2048):
    x = Tensor(rng.fork(f"n{n}").normal((n, d)))
    with count_ops() as naive:
        naive_mhsa(x, wts, cfg)
    with count_ops() as flash:
        flash_mhsa(x, wts, cfg)
    print(f"{n:>6} {naive.peak_transient_bytes:>14,} {flash.peak_transient_bytes:>12,}")
