"""Rotary embeddings and the averaged future rotation.

Walks through the primitives the scoring layer builds on: position-dependent
pair rotations, their norm preservation, and what averaging rotations over a
future window does to a vector (it contracts, it does not rotate).
"""

import numpy as np

from kvc import RopeTable, apply_rope, averaged_rope, averaged_rope_matrix

table = RopeTable(head_dim=8, theta=10000.0, max_position=4096)
x = np.arange(8, dtype=np.float32) / 8.0

print("== single-position rotations ==")
for pos in (0, 1, 100, 4000):
    y = apply_rope(x, pos, table)
    print(f"position {pos:>4}: ||x||={np.linalg.norm(x):.4f} -> ||Rx||={np.linalg.norm(y):.4f}")

print()
print("== averaging rotations over a future window ==")
for window in (1, 16, 128, 512):
    bar = averaged_rope(start=100, window=window, table=table)
    y = bar.rotate_vec(x)
    sv = np.linalg.svd(bar.as_matrix(), compute_uv=False)
    print(
        f"window {window:>4}: ||R_bar x||={np.linalg.norm(y):.4f}"
        f"  singular values in [{sv.min():.3f}, {sv.max():.3f}]"
    )

print()
print("== compact blockwise form equals the dense matrix ==")
bar = averaged_rope(start=0, window=512, table=table)
dense = averaged_rope_matrix(start=0, window=512, table=table)
gap = np.abs(bar.rotate_vec(x) - dense @ x).max()
print(f"max abs gap between blockwise rotate and dense matmul: {gap:.2e}")

print()
print("high-frequency pairs wash out first as the window grows:")
for window in (1, 64, 512):
    bar = averaged_rope(start=0, window=window, table=table)
    print(f"  window {window:>3}: per-pair mean-cos = {np.round(bar.cos_bar, 3)}")
