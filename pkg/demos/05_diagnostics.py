"""Desk-scale diagnostics: reconstruction error, memory curve, passkey grid.

Reconstruction error orders the policies the way the theory says it should:
the future-attention oracle is the floor, its negation the ceiling, and the
expected-attention estimate sits near the oracle.
"""

import numpy as np

from kvc import CompressionConfig, random_model
from kvc.analysis import memory_curve, passkey_bench, reconstruction_error
from kvc.model import ModelConfig

config = ModelConfig(
    n_layers=2, n_heads=4, n_kv_heads=2, head_dim=8, hidden_dim=32, ffn_dim=64,
    vocab_size=64, rope_theta=10000.0, norm_eps=1e-5, max_position=4096,
)
model = random_model(config, seed=6)
tokens = np.random.default_rng(7).integers(0, 64, size=96).tolist()

print("== residual-stream reconstruction error at r=0.5 (mean over layers) ==")
cfg = CompressionConfig(rope_window=64)
for policy in ("oracle", "expected_attention", "knorm", "random", "anti_oracle"):
    err = reconstruction_error(model, tokens, policy, 0.5, seeds=(0, 1, 2), config=cfg)
    print(f"  {policy:>19}: {err.mean():.4f}")

print()
print("== cache bytes vs sequence length ==")
rows = memory_curve(model, [128, 256, 512, 1024], [0.0, 0.5, 0.9])
print(f"  {'length':>6} {'r':>4} {'bytes':>9}")
for row in rows:
    print(f"  {row['length']:>6} {row['ratio']:>4} {row['measured_bytes']:>9}")

print()
print("== passkey retrieval grid (random weights: the floor, not a result) ==")
grid = passkey_bench(model, [96, 128], [0.1, 0.5, 0.9], r=0.5,
                     policy="expected_attention", trials=3, seed=8)
for row in grid:
    print(
        f"  length {row['length']:>4} depth {row['depth']:.1f}: accuracy {row['accuracy']:.2f}"
    )
print("(meaningful accuracy needs the exported pretrained model; see exporter/)")
