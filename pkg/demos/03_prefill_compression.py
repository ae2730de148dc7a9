"""One-shot prompt compression across policies and ratios.

Prefills a prompt, compresses the cache under each policy, and shows how the
head-adaptive allocator spreads a layer budget unevenly across heads.
"""

import numpy as np

from kvc import (
    AttentionTrace,
    CompressionConfig,
    QueryStats,
    compress_prefill,
    random_model,
)
from kvc.model import ModelConfig

config = ModelConfig(
    n_layers=2, n_heads=4, n_kv_heads=4, head_dim=8, hidden_dim=32, ffn_dim=64,
    vocab_size=64, rope_theta=10000.0, norm_eps=1e-5, max_position=4096,
)
model = random_model(config, seed=3)
tokens = np.random.default_rng(4).integers(0, 64, size=64).tolist()


def fresh_cache(policy):
    cache = model.new_cache()
    stats = QueryStats(config.n_layers, config.n_heads, config.head_dim)
    trace = AttentionTrace(attention=True) if policy in ("tova", "snapkv") else None
    model.forward(tokens, cache, stats=stats, trace=trace)
    return cache, stats, trace


print(f"prompt length {len(tokens)}, uncompressed cache:")
cache, _, _ = fresh_cache("knorm")
print(f"  {cache.memory_bytes()} bytes, {cache.layer_total(0)} entries per layer")
print()

for policy in ("expected_attention", "knorm", "keydiff", "tova", "snapkv", "streaming", "random"):
    cache, stats, trace = fresh_cache(policy)
    events = compress_prefill(
        model, cache, stats,
        CompressionConfig(policy=policy, ratio=0.5, seed=0),
        trace=trace,
    )
    kept = events[0].kept_per_head
    print(
        f"{policy:>19} @ r=0.5: layer-0 kept per head {kept}"
        f"  ({events[0].bytes_before} -> {events[0].bytes_after} bytes)"
    )

print()
print("ratio sweep with expected attention (head-adaptive budgets stay exact):")
for r in (0.1, 0.25, 0.5, 0.75, 0.9):
    cache, stats, _ = fresh_cache("expected_attention")
    compress_prefill(model, cache, stats, CompressionConfig(policy="expected_attention", ratio=r))
    print(f"  r={r:4}: per-layer entries {cache.layer_total(0):3d}  cache {cache.memory_bytes()} bytes")
