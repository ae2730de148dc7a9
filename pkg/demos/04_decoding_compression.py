"""Periodic compression while decoding.

The cache is allowed to grow past its budget between firings (a sawtooth);
each firing cuts heads back while entries inside the recent-statistics span
are never evicted.
"""

import numpy as np

from kvc import CompressionConfig, DecodingCompressor, QueryStats, greedy_decode, random_model
from kvc.model import ModelConfig

config = ModelConfig(
    n_layers=2, n_heads=4, n_kv_heads=2, head_dim=8, hidden_dim=32, ffn_dim=64,
    vocab_size=64, rope_theta=10000.0, norm_eps=1e-5, max_position=4096,
)
model = random_model(config, seed=5)

cfg = CompressionConfig(policy="expected_attention", decode_interval=50, stats_buffer=32)
stats = QueryStats(config.n_layers, config.n_heads, config.head_dim, cfg.stats_buffer)
hook = DecodingCompressor(model, cfg, stats, max_cache_entries=64)

trajectory = []


def probe(step, cache):
    fired = hook(step, cache) is not None
    trajectory.append((step, cache.head_len(0, 0), fired))


cache = model.new_cache()
greedy_decode(model, [1, 2, 3, 4], 400, cache, hook=probe, stats=stats)

print("step  head-0 length   (* = compression fired)")
for step, length, fired in trajectory:
    if step % 25 == 0 or fired:
        bar = "#" * (length // 2)
        print(f"{step:>4}  {length:>6} {'*' if fired else ' '}  {bar}")

print()
print(f"firings at steps: {sorted({e.step for e in hook.events})}")
print(f"final head lengths: {[cache.head_len(l, g) for l in range(2) for g in range(2)]}")
print(f"final cache bytes: {cache.memory_bytes()}")
oldest_kept = min(cache.positions(0, 0).tolist())
print(f"oldest surviving position in head (0,0): {oldest_kept} of {cache.n_seen} seen")
