"""The expected attention score, from both directions.

First checks the closed form E[exp(q.k/sqrt(d))] for a Gaussian query against
a brute Monte-Carlo estimate, then runs a small model and compares predicted
future attention against the attention that actually materializes.
"""

import numpy as np

from kvc import (
    AttentionTrace,
    QueryStats,
    averaged_rope,
    expected_log_scores,
    finalize_moments,
    mgf_oracle,
    random_model,
    softmax_rows,
)
from kvc.analysis import pearson
from kvc.model import ModelConfig

print("== closed form vs Monte Carlo ==")
rng = np.random.default_rng(0)
for d in (1, 2, 4, 8):
    mu = rng.normal(size=d)
    a = rng.normal(size=(d, d)) / np.sqrt(d)
    sigma = a @ a.T
    k = rng.normal(size=d)
    analytic = float(
        np.exp(expected_log_scores(k[None, :].astype(np.float32), mu.astype(np.float32), sigma.astype(np.float32))[0])
    )
    mc, se = mgf_oracle(mu, sigma, k, 500_000, seed=d)
    print(f"d={d}: analytic={analytic:9.4f}  monte-carlo={mc:9.4f} (se {se:.4f})")

print()
print("== predicted vs realized attention on a running model ==")
config = ModelConfig(
    n_layers=2, n_heads=4, n_kv_heads=2, head_dim=8, hidden_dim=32, ffn_dim=64,
    vocab_size=64, rope_theta=10000.0, norm_eps=1e-5, max_position=4096,
)
model = random_model(config, seed=1)
tokens = np.random.default_rng(2).integers(0, 64, size=96).tolist()
prefix, horizon = 64, 24

cache = model.new_cache()
stats = QueryStats(config.n_layers, config.n_heads, config.head_dim)
model.forward(tokens[:prefix], cache, stats=stats)
trace = AttentionTrace(attention=True)
model.forward(tokens[prefix : prefix + horizon], cache, trace=trace)

r_bar = averaged_rope(prefix - 1, 512, model.rope)
for layer in range(config.n_layers):
    for head in range(config.n_heads):
        mean, cov = stats.prefill_moments(layer, head)
        mu_bar, sigma_bar = finalize_moments(mean, cov, r_bar)
        keys = cache.keys(layer, config.kv_head_of(head))[:prefix]
        predicted = softmax_rows(expected_log_scores(keys, mu_bar, sigma_bar))
        realized = np.mean(
            [row.weights[:prefix] for row in trace.rows(layer, head)], axis=0
        )
        print(f"layer {layer} head {head}: pearson(predicted, realized) = {pearson(predicted, realized):+.3f}")
