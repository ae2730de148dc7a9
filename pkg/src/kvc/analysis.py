"""Desk-scale diagnostics: residual-stream reconstruction error, expected vs
realized attention correlation, synthetic passkey retrieval, memory curves,
and activation histograms.

All results are plain arrays / CSV rows; plotting is out of scope.
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace

import numpy as np

from .cache import KvCache
from .controller import CompressionConfig, compress_prefill, round_half_up
from .model import AttentionTrace, Model
from .stats import QueryStats, expected_log_scores, finalize_moments
from .tensorops import averaged_rope, softmax_rows

TRACED_POLICIES = ("tova", "snapkv")
FUTURE_POLICIES = ("oracle", "anti_oracle")

# Token-id layout for the tokenizer-free passkey task.
PK_PAD = 0
PK_DIGIT_BASE = 1  # ids 1..10 encode digits 0..9
PK_MARKER = 11
PK_TRIGGER = 12
PK_FILLER_BASE = 13


def _new_stats(model: Model, buffer_len: int = 128) -> QueryStats:
    c = model.config
    return QueryStats(c.n_layers, c.n_heads, c.head_dim, buffer_len)


def pearson(x: np.ndarray, y: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.std() == 0.0 or y.std() == 0.0:
        return float("nan")
    return float(np.corrcoef(x, y)[0, 1])


def spearman(x: np.ndarray, y: np.ndarray) -> float:
    def ranks(v):
        order = np.argsort(v, kind="stable")
        r = np.empty_like(order, dtype=np.float64)
        r[order] = np.arange(v.shape[0])
        return r

    return pearson(ranks(np.asarray(x)), ranks(np.asarray(y)))


def compressed_rerun(
    model: Model,
    tokens: list[int],
    config: CompressionConfig,
    compress_at: int,
    *,
    future_trace: AttentionTrace | None = None,
) -> tuple[AttentionTrace, KvCache]:
    """Prefill `tokens[:compress_at]`, compress, teacher-force the rest.

    Returns the trace of the continuation (hidden states recorded) and the
    final cache.
    """
    cache = model.new_cache()
    stats = _new_stats(model, config.stats_buffer)
    need_trace = config.policy in TRACED_POLICIES
    prefix_trace = AttentionTrace(attention=True) if need_trace else None
    model.forward(tokens[:compress_at], cache, stats=stats, trace=prefix_trace)
    compress_prefill(
        model, cache, stats, config,
        trace=prefix_trace, future_trace=future_trace, future_from=compress_at,
    )
    tail_trace = AttentionTrace(attention=False, hidden=True)
    model.forward(tokens[compress_at:], cache, trace=tail_trace)
    return tail_trace, cache


def reconstruction_error(
    model: Model,
    tokens,
    policy: str,
    r: float,
    seeds=(0,),
    *,
    compress_at: int | None = None,
    config: CompressionConfig | None = None,
) -> np.ndarray:
    """Mean L2 gap of post-attention hidden states per layer, measured on the
    positions processed after the compression point and averaged over seeds.
    """
    tokens = [int(t) for t in tokens]
    if len(tokens) < 64:
        raise ValueError("reconstruction error needs a sequence of at least 64 tokens")
    if compress_at is None:
        compress_at = len(tokens) // 2

    base = CompressionConfig(policy=policy, ratio=r) if config is None else replace(
        config, policy=policy, ratio=r
    )

    need_future = policy in FUTURE_POLICIES
    base_trace = AttentionTrace(attention=need_future, hidden=True)
    base_cache = model.new_cache()
    model.forward(tokens, base_cache, trace=base_trace)

    n_layers = model.config.n_layers
    errors = np.zeros(n_layers, dtype=np.float64)
    for seed in seeds:
        cfg = replace(base, seed=int(seed))
        tail_trace, _ = compressed_rerun(
            model, tokens, cfg, compress_at,
            future_trace=base_trace if need_future else None,
        )
        for layer in range(n_layers):
            ref = base_trace.hidden_by_position(layer)
            got = tail_trace.hidden_by_position(layer)
            gaps = [
                np.linalg.norm(ref[p] - got[p])
                for p in range(compress_at, len(tokens))
            ]
            errors[layer] += np.mean(gaps)
    return errors / len(seeds)


def attention_correlation(
    model: Model,
    tokens,
    stats_prefix_len: int,
    horizon: int,
    *,
    rope_window: int = 512,
    ridge: float = 1e-5,
) -> list[dict]:
    """Pearson (and rank) correlation between the expected attention over the
    prefix keys and the realized attention averaged over the next `horizon`
    query rows, one row per (layer, query head).
    """
    tokens = [int(t) for t in tokens]
    if len(tokens) <= stats_prefix_len + horizon:
        raise ValueError("need tokens beyond the statistics prefix plus the horizon")

    cache = model.new_cache()
    stats = _new_stats(model)
    model.forward(tokens[: stats_prefix_len], cache, stats=stats)
    trace = AttentionTrace(attention=True)
    model.forward(tokens[stats_prefix_len : stats_prefix_len + horizon], cache, trace=trace)

    c = model.config
    start = stats_prefix_len - 1
    r_bar = averaged_rope(start, min(rope_window, c.max_position - start), model.rope)

    out = []
    for layer in range(c.n_layers):
        for h in range(c.n_heads):
            g = c.kv_head_of(h)
            keys = cache.keys(layer, g)[:stats_prefix_len]
            mean, cov = stats.prefill_moments(layer, h)
            mu_bar, sigma_bar = finalize_moments(mean, cov, r_bar, ridge)
            expected = softmax_rows(expected_log_scores(keys, mu_bar, sigma_bar))
            rows = trace.rows(layer, h)
            realized = np.mean([row.weights[:stats_prefix_len] for row in rows], axis=0)
            out.append(
                {
                    "layer": layer,
                    "head": h,
                    "pearson": pearson(expected, realized),
                    "spearman": spearman(expected, realized),
                }
            )
    return out


def build_passkey_prompt(
    length: int, depth: float, digits: list[int], rng: np.random.Generator, n_fillers: int = 16
) -> list[int]:
    """Haystack of repeating filler patterns with a marker-framed digit needle
    inserted at `depth` (fraction of the context) and a trailing trigger."""
    needle = [PK_MARKER] + [PK_DIGIT_BASE + d for d in digits] + [PK_MARKER]
    body_len = length - len(needle) - 1
    if body_len < 0:
        raise ValueError(f"length {length} cannot hold the needle")
    pattern = [PK_FILLER_BASE + int(v) for v in rng.integers(0, n_fillers, size=8)]
    body = (pattern * (body_len // len(pattern) + 1))[:body_len]
    at = int(round(depth * body_len))
    return body[:at] + needle + body[at:] + [PK_TRIGGER]


def passkey_bench(
    model: Model,
    lengths,
    depths,
    r: float,
    policy: str,
    trials: int,
    *,
    seed: int = 0,
    n_digits: int = 4,
    config: CompressionConfig | None = None,
) -> list[dict]:
    """Exact-match retrieval accuracy grid over (length, depth)."""
    base = CompressionConfig(policy=policy, ratio=r) if config is None else replace(
        config, policy=policy, ratio=r
    )
    rows = []
    for length in lengths:
        if length >= model.config.max_position:
            raise ValueError(f"haystack of {length} exceeds max_position")
        for depth in depths:
            hits = 0
            for trial in range(trials):
                rng = np.random.default_rng((seed, length, int(depth * 1000), trial))
                digits = [int(d) for d in rng.integers(0, 10, size=n_digits)]
                prompt = build_passkey_prompt(length, depth, digits, rng)
                cache = model.new_cache()
                stats = _new_stats(model, base.stats_buffer)
                need_trace = policy in TRACED_POLICIES
                trace = AttentionTrace(attention=True) if need_trace else None
                logits = model.forward(prompt, cache, stats=stats, trace=trace)
                cfg = replace(base, seed=int(np.random.default_rng((seed, trial)).integers(2**31)))
                compress_prefill(model, cache, stats, cfg, trace=trace)
                got = _greedy_continue(model, logits, cache, n_digits)
                hits += int(got == [PK_DIGIT_BASE + d for d in digits])
            rows.append(
                {
                    "length": length,
                    "depth": depth,
                    "policy": policy,
                    "ratio": r,
                    "trials": trials,
                    "accuracy": hits / trials,
                }
            )
    return rows


def _greedy_continue(model: Model, logits: np.ndarray, cache: KvCache, max_new: int) -> list[int]:
    """Greedy continuation from the logits of an already processed prefix."""
    out = []
    for _ in range(max_new):
        nxt = int(np.argmax(logits[-1]))
        out.append(nxt)
        logits = model.forward([nxt], cache)
    return out


def memory_curve(model: Model, lengths, r_values, *, min_keep: int = 1, seed: int = 0) -> list[dict]:
    """Analytic and measured cache bytes per (length, ratio).

    Measured bytes come from filling a cache with seeded values and running
    the prefill compressor with the norm policy under head-adaptive budgets.
    """
    c = model.config
    per_entry = 2 * c.head_dim * 4
    rows = []
    rng = np.random.default_rng(seed)
    for length in lengths:
        for r in r_values:
            layer_total = length * c.n_kv_heads
            floors = c.n_kv_heads * min(min_keep, length)
            budget = min(max(round_half_up((1.0 - r) * layer_total), floors), layer_total)
            analytic = budget * per_entry * c.n_layers if r > 0 else layer_total * per_entry * c.n_layers

            cache = KvCache(c.n_layers, c.n_kv_heads, c.head_dim)
            for layer in range(c.n_layers):
                for g in range(c.n_kv_heads):
                    cache.append_block(
                        layer, g,
                        rng.standard_normal((length, c.head_dim)).astype(np.float32),
                        rng.standard_normal((length, c.head_dim)).astype(np.float32),
                        np.arange(length),
                    )
            cache.n_seen = length
            cfg = CompressionConfig(policy="knorm", ratio=r, min_keep=min_keep)
            compress_prefill(model, cache, None, cfg)
            rows.append(
                {
                    "length": length,
                    "ratio": r,
                    "analytic_bytes": analytic,
                    "measured_bytes": cache.memory_bytes(),
                }
            )
    return rows


def summarize_columns(data: np.ndarray, bins: int = 64) -> list[dict]:
    """Histogram plus moment-matched Normal fit per column. Columns with no
    spread are flagged degenerate rather than fitted."""
    out = []
    for dim in range(data.shape[1]):
        col = data[:, dim]
        mean = float(col.mean())
        std = float(col.std(ddof=1)) if col.shape[0] > 1 else 0.0
        counts, edges = np.histogram(col, bins=bins)
        out.append(
            {
                "dim": dim,
                "mean": mean,
                "std": std,
                "degenerate": std == 0.0,
                "counts": counts.tolist(),
                "edges": edges.tolist(),
            }
        )
    return out


def activation_histograms(
    model: Model, tokens, layer: int, head: int, *, bins: int = 64
) -> dict:
    """Per-dimension histograms of post-attention hidden states and pre-RoPE
    queries with moment-matched Normal fits. Exploratory output only."""
    trace = AttentionTrace(attention=False, queries=True, hidden=True)
    cache = model.new_cache()
    model.forward(list(tokens), cache, trace=trace)

    hiddens = np.stack([h for _, h in trace.hidden[layer]])
    queries = np.stack([q for _, q in trace.queries[(layer, head)]])
    return {"hidden": summarize_columns(hiddens, bins), "queries": summarize_columns(queries, bins)}


def write_csv(path, rows: list[dict]) -> None:
    if not rows:
        raise ValueError("no rows to write")
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)


def run_trials(fn, items, workers: int = 1):
    """Map a trial function over items, optionally with a thread pool."""
    if workers <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
