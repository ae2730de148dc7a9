"""Orchestration of when and how KV compression fires.

Two regimes: one-shot compression of a freshly prefetched prompt cache, and
periodic compression during decoding once a head exceeds its allowed size.
During decoding the most recent `stats_buffer` positions are never evicted;
their queries are still inside the estimation window, so a head can stay
above `max_cache_entries` right after a firing when the protected span is
larger than the budget.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .cache import KvCache
from .model import AttentionTrace, AttnRow, Model
from .policies import (
    POLICY_IDS,
    allocate_head_adaptive,
    score_expected_attention,
    score_keydiff,
    score_knorm,
    score_oracle,
    score_random,
    score_snapkv,
    score_streaming,
    score_tova,
    top_k_keep,
    value_weights,
)
from .stats import QueryStats, finalize_moments
from .tensorops import averaged_rope


@dataclass
class CompressionConfig:
    policy: str = "expected_attention"
    ratio: float = 0.0
    epsilon: float = 0.02
    rope_window: int = 512
    decode_interval: int = 512
    stats_buffer: int = 128
    ridge: float = 1e-5
    use_wo_v: bool = False
    head_adaptive: bool = True
    min_keep: int = 1
    sinks: int = 4
    recent: int | None = None
    snap_obs_window: int = 32
    snap_kernel: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.policy not in POLICY_IDS:
            raise ValueError(f"unknown policy {self.policy!r}; expected one of {POLICY_IDS}")
        if not 0.0 <= self.ratio <= 1.0:
            raise ValueError(f"ratio must be in [0, 1], got {self.ratio}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")


@dataclass
class CompressionEvent:
    step: int
    layer: int
    policy: str
    bytes_before: int
    bytes_after: int
    kept_per_head: list[int] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(
            {
                "step": self.step,
                "layer": self.layer,
                "policy": self.policy,
                "bytes_before": self.bytes_before,
                "bytes_after": self.bytes_after,
                "kept_per_head": self.kept_per_head,
            }
        )


def write_event_log(events: list[CompressionEvent], path) -> None:
    with open(path, "w") as f:
        for event in events:
            f.write(event.to_json() + "\n")


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _align_row(row: AttnRow, key_positions: np.ndarray) -> np.ndarray:
    """Project a traced attention row onto the given cache positions."""
    if row.key_positions.shape[0] >= key_positions.shape[0] and np.array_equal(
        row.key_positions[: key_positions.shape[0]], key_positions
    ):
        return row.weights[: key_positions.shape[0]]
    lookup = {int(p): i for i, p in enumerate(row.key_positions)}
    out = np.zeros(key_positions.shape[0], dtype=np.float32)
    for j, p in enumerate(key_positions):
        i = lookup.get(int(p))
        if i is not None:
            out[j] = row.weights[i]
    return out


def _group_rows(
    trace: AttentionTrace,
    layer: int,
    query_heads,
    key_positions: np.ndarray,
    last_k: int | None = None,
    from_position: int | None = None,
) -> np.ndarray:
    rows = []
    for h in query_heads:
        if from_position is not None:
            head_rows = trace.rows_from_position(layer, h, from_position)
        else:
            head_rows = trace.last_rows(layer, h, last_k)
        if not head_rows:
            raise ValueError(f"no traced attention rows for layer {layer} head {h}")
        rows.extend(_align_row(r, key_positions) for r in head_rows)
    return np.stack(rows)


def _rope_window(model: Model, cache: KvCache, config: CompressionConfig):
    start = max(cache.n_seen - 1, 0)
    window = min(config.rope_window, model.config.max_position - start)
    if window < 1:
        raise ValueError("no future positions left for the rotation average")
    return averaged_rope(start, window, model.rope)


def score_head(
    model: Model,
    cache: KvCache,
    layer: int,
    kv_head: int,
    config: CompressionConfig,
    *,
    stats: QueryStats | None = None,
    r_bar=None,
    trace: AttentionTrace | None = None,
    future_trace: AttentionTrace | None = None,
    future_from: int | None = None,
    mode: str = "prefill",
    head_budget: int | None = None,
) -> np.ndarray:
    """Score one head's cached entries with the configured policy."""
    keys = cache.keys(layer, kv_head)
    values = cache.values(layer, kv_head)
    kpos = cache.positions(layer, kv_head)
    n = keys.shape[0]
    if n == 0:
        return np.zeros(0, dtype=np.float32)
    group = model.config.query_heads_of(kv_head)
    policy = config.policy

    if policy == "expected_attention":
        if stats is None or r_bar is None:
            raise ValueError("expected_attention needs query statistics and a rotation window")
        group_moments = []
        for h in group:
            if mode == "decode":
                mean, cov = stats.ring_moments(layer, h)
            else:
                mean, cov = stats.prefill_moments(layer, h)
            group_moments.append(finalize_moments(mean, cov, r_bar, config.ridge))
        wo = model.weights[f"layers.{layer}.attn.wo"] if config.use_wo_v else None
        weights = value_weights(values, wo, group)
        return score_expected_attention(keys, values, group_moments, config.epsilon, weights)

    if policy == "knorm":
        return score_knorm(keys)

    if policy == "streaming":
        if head_budget is None:
            head_budget = max(int(n * (1.0 - config.ratio)), config.min_keep)
        recent = config.recent if config.recent is not None else max(head_budget - config.sinks, 0)
        return score_streaming(n, config.sinks, recent)

    if policy == "tova":
        if trace is None:
            raise ValueError("tova needs a prefill attention trace")
        rows = _group_rows(trace, layer, group, kpos, last_k=1)
        return score_tova(list(rows))

    if policy == "snapkv":
        if trace is None:
            raise ValueError("snapkv needs a prefill attention trace")
        rows = _group_rows(trace, layer, group, kpos, last_k=config.snap_obs_window)
        scores = score_snapkv(rows, config.snap_kernel)
        # observation-window entries are always retained
        obs = min(config.snap_obs_window, n)
        scores[n - obs :] = np.inf
        return scores

    if policy == "keydiff":
        return score_keydiff(keys)

    if policy in ("oracle", "anti_oracle"):
        if future_trace is None:
            raise ValueError(f"{policy} needs a teacher-forced future attention trace")
        rows = _group_rows(future_trace, layer, group, kpos, from_position=future_from)
        wo = model.weights[f"layers.{layer}.attn.wo"] if config.use_wo_v else None
        weights = value_weights(values, wo, group)
        scores = score_oracle(rows, weights)
        return -scores if policy == "anti_oracle" else scores

    if policy == "random":
        return score_random(n, (config.seed, layer, kv_head))

    raise ValueError(f"unknown policy {policy!r}")


def _layer_bytes(cache: KvCache, layer: int) -> int:
    per_entry = 2 * cache.head_dim * 4
    return cache.layer_total(layer) * per_entry


def compress_prefill(
    model: Model,
    cache: KvCache,
    stats: QueryStats | None,
    config: CompressionConfig,
    *,
    trace: AttentionTrace | None = None,
    future_trace: AttentionTrace | None = None,
    future_from: int | None = None,
) -> list[CompressionEvent]:
    """One-shot compression of a prefilled cache at ratio r.

    Head-adaptive mode retains exactly round((1-r) * layer_total) entries per
    layer (floored at min_keep per head); uniform mode keeps
    floor(len * (1-r)) per head, also floored at min_keep.
    """
    if config.ratio == 0.0:
        return []
    r = config.ratio
    r_bar = None
    if config.policy == "expected_attention":
        r_bar = _rope_window(model, cache, config)
    events = []
    for layer in range(model.config.n_layers):
        scores, positions, lens = [], [], []
        for g in range(model.config.n_kv_heads):
            n = cache.head_len(layer, g)
            budget = max(int(n * (1.0 - r)), min(config.min_keep, n))
            scores.append(
                score_head(
                    model, cache, layer, g, config,
                    stats=stats, r_bar=r_bar, trace=trace,
                    future_trace=future_trace, future_from=future_from,
                    head_budget=budget,
                )
            )
            positions.append(cache.positions(layer, g).copy())
            lens.append(n)

        bytes_before = _layer_bytes(cache, layer)
        if config.head_adaptive:
            total = sum(lens)
            floors = sum(min(config.min_keep, n) for n in lens)
            budget = min(max(round_half_up((1.0 - r) * total), floors), total)
            keeps = allocate_head_adaptive(scores, positions, budget, config.min_keep)
        else:
            keeps = []
            for g, n in enumerate(lens):
                n_kept = max(int(n * (1.0 - r)), min(config.min_keep, n))
                keeps.append(top_k_keep(scores[g], positions[g], n_kept))
        for g, keep in enumerate(keeps):
            cache.evict(layer, g, keep)
        events.append(
            CompressionEvent(
                step=0,
                layer=layer,
                policy=config.policy,
                bytes_before=bytes_before,
                bytes_after=_layer_bytes(cache, layer),
                kept_per_head=[int(k.shape[0]) for k in keeps],
            )
        )
    return events


class DecodingCompressor:
    """Decode-time hook: pass as `hook` to `greedy_decode`.

    Fires every `decode_interval` generated tokens on heads that exceed
    `max_cache_entries`, compressing them back down to that size while
    never evicting the most recent `stats_buffer` positions.
    """

    def __init__(
        self,
        model: Model,
        config: CompressionConfig,
        stats: QueryStats | None,
        max_cache_entries: int | None,
    ):
        self.model = model
        self.config = config
        self.stats = stats
        self.max_cache_entries = max_cache_entries
        self.events: list[CompressionEvent] = []

    def __call__(self, step: int, cache: KvCache):
        cfg = self.config
        if self.max_cache_entries is None or cfg.decode_interval <= 0:
            return None
        if step % cfg.decode_interval != 0:
            return None
        over = any(
            cache.head_len(layer, g) > self.max_cache_entries
            for layer in range(self.model.config.n_layers)
            for g in range(self.model.config.n_kv_heads)
        )
        if not over:
            return None

        r_bar = None
        if cfg.policy == "expected_attention":
            r_bar = _rope_window(self.model, cache, cfg)
        protect_from = cache.n_seen - cfg.stats_buffer
        fired = []
        for layer in range(self.model.config.n_layers):
            bytes_before = _layer_bytes(cache, layer)
            kept_counts = []
            touched = False
            for g in range(self.model.config.n_kv_heads):
                n = cache.head_len(layer, g)
                if n <= self.max_cache_entries:
                    kept_counts.append(n)
                    continue
                scores = score_head(
                    self.model, cache, layer, g, cfg,
                    stats=self.stats, r_bar=r_bar,
                    mode="decode", head_budget=self.max_cache_entries,
                )
                kpos = cache.positions(layer, g)
                overlay = scores.astype(np.float64)
                protected = kpos >= protect_from
                overlay[protected] = np.inf
                target = max(self.max_cache_entries, int(protected.sum()))
                keep = top_k_keep(overlay, kpos, target)
                cache.evict(layer, g, keep)
                kept_counts.append(int(keep.shape[0]))
                touched = True
            if touched:
                fired.append(
                    CompressionEvent(
                        step=step,
                        layer=layer,
                        policy=cfg.policy,
                        bytes_before=bytes_before,
                        bytes_after=_layer_bytes(cache, layer),
                        kept_per_head=kept_counts,
                    )
                )
        self.events.extend(fired)
        return fired or None
