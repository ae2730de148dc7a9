"""KV-pair scoring policies and head-adaptive budget allocation.

Every scorer returns one float32 score per cached entry of a single kv head,
higher meaning keep. Selection everywhere breaks ties deterministically:
higher score first, then lower original position, then lower head index.
"""

from __future__ import annotations

import numpy as np

from .stats import expected_log_scores
from .tensorops import softmax_rows

POLICY_IDS = (
    "expected_attention",
    "knorm",
    "streaming",
    "tova",
    "snapkv",
    "keydiff",
    "oracle",
    "anti_oracle",
    "random",
)


def value_weights(values: np.ndarray, wo: np.ndarray | None, query_heads=None) -> np.ndarray:
    """Per-entry value magnitude: ||v|| by default, or the group mean of
    ||Wo_h v|| when the output projection is supplied."""
    if wo is None:
        return np.linalg.norm(values, axis=1).astype(np.float32)
    d = values.shape[1]
    norms = []
    for h in query_heads:
        wo_h = wo[:, h * d : (h + 1) * d]
        norms.append(np.linalg.norm(values @ wo_h.T, axis=1))
    return np.mean(norms, axis=0).astype(np.float32)


def score_expected_attention(
    keys: np.ndarray,
    values: np.ndarray,
    group_moments: list[tuple[np.ndarray, np.ndarray]],
    epsilon: float = 0.02,
    weights: np.ndarray | None = None,
) -> np.ndarray:
    """Estimated future contribution of each cached pair.

    For every query head sharing this kv head, the log expected unnormalized
    score of each key is computed from that head's rotated query moments,
    softmaxed over the cached entries, and the resulting expected attention
    is averaged across the group. The final score is
    (expected_attention + epsilon) * value_weight.
    """
    n = keys.shape[0]
    if n == 0:
        return np.zeros(0, dtype=np.float32)
    acc = np.zeros(n, dtype=np.float32)
    for mu_bar, sigma_bar in group_moments:
        acc += softmax_rows(expected_log_scores(keys, mu_bar, sigma_bar))
    a_hat = acc / np.float32(len(group_moments))
    if weights is None:
        weights = np.linalg.norm(values, axis=1).astype(np.float32)
    return (a_hat + np.float32(epsilon)) * weights


def score_knorm(keys: np.ndarray) -> np.ndarray:
    """Keep the smallest keys: score is the negated L2 norm."""
    return (-np.linalg.norm(keys, axis=1)).astype(np.float32)


def score_streaming(length: int, sinks: int, recent: int) -> np.ndarray:
    """Sink tokens first (2), recent window next (1), everything else 0."""
    scores = np.zeros(length, dtype=np.float32)
    scores[: min(sinks, length)] = 2.0
    if recent > 0:
        tail = scores[max(sinks, length - recent) :]
        tail[tail == 0.0] = 1.0
    return scores


def score_tova(last_rows: list[np.ndarray]) -> np.ndarray:
    """Attention of the most recent query, averaged over the query group."""
    return np.mean(last_rows, axis=0).astype(np.float32)


def score_snapkv(rows: np.ndarray, kernel: int) -> np.ndarray:
    """Mean attention over an observation window of recent query rows,
    smoothed by a centered 1-D max-pool of width `kernel`.

    Keeping the observation-window entries themselves is enforced at
    selection time, not in these scores.
    """
    rows = np.atleast_2d(rows)
    mean_row = rows.mean(axis=0)
    n = mean_row.shape[0]
    half = kernel // 2
    pooled = np.empty(n, dtype=np.float32)
    for i in range(n):
        pooled[i] = mean_row[max(0, i - half) : min(n, i + half + 1)].max()
    return pooled


def score_keydiff(keys: np.ndarray) -> np.ndarray:
    """Cosine distance of each key from the head's mean key; the most
    distinct keys rank highest."""
    n = keys.shape[0]
    if n == 0:
        return np.zeros(0, dtype=np.float32)
    anchor = keys.mean(axis=0)
    anchor_norm = np.linalg.norm(anchor)
    key_norms = np.linalg.norm(keys, axis=1)
    denom = key_norms * anchor_norm
    with np.errstate(invalid="ignore", divide="ignore"):
        cos = np.where(denom > 0, keys @ anchor / np.where(denom > 0, denom, 1.0), 1.0)
    return (1.0 - cos).astype(np.float32)


def score_oracle(future_rows: np.ndarray, value_w: np.ndarray) -> np.ndarray:
    """True mean future contribution: (mean attention over teacher-forced
    future steps) * value magnitude."""
    rows = np.atleast_2d(future_rows)
    return (rows.mean(axis=0) * value_w).astype(np.float32)


def score_random(length: int, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).random(length, dtype=np.float32)


def _keep_order(scores: np.ndarray, positions: np.ndarray) -> np.ndarray:
    """Indices sorted by keep priority: score desc, then position asc."""
    return np.lexsort((positions, -scores.astype(np.float64)))


def top_k_keep(scores: np.ndarray, positions: np.ndarray, k: int) -> np.ndarray:
    """Ascending indices of the k entries ranked first by keep priority."""
    if k >= scores.shape[0]:
        return np.arange(scores.shape[0], dtype=np.int64)
    kept = _keep_order(scores, positions)[:k]
    return np.sort(kept)


def allocate_head_adaptive(
    scores: list[np.ndarray],
    positions: list[np.ndarray],
    layer_budget: int,
    min_keep: int,
) -> list[np.ndarray]:
    """Distribute a layer budget across heads by pooled score ranking.

    All (head, entry) pairs compete globally for the budget; afterwards any
    head left below its floor is topped up with its own best entries while
    the globally weakest surplus entries are dropped. Floors are clamped to
    the head length. Returns ascending keep indices per head.
    """
    lens = [s.shape[0] for s in scores]
    total = sum(lens)
    floors = [min(min_keep, n) for n in lens]
    if layer_budget > total:
        raise ValueError(f"budget {layer_budget} exceeds {total} cached entries")
    if sum(floors) > layer_budget:
        raise ValueError(f"budget {layer_budget} cannot satisfy per-head floors {floors}")

    flat_score = np.concatenate([s.astype(np.float64) for s in scores]) if total else np.zeros(0)
    flat_pos = np.concatenate(positions) if total else np.zeros(0, dtype=np.int64)
    flat_head = np.concatenate(
        [np.full(n, h, dtype=np.int64) for h, n in enumerate(lens)]
    ) if total else np.zeros(0, dtype=np.int64)
    flat_idx = np.concatenate(
        [np.arange(n, dtype=np.int64) for n in lens]
    ) if total else np.zeros(0, dtype=np.int64)

    ranked = np.lexsort((flat_head, flat_pos, -flat_score))
    kept = np.zeros(total, dtype=bool)
    kept[ranked[:layer_budget]] = True
    counts = [int(kept[flat_head == h].sum()) for h in range(len(lens))]

    rank_of = np.empty(total, dtype=np.int64)
    rank_of[ranked] = np.arange(total)

    for h in range(len(lens)):
        while counts[h] < floors[h]:
            own = np.flatnonzero((flat_head == h) & ~kept)
            promote = own[np.argmin(rank_of[own])]
            surplus = np.flatnonzero(
                kept & np.isin(flat_head, [g for g in range(len(lens)) if counts[g] > floors[g]])
            )
            demote = surplus[np.argmax(rank_of[surplus])]
            kept[promote] = True
            kept[demote] = False
            counts[h] += 1
            counts[int(flat_head[demote])] -= 1

    out = []
    for h in range(len(lens)):
        mask = kept & (flat_head == h)
        out.append(np.sort(flat_idx[mask]))
    return out
