"""Decoder-only transformer runtime: RMSNorm, SwiGLU, RoPE, grouped-query
attention, greedy decoding.

Keys are cached post-rotation at their original positions, so eviction is a
pure index operation and cached positions may be non-contiguous. Queries are
exposed pre-rotation (after QK-norm when enabled) to any attached statistics
observer. Attention rows are materialized on request; there is no fused
attention path, which is what makes score-based policies and the future-
attention oracle implementable at all.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .cache import KvCache
from .container import (
    ExtentMismatchError,
    MissingTensorError,
    read_kvt,
    write_kvt,
)
from .tensorops import RopeTable, rmsnorm, rotate_rows, silu, softmax_rows


class PositionOverflowError(ValueError):
    """Sequence grew past the rope table's maximum position."""


@dataclass
class ModelConfig:
    n_layers: int
    n_heads: int
    n_kv_heads: int
    head_dim: int
    hidden_dim: int
    ffn_dim: int
    vocab_size: int
    rope_theta: float
    norm_eps: float
    max_position: int
    qk_norm: bool = False

    def __post_init__(self):
        for name in (
            "n_layers", "n_heads", "n_kv_heads", "head_dim",
            "hidden_dim", "ffn_dim", "vocab_size", "max_position",
        ):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.n_heads % self.n_kv_heads != 0:
            raise ValueError(
                f"n_heads ({self.n_heads}) must be divisible by n_kv_heads ({self.n_kv_heads})"
            )
        if self.rope_theta <= 0 or self.norm_eps <= 0:
            raise ValueError("rope_theta and norm_eps must be positive")

    @property
    def group_size(self) -> int:
        return self.n_heads // self.n_kv_heads

    def kv_head_of(self, query_head: int) -> int:
        return query_head // self.group_size

    def query_heads_of(self, kv_head: int) -> range:
        g = self.group_size
        return range(kv_head * g, (kv_head + 1) * g)


def expected_weight_shapes(config: ModelConfig) -> dict[str, tuple]:
    """Tensor name -> extents for a checkpoint of this configuration."""
    c = config
    shapes = {
        "embed.weight": (c.vocab_size, c.hidden_dim),
        "final_norm": (c.hidden_dim,),
        "lm_head": (c.vocab_size, c.hidden_dim),
    }
    for i in range(c.n_layers):
        p = f"layers.{i}"
        shapes[f"{p}.attn.wq"] = (c.n_heads * c.head_dim, c.hidden_dim)
        shapes[f"{p}.attn.wk"] = (c.n_kv_heads * c.head_dim, c.hidden_dim)
        shapes[f"{p}.attn.wv"] = (c.n_kv_heads * c.head_dim, c.hidden_dim)
        shapes[f"{p}.attn.wo"] = (c.hidden_dim, c.n_heads * c.head_dim)
        if c.qk_norm:
            shapes[f"{p}.attn.q_norm"] = (c.head_dim,)
            shapes[f"{p}.attn.k_norm"] = (c.head_dim,)
        shapes[f"{p}.mlp.w1"] = (c.ffn_dim, c.hidden_dim)
        shapes[f"{p}.mlp.w2"] = (c.hidden_dim, c.ffn_dim)
        shapes[f"{p}.mlp.w3"] = (c.ffn_dim, c.hidden_dim)
        shapes[f"{p}.norm_attn"] = (c.hidden_dim,)
        shapes[f"{p}.norm_mlp"] = (c.hidden_dim,)
    return shapes


@dataclass
class AttnRow:
    query_position: int
    key_positions: np.ndarray
    weights: np.ndarray


class AttentionTrace:
    """Optional sink for per-head attention rows, pre-rotation queries and
    post-attention hidden states."""

    def __init__(self, attention=True, queries=False, hidden=False):
        self.record_attention = attention
        self.record_queries = queries
        self.record_hidden = hidden
        self.attention: dict[tuple[int, int], list[AttnRow]] = {}
        self.queries: dict[tuple[int, int], list[tuple[int, np.ndarray]]] = {}
        self.hidden: dict[int, list[tuple[int, np.ndarray]]] = {}

    def add_row(self, layer, head, row: AttnRow):
        self.attention.setdefault((layer, head), []).append(row)

    def rows(self, layer: int, head: int) -> list[AttnRow]:
        return self.attention.get((layer, head), [])

    def last_rows(self, layer: int, head: int, k: int) -> list[AttnRow]:
        return self.rows(layer, head)[-k:]

    def rows_from_position(self, layer: int, head: int, position: int) -> list[AttnRow]:
        return [r for r in self.rows(layer, head) if r.query_position >= position]

    def hidden_by_position(self, layer: int) -> dict[int, np.ndarray]:
        return dict(self.hidden.get(layer, []))


class Model:
    def __init__(self, config: ModelConfig, weights: dict[str, np.ndarray]):
        self.config = config
        self.weights = weights
        validate_weights(config, weights)
        self.rope = RopeTable(config.head_dim, config.rope_theta, config.max_position)

    def new_cache(self) -> KvCache:
        c = self.config
        return KvCache(c.n_layers, c.n_kv_heads, c.head_dim)

    def forward(
        self,
        tokens,
        cache: KvCache,
        *,
        trace: AttentionTrace | None = None,
        stats=None,
        masked: dict[tuple[int, int], np.ndarray] | None = None,
    ) -> np.ndarray:
        """Process `tokens`, append their KV pairs, return (len, vocab) logits.

        `masked` maps (layer, kv_head) to original positions whose attention
        logits are forced to -inf for the whole group; eviction of those
        entries is required to produce the same outputs.
        """
        c = self.config
        w = self.weights
        tokens = [int(t) for t in tokens]
        n = len(tokens)
        if n == 0:
            return np.zeros((0, c.vocab_size), dtype=np.float32)
        for t in tokens:
            if t < 0 or t >= c.vocab_size:
                raise ValueError(f"token id {t} outside vocab of size {c.vocab_size}")
        start = cache.n_seen
        if start + n - 1 >= c.max_position:
            raise PositionOverflowError(
                f"positions {start}..{start + n - 1} exceed max_position {c.max_position}"
            )
        positions = np.arange(start, start + n, dtype=np.int64)

        x = w["embed.weight"][tokens]
        inv_sqrt_d = 1.0 / float(np.sqrt(c.head_dim))

        for li in range(c.n_layers):
            p = f"layers.{li}"
            xn = rmsnorm(x, w[f"{p}.norm_attn"], c.norm_eps)
            q = (xn @ w[f"{p}.attn.wq"].T).reshape(n, c.n_heads, c.head_dim)
            k = (xn @ w[f"{p}.attn.wk"].T).reshape(n, c.n_kv_heads, c.head_dim)
            v = (xn @ w[f"{p}.attn.wv"].T).reshape(n, c.n_kv_heads, c.head_dim)
            if c.qk_norm:
                q = rmsnorm(q, w[f"{p}.attn.q_norm"], c.norm_eps)
                k = rmsnorm(k, w[f"{p}.attn.k_norm"], c.norm_eps)

            if stats is not None:
                for h in range(c.n_heads):
                    stats.observe(li, h, positions, q[:, h, :])
            if trace is not None and trace.record_queries:
                for h in range(c.n_heads):
                    for i in range(n):
                        trace.queries.setdefault((li, h), []).append(
                            (int(positions[i]), q[i, h, :].copy())
                        )

            qr = np.empty_like(q)
            kr = np.empty_like(k)
            for h in range(c.n_heads):
                qr[:, h, :] = rotate_rows(q[:, h, :], positions, self.rope)
            for g in range(c.n_kv_heads):
                kr[:, g, :] = rotate_rows(k[:, g, :], positions, self.rope)
                cache.append_block(li, g, kr[:, g, :], v[:, g, :], positions)

            attn_out = np.empty((n, c.n_heads * c.head_dim), dtype=np.float32)
            for h in range(c.n_heads):
                g = c.kv_head_of(h)
                keys = cache.keys(li, g)
                vals = cache.values(li, g)
                kpos = cache.positions(li, g)
                logits = (qr[:, h, :] @ keys.T) * np.float32(inv_sqrt_d)
                logits = np.where(kpos[None, :] > positions[:, None], -np.inf, logits)
                if masked is not None and (li, g) in masked:
                    hit = np.isin(kpos, masked[(li, g)])
                    logits[:, hit] = -np.inf
                weights = softmax_rows(logits)
                if trace is not None and trace.record_attention:
                    for i in range(n):
                        trace.add_row(
                            li, h, AttnRow(int(positions[i]), kpos.copy(), weights[i].copy())
                        )
                attn_out[:, h * c.head_dim : (h + 1) * c.head_dim] = weights @ vals

            x = x + attn_out @ w[f"{p}.attn.wo"].T
            if trace is not None and trace.record_hidden:
                for i in range(n):
                    trace.hidden.setdefault(li, []).append((int(positions[i]), x[i].copy()))

            xn2 = rmsnorm(x, w[f"{p}.norm_mlp"], c.norm_eps)
            gate = silu(xn2 @ w[f"{p}.mlp.w1"].T)
            up = xn2 @ w[f"{p}.mlp.w3"].T
            x = x + (gate * up) @ w[f"{p}.mlp.w2"].T

        xf = rmsnorm(x, w["final_norm"], c.norm_eps)
        logits = xf @ w["lm_head"].T
        cache.n_seen += n
        return logits


def greedy_decode(
    model: Model,
    prompt,
    max_new: int,
    cache: KvCache,
    *,
    hook=None,
    trace: AttentionTrace | None = None,
    stats=None,
) -> list[int]:
    """Argmax decoding. `hook(step, cache)` runs after each generated token
    has been appended to the cache; steps are 1-based."""
    if max_new < 0:
        raise ValueError("max_new must be >= 0")
    prompt = list(prompt)
    logits = model.forward(prompt, cache, trace=trace, stats=stats) if prompt else None
    if max_new == 0:
        return []
    if logits is None or logits.shape[0] == 0:
        raise ValueError("cannot decode from an empty prompt")
    out: list[int] = []
    for step in range(1, max_new + 1):
        next_id = int(np.argmax(logits[-1]))
        out.append(next_id)
        logits = model.forward([next_id], cache, trace=trace, stats=stats)
        if hook is not None:
            hook(step, cache)
    return out


def validate_weights(config: ModelConfig, weights: dict[str, np.ndarray]) -> None:
    expected = expected_weight_shapes(config)
    for name, shape in expected.items():
        if name not in weights:
            raise MissingTensorError(f"missing tensor {name!r}")
        got = tuple(weights[name].shape)
        if got != shape:
            raise ExtentMismatchError(f"{name}: expected extents {shape}, found {got}")
    extra = set(weights) - set(expected)
    if extra:
        raise ExtentMismatchError(f"unexpected tensors: {sorted(extra)}")


def save_model(config: ModelConfig, weights: dict[str, np.ndarray], path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    (path / "config.json").write_text(json.dumps(asdict(config), indent=2) + "\n")
    write_kvt(path / "weights.kvt", weights)


def load_model(path) -> Model:
    path = Path(path)
    cfg_file = path / "config.json"
    if not cfg_file.exists():
        raise FileNotFoundError(f"no config.json under {path}")
    config = ModelConfig(**json.loads(cfg_file.read_text()))
    weights = read_kvt(path / "weights.kvt")
    return Model(config, weights)


def random_model(config: ModelConfig, seed: int, gain: float = 1.5) -> Model:
    """Seeded random weights. `gain` scales the q/k projections; larger values
    sharpen attention, which keeps eviction policies distinguishable."""
    rng = np.random.default_rng(seed)

    def normal(shape, std):
        return rng.normal(0.0, std, size=shape).astype(np.float32)

    c = config
    std_h = 1.0 / float(np.sqrt(c.hidden_dim))
    std_f = 1.0 / float(np.sqrt(c.ffn_dim))
    weights: dict[str, np.ndarray] = {
        "embed.weight": normal((c.vocab_size, c.hidden_dim), 1.0),
        "final_norm": np.ones(c.hidden_dim, dtype=np.float32),
        "lm_head": normal((c.vocab_size, c.hidden_dim), std_h),
    }
    for i in range(c.n_layers):
        p = f"layers.{i}"
        weights[f"{p}.attn.wq"] = normal((c.n_heads * c.head_dim, c.hidden_dim), gain * std_h)
        weights[f"{p}.attn.wk"] = normal((c.n_kv_heads * c.head_dim, c.hidden_dim), gain * std_h)
        weights[f"{p}.attn.wv"] = normal((c.n_kv_heads * c.head_dim, c.hidden_dim), std_h)
        weights[f"{p}.attn.wo"] = normal((c.hidden_dim, c.n_heads * c.head_dim), std_h)
        if c.qk_norm:
            weights[f"{p}.attn.q_norm"] = np.ones(c.head_dim, dtype=np.float32)
            weights[f"{p}.attn.k_norm"] = np.ones(c.head_dim, dtype=np.float32)
        weights[f"{p}.mlp.w1"] = normal((c.ffn_dim, c.hidden_dim), std_h)
        weights[f"{p}.mlp.w2"] = normal((c.hidden_dim, c.ffn_dim), std_f)
        weights[f"{p}.mlp.w3"] = normal((c.ffn_dim, c.hidden_dim), std_h)
        weights[f"{p}.norm_attn"] = np.ones(c.hidden_dim, dtype=np.float32)
        weights[f"{p}.norm_mlp"] = np.ones(c.hidden_dim, dtype=np.float32)
    return Model(config, weights)
