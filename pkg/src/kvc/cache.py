"""Per-layer, per-kv-head store of cached key/value pairs.

Heads grow independently and may end up with different lengths after
eviction. Original token positions are kept alongside each entry so
scores and analyses can always be mapped back to the prompt, even when
the retained set is non-contiguous.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .container import write_kvt


@dataclass
class KvEntry:
    key: np.ndarray  # (head_dim,) post-rotation
    value: np.ndarray  # (head_dim,)
    position: int


class _HeadStore:
    """Growable arrays for one (layer, kv_head). Amortized O(1) append."""

    __slots__ = ("keys", "values", "positions", "length")

    def __init__(self, head_dim: int):
        cap = 16
        self.keys = np.empty((cap, head_dim), dtype=np.float32)
        self.values = np.empty((cap, head_dim), dtype=np.float32)
        self.positions = np.empty(cap, dtype=np.int64)
        self.length = 0

    def _grow(self, need: int):
        cap = self.keys.shape[0]
        if need <= cap:
            return
        new_cap = max(need, 2 * cap)
        for name in ("keys", "values", "positions"):
            old = getattr(self, name)
            fresh = np.empty((new_cap,) + old.shape[1:], dtype=old.dtype)
            fresh[: self.length] = old[: self.length]
            setattr(self, name, fresh)

    def append_block(self, keys: np.ndarray, values: np.ndarray, positions: np.ndarray):
        n = keys.shape[0]
        if n == 0:
            return
        if self.length and positions[0] <= self.positions[self.length - 1]:
            raise ValueError(
                f"non-monotonic position {positions[0]} after {self.positions[self.length - 1]}"
            )
        if np.any(np.diff(positions) <= 0):
            raise ValueError("positions within a block must be strictly increasing")
        self._grow(self.length + n)
        self.keys[self.length : self.length + n] = keys
        self.values[self.length : self.length + n] = values
        self.positions[self.length : self.length + n] = positions
        self.length += n

    def evict(self, keep: np.ndarray):
        keep = np.asarray(keep, dtype=np.int64)
        if keep.size:
            if keep.min() < 0 or keep.max() >= self.length:
                raise IndexError(f"keep index out of range for head of length {self.length}")
            if np.any(np.diff(keep) <= 0):
                raise ValueError("keep indices must be sorted and unique")
        n = keep.size
        self.keys[:n] = self.keys[keep]
        self.values[:n] = self.values[keep]
        self.positions[:n] = self.positions[keep]
        self.length = n


class KvCache:
    """KV store for one decode session.

    `n_seen` counts tokens processed by the owning session and is the
    source of new entry positions; it is unaffected by eviction.
    """

    def __init__(self, n_layers: int, n_kv_heads: int, head_dim: int):
        self.n_layers = n_layers
        self.n_kv_heads = n_kv_heads
        self.head_dim = head_dim
        self._heads = [
            [_HeadStore(head_dim) for _ in range(n_kv_heads)] for _ in range(n_layers)
        ]
        self.n_seen = 0

    def _head(self, layer: int, kv_head: int) -> _HeadStore:
        return self._heads[layer][kv_head]

    def append(self, layer: int, kv_head: int, entry: KvEntry) -> None:
        if entry.position < 0:
            raise ValueError(f"position must be >= 0, got {entry.position}")
        self._head(layer, kv_head).append_block(
            np.asarray(entry.key, dtype=np.float32)[None, :],
            np.asarray(entry.value, dtype=np.float32)[None, :],
            np.asarray([entry.position], dtype=np.int64),
        )

    def append_block(self, layer, kv_head, keys, values, positions) -> None:
        self._head(layer, kv_head).append_block(keys, values, np.asarray(positions, dtype=np.int64))

    def evict(self, layer: int, kv_head: int, keep_indices) -> None:
        self._head(layer, kv_head).evict(np.asarray(keep_indices, dtype=np.int64))

    def head_len(self, layer: int, kv_head: int) -> int:
        return self._head(layer, kv_head).length

    def keys(self, layer: int, kv_head: int) -> np.ndarray:
        h = self._head(layer, kv_head)
        return h.keys[: h.length]

    def values(self, layer: int, kv_head: int) -> np.ndarray:
        h = self._head(layer, kv_head)
        return h.values[: h.length]

    def positions(self, layer: int, kv_head: int) -> np.ndarray:
        h = self._head(layer, kv_head)
        return h.positions[: h.length]

    def layer_total(self, layer: int) -> int:
        return sum(h.length for h in self._heads[layer])

    def memory_bytes(self) -> int:
        total = 0
        for layer in self._heads:
            for h in layer:
                total += h.length * 2 * self.head_dim * 4
        return total

    def dump(self, path) -> None:
        tensors = {}
        for li, layer in enumerate(self._heads):
            for hi, h in enumerate(layer):
                tensors[f"cache.{li}.{hi}.keys"] = h.keys[: h.length]
                tensors[f"cache.{li}.{hi}.values"] = h.values[: h.length]
                tensors[f"cache.{li}.{hi}.positions"] = h.positions[: h.length].astype(np.float32)
        write_kvt(path, tensors)


def memory_bytes(cache: KvCache) -> int:
    return cache.memory_bytes()
