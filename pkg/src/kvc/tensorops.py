"""Dense float32 linear algebra and rotary-embedding primitives.

Everything in the engine runs in 32-bit floats on row-major numpy arrays.
Rotary embeddings use the interleaved-pair convention: dimensions (2j, 2j+1)
form rotation pair j with frequency theta**(-2j/head_dim).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Raised when tensor extents do not satisfy an operation's contract."""


def as_f32(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=np.float32)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product of two 2-D float32 arrays with explicit shape checking."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner extents differ: {a.shape} @ {b.shape}")
    return np.matmul(a.astype(np.float32, copy=False), b.astype(np.float32, copy=False))


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Row-wise softmax with per-row max subtraction.

    Rows containing -inf entries are supported: those slots get exactly 0.
    """
    x = np.asarray(x, dtype=np.float32)
    if x.ndim == 1:
        return softmax_rows(x[None, :])[0]
    m = np.max(x, axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / np.sum(e, axis=-1, keepdims=True)


@dataclass
class RopeTable:
    """Precomputed cos/sin rotation angles per (position, pair).

    Tables cover positions 0..max_position inclusive so that averaging
    windows may end exactly at max_position.
    """

    head_dim: int
    theta: float
    max_position: int
    cos: np.ndarray = field(init=False, repr=False)
    sin: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.head_dim % 2 != 0 or self.head_dim <= 0:
            raise ShapeError(f"head_dim must be a positive even integer, got {self.head_dim}")
        if self.theta <= 0:
            raise ValueError(f"theta must be positive, got {self.theta}")
        half = self.head_dim // 2
        # frequency of pair j is theta ** (-2j / head_dim)
        freqs = self.theta ** (-2.0 * np.arange(half, dtype=np.float64) / self.head_dim)
        angles = np.arange(self.max_position + 1, dtype=np.float64)[:, None] * freqs[None, :]
        self.cos = np.cos(angles).astype(np.float32)
        self.sin = np.sin(angles).astype(np.float32)


def apply_rope(x: np.ndarray, position: int, table: RopeTable) -> np.ndarray:
    """Rotate one head-dim vector to `position`. Norm-preserving."""
    x = np.asarray(x, dtype=np.float32)
    if x.shape != (table.head_dim,):
        raise ShapeError(f"expected vector of length {table.head_dim}, got {x.shape}")
    if position < 0 or position >= table.max_position:
        raise ValueError(f"position {position} out of range [0, {table.max_position})")
    return rotate_rows(x[None, :], np.array([position]), table)[0]


def rotate_rows(x: np.ndarray, positions: np.ndarray, table: RopeTable) -> np.ndarray:
    """Rotate each row of `x` (n, head_dim) to its own position."""
    c = table.cos[positions]
    s = table.sin[positions]
    even = x[..., 0::2]
    odd = x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = even * c - odd * s
    out[..., 1::2] = even * s + odd * c
    return out


@dataclass
class AveragedRope:
    """Mean of rotation matrices over a position window, stored per pair.

    Only two scalars per rotation pair are kept (mean cos, mean sin); the
    full block-diagonal d x d matrix is materialized on demand for oracles.
    The mean of rotations is generally a contraction, not a rotation.
    """

    cos_bar: np.ndarray  # (head_dim // 2,)
    sin_bar: np.ndarray

    @property
    def head_dim(self) -> int:
        return 2 * self.cos_bar.shape[0]

    def rotate_vec(self, v: np.ndarray) -> np.ndarray:
        """R_bar @ v without materializing R_bar."""
        out = np.empty_like(v, dtype=np.float32)
        even = v[0::2]
        odd = v[1::2]
        out[0::2] = even * self.cos_bar - odd * self.sin_bar
        out[1::2] = even * self.sin_bar + odd * self.cos_bar
        return out

    def rotate_cov(self, s: np.ndarray) -> np.ndarray:
        """R_bar @ S @ R_bar.T blockwise (S is d x d)."""
        h = self.cos_bar.shape[0]
        blocks = np.empty((h, 2, 2), dtype=np.float32)
        blocks[:, 0, 0] = self.cos_bar
        blocks[:, 0, 1] = -self.sin_bar
        blocks[:, 1, 0] = self.sin_bar
        blocks[:, 1, 1] = self.cos_bar
        s4 = s.astype(np.float32, copy=False).reshape(h, 2, h, 2)
        out = np.einsum("iac,icje,jbe->iajb", blocks, s4, blocks, optimize=True)
        return out.reshape(2 * h, 2 * h)

    def as_matrix(self) -> np.ndarray:
        """Materialize the block-diagonal d x d matrix (test/oracle use)."""
        d = self.head_dim
        m = np.zeros((d, d), dtype=np.float32)
        for j in range(d // 2):
            m[2 * j, 2 * j] = self.cos_bar[j]
            m[2 * j, 2 * j + 1] = -self.sin_bar[j]
            m[2 * j + 1, 2 * j] = self.sin_bar[j]
            m[2 * j + 1, 2 * j + 1] = self.cos_bar[j]
        return m


def averaged_rope(start: int, window: int, table: RopeTable) -> AveragedRope:
    """Average the rotation over positions start+1 .. start+window."""
    if window < 1:
        raise ValueError(f"window must be >= 1, got {window}")
    if start < 0 or start + window > table.max_position:
        raise ValueError(
            f"window [{start + 1}, {start + window}] exceeds max_position {table.max_position}"
        )
    sl = slice(start + 1, start + window + 1)
    return AveragedRope(
        cos_bar=table.cos[sl].mean(axis=0, dtype=np.float64).astype(np.float32),
        sin_bar=table.sin[sl].mean(axis=0, dtype=np.float64).astype(np.float32),
    )


def averaged_rope_matrix(start: int, window: int, table: RopeTable) -> np.ndarray:
    """Dense d x d form of the averaged rotation (see `averaged_rope`)."""
    return averaged_rope(start, window, table).as_matrix()


def rmsnorm(x: np.ndarray, weight: np.ndarray, eps: float) -> np.ndarray:
    """Root-mean-square normalization along the last axis."""
    ms = np.mean(np.square(x), axis=-1, keepdims=True)
    return x / np.sqrt(ms + np.float32(eps)) * weight


def silu(x: np.ndarray) -> np.ndarray:
    return x / (1.0 + np.exp(-x))
