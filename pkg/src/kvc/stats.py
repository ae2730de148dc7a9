"""Streaming query statistics and the expected unnormalized attention score.

Moments are estimated from observed pre-rotation queries (after QK-norm when
the model uses it). Prefill accumulates one-pass moments over every prompt
query; decoding keeps a fixed ring buffer of recent queries per head.
Accumulators run in float64; everything handed back to the engine is float32.
"""

from __future__ import annotations

from collections import deque

import numpy as np

from .tensorops import AveragedRope


class RunningMoments:
    """Welford accumulator for mean and covariance of d-vectors.

    Mean is exact; covariance uses divisor n-1 and is the zero matrix
    until two samples have arrived.
    """

    def __init__(self, dim: int):
        self.dim = dim
        self.count = 0
        self._mean = np.zeros(dim, dtype=np.float64)
        self._m2 = np.zeros((dim, dim), dtype=np.float64)

    def update(self, x: np.ndarray) -> None:
        x = np.asarray(x, dtype=np.float64)
        if not np.all(np.isfinite(x)):
            raise ValueError("moment update requires finite input")
        self.count += 1
        delta = x - self._mean
        self._mean += delta / self.count
        self._m2 += np.outer(delta, x - self._mean)

    def update_block(self, rows: np.ndarray) -> None:
        for row in rows:
            self.update(row)

    def mean(self) -> np.ndarray:
        if self.count == 0:
            raise ValueError("no samples accumulated")
        return self._mean.copy()

    def cov(self) -> np.ndarray:
        if self.count == 0:
            raise ValueError("no samples accumulated")
        if self.count < 2:
            return np.zeros((self.dim, self.dim), dtype=np.float64)
        return self._m2 / (self.count - 1)


def update_moments(moments: RunningMoments, q: np.ndarray) -> RunningMoments:
    moments.update(q)
    return moments


class QueryRing:
    """Ring buffer of the most recent `capacity` query vectors."""

    def __init__(self, dim: int, capacity: int):
        self.dim = dim
        self.capacity = capacity
        self._buf: deque[np.ndarray] = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self._buf)

    def push(self, q: np.ndarray) -> None:
        self._buf.append(np.asarray(q, dtype=np.float64).copy())

    def moments(self) -> tuple[np.ndarray, np.ndarray]:
        if not self._buf:
            raise ValueError("ring buffer is empty")
        rows = np.stack(self._buf)
        mean = rows.mean(axis=0)
        if rows.shape[0] < 2:
            cov = np.zeros((self.dim, self.dim), dtype=np.float64)
        else:
            centered = rows - mean
            cov = centered.T @ centered / (rows.shape[0] - 1)
        return mean, cov


class QueryStats:
    """Per-(layer, query-head) statistics fed by the model forward pass.

    Tracks both the full-stream accumulators used for one-shot prompt
    compression and the recent-query ring used during decoding.
    """

    def __init__(self, n_layers: int, n_heads: int, dim: int, buffer_len: int = 128):
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.dim = dim
        self.buffer_len = buffer_len
        self.running = [
            [RunningMoments(dim) for _ in range(n_heads)] for _ in range(n_layers)
        ]
        self.rings = [
            [QueryRing(dim, buffer_len) for _ in range(n_heads)] for _ in range(n_layers)
        ]

    def observe(self, layer: int, head: int, positions, q_rows: np.ndarray) -> None:
        running = self.running[layer][head]
        ring = self.rings[layer][head]
        for row in np.atleast_2d(q_rows):
            running.update(row)
            ring.push(row)

    def prefill_moments(self, layer: int, head: int) -> tuple[np.ndarray, np.ndarray]:
        r = self.running[layer][head]
        return r.mean(), r.cov()

    def ring_moments(self, layer: int, head: int) -> tuple[np.ndarray, np.ndarray]:
        return self.rings[layer][head].moments()


def finalize_moments(
    mean: np.ndarray,
    cov: np.ndarray,
    r_bar: AveragedRope,
    ridge: float = 1e-5,
) -> tuple[np.ndarray, np.ndarray]:
    """Regularize the covariance, then rotate both moments by the averaged
    rotation: mu_bar = R mu, sigma_bar = R cov R^T.

    The ridge is relative to trace/d; when the trace vanishes (fewer than two
    samples) a unit scale is used so the output is ridge * identity.
    """
    mean = np.asarray(mean, dtype=np.float64)
    cov = np.asarray(cov, dtype=np.float64)
    d = mean.shape[0]
    scale = np.trace(cov) / d
    if scale <= 0.0:
        scale = 1.0
    cov = cov + (ridge * scale) * np.eye(d)
    cov = 0.5 * (cov + cov.T)
    mu_bar = r_bar.rotate_vec(mean.astype(np.float32))
    sigma_bar = r_bar.rotate_cov(cov.astype(np.float32))
    sigma_bar = 0.5 * (sigma_bar + sigma_bar.T)
    return mu_bar, sigma_bar.astype(np.float32)


def expected_log_scores(
    keys: np.ndarray, mu_bar: np.ndarray, sigma_bar: np.ndarray
) -> np.ndarray:
    """log of the expected unnormalized attention score for each key:
    mu_bar.k / sqrt(d) + k.Sigma_bar.k / (2d).

    Exponentiation is deferred to the softmax for numerical stability.
    """
    keys = np.atleast_2d(np.asarray(keys, dtype=np.float32))
    d = keys.shape[1]
    lin = keys @ mu_bar.astype(np.float32) / np.float32(np.sqrt(d))
    quad = np.einsum("nd,de,ne->n", keys, sigma_bar.astype(np.float32), keys, optimize=True)
    return (lin + quad / np.float32(2 * d)).astype(np.float32)


def expected_log_score(k: np.ndarray, mu_bar: np.ndarray, sigma_bar: np.ndarray) -> float:
    return float(expected_log_scores(k[None, :], mu_bar, sigma_bar)[0])


def _psd_factor(sigma: np.ndarray, tol: float = 1e-8) -> np.ndarray:
    vals, vecs = np.linalg.eigh(sigma)
    if vals.min() < -tol * max(1.0, abs(vals.max())):
        raise ValueError(f"covariance is not PSD (min eigenvalue {vals.min():.3e})")
    return vecs * np.sqrt(np.clip(vals, 0.0, None))


def mgf_oracle(
    mu: np.ndarray,
    sigma: np.ndarray,
    k: np.ndarray,
    n_samples: int,
    seed: int,
    d: int | None = None,
) -> tuple[float, float]:
    """Monte-Carlo estimate of E[exp(q.k / sqrt(d))] with q ~ N(mu, sigma).

    Returns (estimate, standard error). Serves as the independent check of
    the closed-form score in `expected_log_scores`.
    """
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.atleast_2d(np.asarray(sigma, dtype=np.float64))
    k = np.asarray(k, dtype=np.float64)
    if d is None:
        d = k.shape[0]
    factor = _psd_factor(sigma)
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n_samples, mu.shape[0]))
    q = mu[None, :] + z @ factor.T
    vals = np.exp(q @ k / np.sqrt(d))
    est = float(vals.mean())
    se = float(vals.std(ddof=1) / np.sqrt(n_samples))
    return est, se
