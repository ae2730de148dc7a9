"""Independent float64 reference forward pass used as a test oracle.

Deliberately naive: no cache, no vectorized attention, explicit loops over
positions and heads, its own rotary implementation. Shares nothing with the
engine's forward path beyond the weight layout conventions.
"""

import math

import numpy as np


def _rms(x, w, eps):
    return x / math.sqrt(float(np.mean(x * x)) + eps) * w


def _rotate(vec, position, theta):
    d = vec.shape[0]
    out = vec.copy()
    for j in range(d // 2):
        angle = position * theta ** (-2.0 * j / d)
        c, s = math.cos(angle), math.sin(angle)
        a, b = vec[2 * j], vec[2 * j + 1]
        out[2 * j] = a * c - b * s
        out[2 * j + 1] = a * s + b * c
    return out


def reference_forward(config, weights, tokens):
    """Full-sequence logits for a token list, all in float64."""
    c = config
    w = {k: v.astype(np.float64) for k, v in weights.items()}
    n = len(tokens)
    d = c.head_dim
    group = c.n_heads // c.n_kv_heads

    x = np.stack([w["embed.weight"][t] for t in tokens])
    for li in range(c.n_layers):
        p = f"layers.{li}"
        xn = np.stack([_rms(x[i], w[f"{p}.norm_attn"], c.norm_eps) for i in range(n)])

        q = np.zeros((n, c.n_heads, d))
        k = np.zeros((n, c.n_kv_heads, d))
        v = np.zeros((n, c.n_kv_heads, d))
        for i in range(n):
            qi = w[f"{p}.attn.wq"] @ xn[i]
            ki = w[f"{p}.attn.wk"] @ xn[i]
            vi = w[f"{p}.attn.wv"] @ xn[i]
            for h in range(c.n_heads):
                q[i, h] = qi[h * d : (h + 1) * d]
            for g in range(c.n_kv_heads):
                k[i, g] = ki[g * d : (g + 1) * d]
                v[i, g] = vi[g * d : (g + 1) * d]
        if c.qk_norm:
            for i in range(n):
                for h in range(c.n_heads):
                    q[i, h] = _rms(q[i, h], w[f"{p}.attn.q_norm"], c.norm_eps)
                for g in range(c.n_kv_heads):
                    k[i, g] = _rms(k[i, g], w[f"{p}.attn.k_norm"], c.norm_eps)
        for i in range(n):
            for h in range(c.n_heads):
                q[i, h] = _rotate(q[i, h], i, c.rope_theta)
            for g in range(c.n_kv_heads):
                k[i, g] = _rotate(k[i, g], i, c.rope_theta)

        attn = np.zeros((n, c.n_heads * d))
        for i in range(n):
            for h in range(c.n_heads):
                g = h // group
                logits = np.array(
                    [float(q[i, h] @ k[j, g]) / math.sqrt(d) for j in range(i + 1)]
                )
                e = np.exp(logits - logits.max())
                a = e / e.sum()
                out = np.zeros(d)
                for j in range(i + 1):
                    out += a[j] * v[j, g]
                attn[i, h * d : (h + 1) * d] = out
        x = x + attn @ w[f"{p}.attn.wo"].T

        for i in range(n):
            xi = _rms(x[i], w[f"{p}.norm_mlp"], c.norm_eps)
            gate = w[f"{p}.mlp.w1"] @ xi
            gate = gate / (1.0 + np.exp(-gate))
            up = w[f"{p}.mlp.w3"] @ xi
            x[i] = x[i] + w[f"{p}.mlp.w2"] @ (gate * up)

    logits = np.zeros((n, c.vocab_size))
    for i in range(n):
        logits[i] = w["lm_head"] @ _rms(x[i], w["final_norm"], c.norm_eps)
    return logits
