"""Transformer building blocks over named weight dictionaries.

Weights are flat ``{name: array}`` mappings. Linear weights are stored
``(out, in)`` and applied as ``x @ W.T + b``. A standard block under prefix
``p`` owns::

    p.ln1.g p.ln1.b p.qkv.w p.qkv.b p.proj.w p.proj.b
    p.ln2.g p.ln2.b p.fc1.w p.fc1.b p.fc2.w p.fc2.b

which is ``12 C^2 + 13 C`` parameters for width ``C`` (MLP ratio 4).

Forward helpers optionally fill a ``cache`` dict consumed by the matching
``*_backward`` helper. The backward passes exist only for the shortcut
distillation path and return input gradients.
"""

from __future__ import annotations

from typing import Mapping

import numpy as np

from .numerics import gelu, layernorm, matmul, softmax_rows, _GELU_C

Weights = Mapping[str, np.ndarray]

MLP_RATIO = 4


def linear(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None, module: str | None = None) -> np.ndarray:
    lead = x.shape[:-1]
    y = matmul(x.reshape(-1, x.shape[-1]), w.T, module)
    if b is not None:
        y = y + b
    return y.reshape(*lead, w.shape[0])


def split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    # (..., n, C) -> (..., heads, n, C/heads)
    *lead, n, c = x.shape
    return x.reshape(*lead, n, heads, c // heads).swapaxes(-2, -3)


def merge_heads(x: np.ndarray) -> np.ndarray:
    *lead, h, n, dh = x.shape
    return x.swapaxes(-2, -3).reshape(*lead, n, h * dh)


def attend(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    heads: int,
    bias: np.ndarray | None = None,
    score_module: str | None = None,
    value_module: str | None = None,
    cache: dict | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Scaled dot-product attention on already-projected q, k, v.

    ``bias`` is added to the logits (use ``-inf`` to mask keys). Returns the
    merged output and the probabilities shaped ``(..., heads, n_q, n_k)``.
    """
    qh, kh, vh = split_heads(q, heads), split_heads(k, heads), split_heads(v, heads)
    scale = 1.0 / float(np.sqrt(qh.shape[-1]))
    logits = matmul(qh, kh.swapaxes(-1, -2), score_module) * np.float32(scale)
    if bias is not None:
        logits = logits + bias
    probs = softmax_rows(logits)
    out = matmul(probs, vh, value_module)
    if cache is not None:
        cache.update(qh=qh, kh=kh, vh=vh, probs=probs, scale=scale)
    return merge_heads(out), probs


def self_attention(x: np.ndarray, w: Weights, p: str, heads: int, cache: dict | None = None) -> tuple[np.ndarray, np.ndarray]:
    c = x.shape[-1]
    qkv = linear(x, w[f"{p}.qkv.w"], w[f"{p}.qkv.b"])
    q, k, v = qkv[..., :c], qkv[..., c : 2 * c], qkv[..., 2 * c :]
    sub = {} if cache is not None else None
    out, probs = attend(q, k, v, heads, cache=sub)
    y = linear(out, w[f"{p}.proj.w"], w[f"{p}.proj.b"])
    if cache is not None:
        cache.update(x=x, attn=sub, merged=out)
    return y, probs


def mlp(x: np.ndarray, w: Weights, p: str, cache: dict | None = None) -> np.ndarray:
    h = linear(x, w[f"{p}.fc1.w"], w[f"{p}.fc1.b"])
    a = gelu(h)
    if cache is not None:
        cache.update(x=x, h=h, a=a)
    return linear(a, w[f"{p}.fc2.w"], w[f"{p}.fc2.b"])


def block(x: np.ndarray, w: Weights, p: str, heads: int, cache: dict | None = None) -> np.ndarray:
    """Pre-norm transformer block applied independently to each leading index.

    ``x`` is ``(B, n, C)``: B windows of n tokens, or a single global set.
    """
    sub = None if cache is None else {}
    n1 = layernorm(x, w[f"{p}.ln1.g"], w[f"{p}.ln1.b"])
    a, _ = self_attention(n1, w, p, heads, sub)
    x1 = x + a
    sub2 = None if cache is None else {}
    n2 = layernorm(x1, w[f"{p}.ln2.g"], w[f"{p}.ln2.b"])
    y = x1 + mlp(n2, w, p, sub2)
    if cache is not None:
        cache.update(x=x, x1=x1, attn=sub, mlp=sub2, heads=heads)
    return y


def block_param_names(p: str) -> list[str]:
    return [
        f"{p}.{n}"
        for n in (
            "ln1.g", "ln1.b", "qkv.w", "qkv.b", "proj.w", "proj.b",
            "ln2.g", "ln2.b", "fc1.w", "fc1.b", "fc2.w", "fc2.b",
        )
    ]


def block_shapes(p: str, c: int) -> dict[str, tuple[int, ...]]:
    hidden = MLP_RATIO * c
    return {
        f"{p}.ln1.g": (c,), f"{p}.ln1.b": (c,),
        f"{p}.qkv.w": (3 * c, c), f"{p}.qkv.b": (3 * c,),
        f"{p}.proj.w": (c, c), f"{p}.proj.b": (c,),
        f"{p}.ln2.g": (c,), f"{p}.ln2.b": (c,),
        f"{p}.fc1.w": (hidden, c), f"{p}.fc1.b": (hidden,),
        f"{p}.fc2.w": (c, hidden), f"{p}.fc2.b": (c,),
    }


def full_block_param_count(d: int) -> int:
    """Parameters in one standard block of width d: ``12 d^2 + 13 d``."""
    return sum(int(np.prod(s)) for s in block_shapes("b", d).values())


def block_macs(tokens: int, group: int, c: int) -> int:
    """MACs of :func:`block` on ``tokens`` tokens split into groups of ``group``."""
    proj = tokens * c * 3 * c + tokens * c * c
    attn = 2 * tokens * group * c
    ffn = 2 * tokens * c * MLP_RATIO * c
    return proj + attn + ffn


# -- backward helpers -----------------------------------------------------------


def layernorm_backward(dy: np.ndarray, x: np.ndarray, gamma: np.ndarray, eps: float = 1e-5) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of layernorm w.r.t. input, gamma and beta."""
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    lead = tuple(range(dy.ndim - 1))
    dgamma = (dy * xhat).sum(axis=lead)
    dbeta = dy.sum(axis=lead)
    g = dy * gamma
    dx = inv * (g - g.mean(axis=-1, keepdims=True) - xhat * (g * xhat).mean(axis=-1, keepdims=True))
    return dx, dgamma, dbeta


def gelu_backward(dy: np.ndarray, h: np.ndarray) -> np.ndarray:
    u = _GELU_C * (h + 0.044715 * h**3)
    t = np.tanh(u)
    du = _GELU_C * (1.0 + 3 * 0.044715 * h**2)
    return dy * (0.5 * (1.0 + t) + 0.5 * h * (1.0 - t * t) * du)


def attend_backward(dout: np.ndarray, cache: dict, heads: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of :func:`attend` w.r.t. (q, k, v) given d(merged output)."""
    qh, kh, vh, probs, scale = cache["qh"], cache["kh"], cache["vh"], cache["probs"], cache["scale"]
    do = split_heads(dout, heads)
    dv = probs.swapaxes(-1, -2) @ do
    dp = do @ vh.swapaxes(-1, -2)
    dlogits = probs * (dp - (dp * probs).sum(axis=-1, keepdims=True))
    dq = (dlogits @ kh) * scale
    dk = (dlogits.swapaxes(-1, -2) @ qh) * scale
    return merge_heads(dq), merge_heads(dk), merge_heads(dv)


def self_attention_backward(dy: np.ndarray, w: Weights, p: str, heads: int, cache: dict) -> np.ndarray:
    dmerged = dy @ w[f"{p}.proj.w"]
    dq, dk, dv = attend_backward(dmerged, cache["attn"], heads)
    dqkv = np.concatenate([dq, dk, dv], axis=-1)
    return dqkv @ w[f"{p}.qkv.w"]


def mlp_backward(dy: np.ndarray, w: Weights, p: str, cache: dict) -> np.ndarray:
    da = dy @ w[f"{p}.fc2.w"]
    dh = gelu_backward(da, cache["h"])
    return dh @ w[f"{p}.fc1.w"]


def block_backward(dy: np.ndarray, w: Weights, p: str, cache: dict) -> np.ndarray:
    heads = cache["heads"]
    dn2 = mlp_backward(dy, w, p, cache["mlp"])
    dx1 = dy + layernorm_backward(dn2, cache["x1"], w[f"{p}.ln2.g"])[0]
    dn1 = self_attention_backward(dx1, w, p, heads, cache["attn"])
    return dx1 + layernorm_backward(dn1, cache["x"], w[f"{p}.ln1.g"])[0]

