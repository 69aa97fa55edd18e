"""Memory encoder, FIFO memory bank and memory cross-attention.

The bank keeps one prompt frame plus a queue of at most ``m`` encoded past
frames. With sampling interval ``dt`` the queue holds the newest frame and
the ``m - 1`` most recent frames whose index is a multiple of ``dt``.

Memory attention runs ``layers`` blocks of (self-attention over the image
tokens, cross-attention into the memory tokens, MLP). Each layer can see a
different token subset of the bank; :class:`TokenSet` carries the tokens with
their provenance so attention can be attributed back to memory frames.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .layers import (
    Weights,
    attend,
    attend_backward,
    block_shapes,
    layernorm_backward,
    linear,
    mlp,
    mlp_backward,
    self_attention,
    self_attention_backward,
)
from .ledger import charge_to
from .numerics import DimensionError, gelu, layernorm


class OrderingError(ValueError):
    pass


@dataclass(frozen=True)
class MemoryConfig:
    m: int = 6
    dt: int = 1
    layers: int = 2
    heads: int = 2
    pool: int = 1  # memory tokens = stage-2 tokens / pool^2

    def __post_init__(self) -> None:
        if self.m < 1 or self.dt < 1 or self.layers < 1 or self.pool < 1:
            raise ValueError("memory m, dt, layers and pool must all be >= 1")


@dataclass
class MemoryFrame:
    t: int
    tokens: np.ndarray  # (K, d)
    is_prompt: bool = False

    @property
    def K(self) -> int:
        return self.tokens.shape[0]


def retained_frames(t_next: int, m: int, dt: int, latest: int) -> set[int]:
    """Queue frame indices kept for processing frame ``t_next``.

    ``latest`` is always kept; the other ``m - 1`` slots hold the most recent
    multiples of ``dt`` at or below ``t_next - 2`` (frame 0 is the prompt).
    """
    keep = {latest}
    n = (t_next - 2) // dt
    for j in range(m - 1):
        f = (n - j) * dt
        if f >= 1:
            keep.add(f)
    return keep


@dataclass
class MemoryBank:
    m: int = 6
    dt: int = 1
    prompt: MemoryFrame | None = None
    queue: list[MemoryFrame] = field(default_factory=list)

    def push(self, frame: MemoryFrame, t: int | None = None) -> list[int]:
        """Add a frame and evict per the schedule. Returns evicted indices."""
        if t is not None and frame.t != t:
            raise OrderingError(f"frame index {frame.t} pushed at time {t}")
        if frame.is_prompt:
            if self.prompt is not None:
                raise OrderingError("prompt frame already set")
            self.prompt = frame
            return []
        last = self.queue[-1].t if self.queue else (self.prompt.t if self.prompt else -1)
        if frame.t <= last:
            raise OrderingError(f"non-monotone push: {frame.t} after {last}")
        self.queue.append(frame)
        keep = retained_frames(frame.t + 1, self.m, self.dt, frame.t)
        evicted = [f.t for f in self.queue if f.t not in keep]
        self.queue = [f for f in self.queue if f.t in keep]
        return evicted

    @property
    def latest(self) -> MemoryFrame | None:
        return self.queue[-1] if self.queue else None

    def frames(self) -> list[MemoryFrame]:
        return ([self.prompt] if self.prompt is not None else []) + list(self.queue)

    def older_frames(self) -> list[MemoryFrame]:
        """Queue frames other than the newest one (the sparse-eligible ones)."""
        return list(self.queue[:-1])

    def __len__(self) -> int:
        return len(self.frames())

    def indices(self) -> list[int]:
        return [f.t for f in self.frames()]


# -- memory encoder -------------------------------------------------------------


def memory_encoder_shapes(c0: int, d: int) -> dict[str, tuple[int, ...]]:
    return {
        "mem.enc.mask": (c0,),
        "mem.enc.proj1.w": (d, c0),
        "mem.enc.proj1.b": (d,),
        "mem.enc.proj2.w": (d, d),
        "mem.enc.proj2.b": (d,),
    }


def encode_memory(f_s0: np.ndarray, mask: np.ndarray, w: Weights, grid: tuple[int, int], t: int = 0, is_prompt: bool = False) -> MemoryFrame:
    """Fuse the chosen mask into the fine features and pool to ``grid`` tokens."""
    H, W, _ = f_s0.shape
    if mask.shape != (H, W):
        raise DimensionError(f"mask {mask.shape} does not match features {(H, W)}")
    gh, gw = grid
    if H % gh or W % gw:
        raise DimensionError(f"cannot pool {(H, W)} to {grid}")
    with charge_to("other"):
        fused = f_s0 + mask.astype(np.float32)[..., None] * w["mem.enc.mask"]
        h = gelu(linear(fused, w["mem.enc.proj1.w"], w["mem.enc.proj1.b"]))
        pooled = h.reshape(gh, H // gh, gw, W // gw, -1).mean(axis=(1, 3), dtype=np.float32)
        tokens = linear(pooled.reshape(gh * gw, -1), w["mem.enc.proj2.w"], w["mem.enc.proj2.b"])
    return MemoryFrame(t, tokens, is_prompt)


# -- memory attention -----------------------------------------------------------


@dataclass
class TokenSet:
    """Memory tokens seen by one attention layer, with their origin."""

    tokens: np.ndarray  # (T, d)
    frame: np.ndarray  # (T,) source frame index
    index: np.ndarray  # (T,) token index inside the source frame

    def __len__(self) -> int:
        return self.tokens.shape[0]

    @classmethod
    def from_frames(cls, frames: Sequence[MemoryFrame], subsets: Mapping[int, Sequence[int]] | None = None) -> "TokenSet":
        toks, fr, ix = [], [], []
        for f in frames:
            sel = None if subsets is None else subsets.get(f.t)
            idx = np.arange(f.K) if sel is None else np.asarray(sel, dtype=np.int64)
            toks.append(f.tokens if sel is None else f.tokens[idx])
            fr.append(np.full(idx.size, f.t, dtype=np.int64))
            ix.append(idx)
        return cls(np.concatenate(toks), np.concatenate(fr), np.concatenate(ix))


@dataclass
class LayerRecord:
    """Cross-attention of one memory layer, head-averaged.

    ``rows`` is ``(N, T)``: each image token's attention over the layer's
    token set. ``frame`` and ``index`` give the origin of each column.
    """

    rows: np.ndarray
    frame: np.ndarray
    index: np.ndarray

    def frame_block(self, t: int) -> np.ndarray:
        """``(N, K_t)`` attention block for memory frame ``t``."""
        sel = self.frame == t
        if not np.any(sel):
            raise KeyError(f"memory frame {t} not present in this record")
        return self.rows[:, sel]

    def frame_mean(self, t: int) -> np.ndarray:
        """Attention to frame ``t``'s tokens averaged over queries and heads."""
        return self.frame_block(t).mean(axis=0)

    @property
    def frames(self) -> list[int]:
        return list(dict.fromkeys(int(f) for f in self.frame))


def memory_attention_shapes(d: int, layers: int) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    for l in range(layers):
        p = f"mem.layer{l}"
        full = block_shapes(p, d)
        for k in ("ln1.g", "ln1.b", "qkv.w", "qkv.b", "proj.w", "proj.b", "fc1.w", "fc1.b", "fc2.w", "fc2.b"):
            shapes[f"{p}.{k}"] = full[f"{p}.{k}"]
        shapes[f"{p}.ln2.g"] = (d,)
        shapes[f"{p}.ln2.b"] = (d,)
        shapes[f"{p}.ln3.g"] = (d,)
        shapes[f"{p}.ln3.b"] = (d,)
        for k in ("q", "k", "v", "out"):
            shapes[f"{p}.cross.{k}.w"] = (d, d)
            shapes[f"{p}.cross.{k}.b"] = (d,)
    return shapes


def cross_attention(x: np.ndarray, mem: TokenSet, w: Weights, p: str, heads: int, cache: dict | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Image tokens ``x`` (already normalised) attend to memory tokens."""
    with charge_to("memory_cross_projection"):
        q = linear(x, w[f"{p}.cross.q.w"], w[f"{p}.cross.q.b"])
        k = linear(mem.tokens, w[f"{p}.cross.k.w"], w[f"{p}.cross.k.b"])
        v = linear(mem.tokens, w[f"{p}.cross.v.w"], w[f"{p}.cross.v.b"])
    sub = None if cache is None else {}
    out, probs = attend(q, k, v, heads, score_module="memory_cross_attention", value_module="memory_cross_attention_values", cache=sub)
    with charge_to("memory_cross_projection"):
        y = linear(out, w[f"{p}.cross.out.w"], w[f"{p}.cross.out.b"])
    if cache is not None:
        cache.update(attn=sub)
    return y, probs


def memory_layer(x: np.ndarray, mem: TokenSet, w: Weights, p: str, heads: int, cache: dict | None = None) -> tuple[np.ndarray, np.ndarray]:
    sa = None if cache is None else {}
    ca = None if cache is None else {}
    ff = None if cache is None else {}
    with charge_to("memory_self_attention"):
        a, _ = self_attention(layernorm(x, w[f"{p}.ln1.g"], w[f"{p}.ln1.b"]), w, p, heads, sa)
    x1 = x + a
    c, probs = cross_attention(layernorm(x1, w[f"{p}.ln2.g"], w[f"{p}.ln2.b"]), mem, w, p, heads, ca)
    x2 = x1 + c
    with charge_to("memory_ffn"):
        y = x2 + mlp(layernorm(x2, w[f"{p}.ln3.g"], w[f"{p}.ln3.b"]), w, p, ff)
    if cache is not None:
        cache.update(x=x, x1=x1, x2=x2, sa=sa, ca=ca, ff=ff, heads=heads)
    return y, probs


def run_memory_attention(
    f_t: np.ndarray,
    token_sets: Sequence[TokenSet],
    w: Weights,
    heads: int,
    caches: list | None = None,
) -> tuple[np.ndarray, list[LayerRecord]]:
    """Memory attention with a (possibly different) token set per layer."""
    x = f_t
    records = []
    for l, mem in enumerate(token_sets):
        cache = None if caches is None else {}
        x, probs = memory_layer(x, mem, w, f"mem.layer{l}", heads, cache)
        if caches is not None:
            caches.append(cache)
        records.append(LayerRecord(probs.mean(axis=0), mem.frame, mem.index))
    return x, records


def memory_attention_dense(f_t: np.ndarray, bank: MemoryBank, w: Weights, cfg: MemoryConfig) -> tuple[np.ndarray, list[LayerRecord]]:
    """Every layer cross-attends to every token of every bank frame."""
    if len(bank) == 0:
        raise ValueError("memory attention needs at least the prompt frame")
    ts = TokenSet.from_frames(bank.frames())
    return run_memory_attention(f_t, [ts] * cfg.layers, w, cfg.heads)


def memory_layer_backward(dy: np.ndarray, w: Weights, p: str, cache: dict) -> np.ndarray:
    """Gradient w.r.t. the image tokens; memory tokens are held fixed."""
    heads = cache["heads"]
    dn3 = mlp_backward(dy, w, p, cache["ff"])
    dx2 = dy + layernorm_backward(dn3, cache["x2"], w[f"{p}.ln3.g"])[0]
    dmerged = dx2 @ w[f"{p}.cross.out.w"]
    dq, _, _ = attend_backward(dmerged, cache["ca"]["attn"], heads)
    dn2 = dq @ w[f"{p}.cross.q.w"]
    dx1 = dx2 + layernorm_backward(dn2, cache["x1"], w[f"{p}.ln2.g"])[0]
    dn1 = self_attention_backward(dx1, w, p, heads, cache["sa"])
    return dx1 + layernorm_backward(dn1, cache["x"], w[f"{p}.ln1.g"])[0]
