"""Prompt-conditioned mask decoder.

Five learned output tokens (one IoU token, three mask tokens, one presence
token) exchange information with the memory-conditioned image tokens through
two two-way blocks and a final token-to-image attention. The head- and
token-averaged weights of that final attention form the attention map
``A_t`` handed to the window router.

Masks are produced at the stage-0 grid: each mask token is turned into a
per-pixel filter by a small hypernetwork and dotted with upscaled features
that carry skip connections from stages 0 and 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import Weights, attend, linear, self_attention
from .ledger import charge_to
from .numerics import DimensionError, gelu, layernorm, sigmoid

N_MASKS = 3
IOU_TOKEN, OBJ_TOKEN = 0, N_MASKS + 1
N_TOKENS = N_MASKS + 2


@dataclass(frozen=True)
class DecoderConfig:
    d: int = 64
    c0: int = 16
    c1: int = 32
    heads: int = 2
    blocks: int = 2
    grid: tuple[int, int] = (8, 8)  # stage-2 extents; stage 1 and 0 are 2x and 4x

    @property
    def mask_shape(self) -> tuple[int, int]:
        return self.grid[0] * 4, self.grid[1] * 4

    @property
    def n_tokens(self) -> int:
        return self.grid[0] * self.grid[1]


def _attn_shapes(p: str, d: int) -> dict[str, tuple[int, ...]]:
    out: dict[str, tuple[int, ...]] = {}
    for k in ("q", "k", "v", "out"):
        out[f"{p}.{k}.w"] = (d, d)
        out[f"{p}.{k}.b"] = (d,)
    return out


def _ln_shapes(p: str, d: int) -> dict[str, tuple[int, ...]]:
    return {f"{p}.g": (d,), f"{p}.b": (d,)}


def decoder_shapes(cfg: DecoderConfig) -> dict[str, tuple[int, ...]]:
    d, c0, c1 = cfg.d, cfg.c0, cfg.c1
    s: dict[str, tuple[int, ...]] = {
        "dec.tokens": (N_TOKENS, d),
        "dec.prompt.mask": (d,),
        "dec.prompt.bias": (d,),
        "dec.prompt.none": (d,),
    }
    for b in range(cfg.blocks):
        p = f"dec.tw{b}"
        for ln in ("ln_self", "ln_t2i_t", "ln_t2i_i", "ln_mlp", "ln_i2t_i", "ln_i2t_t"):
            s.update(_ln_shapes(f"{p}.{ln}", d))
        s[f"{p}.qkv.w"] = (3 * d, d)
        s[f"{p}.qkv.b"] = (3 * d,)
        s[f"{p}.proj.w"] = (d, d)
        s[f"{p}.proj.b"] = (d,)
        s.update(_attn_shapes(f"{p}.t2i", d))
        s[f"{p}.fc1.w"] = (2 * d, d)
        s[f"{p}.fc1.b"] = (2 * d,)
        s[f"{p}.fc2.w"] = (d, 2 * d)
        s[f"{p}.fc2.b"] = (d,)
        s.update(_attn_shapes(f"{p}.i2t", d))
    s.update(_ln_shapes("dec.final.ln_t", d))
    s.update(_ln_shapes("dec.final.ln_i", d))
    s.update(_attn_shapes("dec.final", d))
    s.update({
        "dec.up1.w": (c1, d), "dec.up1.b": (c1,),
        "dec.skip1.w": (c1, c1), "dec.skip1.b": (c1,),
        "dec.up2.w": (c0, c1), "dec.up2.b": (c0,),
        "dec.skip0.w": (c0, c0), "dec.skip0.b": (c0,),
        "dec.iou.w": (N_MASKS, d), "dec.iou.b": (N_MASKS,),
        "dec.obj.w": (1, d), "dec.obj.b": (1,),
    })
    for j in range(N_MASKS):
        s[f"dec.hyper{j}.fc1.w"] = (d, d)
        s[f"dec.hyper{j}.fc1.b"] = (d,)
        s[f"dec.hyper{j}.fc2.w"] = (c0, d)
        s[f"dec.hyper{j}.fc2.b"] = (c0,)
    return s


@dataclass
class PromptEmbedding:
    """Dense prompt added to the image tokens plus the learned output tokens."""

    dense: np.ndarray  # (N, d)
    tokens: np.ndarray  # (N_TOKENS, d)


def mask_to_grid(mask: np.ndarray, grid: tuple[int, int]) -> np.ndarray:
    """Area fraction of ``mask`` inside each cell of ``grid``."""
    m = np.asarray(mask, dtype=np.float32)
    H, W = m.shape
    gh, gw = grid
    if H % gh or W % gw:
        raise DimensionError(f"mask {m.shape} cannot be pooled to {grid}")
    return m.reshape(gh, H // gh, gw, W // gw).mean(axis=(1, 3), dtype=np.float32)


def make_prompt(w: Weights, cfg: DecoderConfig, mask: np.ndarray | None = None) -> PromptEmbedding:
    """Mask prompt for the annotated frame, the learned no-mask embedding otherwise."""
    if mask is None:
        dense = np.broadcast_to(w["dec.prompt.none"], (cfg.n_tokens, cfg.d)).copy()
    else:
        frac = mask_to_grid(mask, cfg.grid).reshape(-1, 1)
        dense = frac * w["dec.prompt.mask"] + w["dec.prompt.bias"]
    return PromptEmbedding(dense.astype(np.float32), w["dec.tokens"].copy())


@dataclass
class MaskPrediction:
    masks: np.ndarray  # (3, H, W) bool
    logits: np.ndarray  # (3, H, W)
    s_iou: np.ndarray  # (3,)
    s_obj: float
    attention: np.ndarray  # (h2, w2), sums to 1
    tokens: np.ndarray | None = None

    @property
    def chosen(self) -> int:
        return int(np.argmax(self.s_iou))  # argmax returns the first maximum

    @property
    def mask(self) -> np.ndarray:
        return self.masks[self.chosen]

    @property
    def present(self) -> bool:
        return self.s_obj > 0


def choose_output(pred: MaskPrediction) -> np.ndarray:
    return pred.mask


def _ln(x: np.ndarray, w: Weights, p: str) -> np.ndarray:
    return layernorm(x, w[f"{p}.g"], w[f"{p}.b"])


def cross_attend(xq: np.ndarray, xkv: np.ndarray, w: Weights, p: str, heads: int) -> tuple[np.ndarray, np.ndarray]:
    q = linear(xq, w[f"{p}.q.w"], w[f"{p}.q.b"])
    k = linear(xkv, w[f"{p}.k.w"], w[f"{p}.k.b"])
    v = linear(xkv, w[f"{p}.v.w"], w[f"{p}.v.b"])
    out, probs = attend(q, k, v, heads)
    return linear(out, w[f"{p}.out.w"], w[f"{p}.out.b"]), probs


def two_way_block(t: np.ndarray, img: np.ndarray, w: Weights, p: str, heads: int) -> tuple[np.ndarray, np.ndarray]:
    t = t + self_attention(_ln(t, w, f"{p}.ln_self"), w, p, heads)[0]
    t = t + cross_attend(_ln(t, w, f"{p}.ln_t2i_t"), _ln(img, w, f"{p}.ln_t2i_i"), w, f"{p}.t2i", heads)[0]
    n = _ln(t, w, f"{p}.ln_mlp")
    t = t + linear(gelu(linear(n, w[f"{p}.fc1.w"], w[f"{p}.fc1.b"])), w[f"{p}.fc2.w"], w[f"{p}.fc2.b"])
    img = img + cross_attend(_ln(img, w, f"{p}.ln_i2t_i"), _ln(t, w, f"{p}.ln_i2t_t"), w, f"{p}.i2t", heads)[0]
    return t, img


def _up2(x: np.ndarray) -> np.ndarray:
    return x.repeat(2, axis=0).repeat(2, axis=1)


def decode(f_m: np.ndarray, f_s0: np.ndarray, f_s1: np.ndarray, prompt: PromptEmbedding, w: Weights, cfg: DecoderConfig) -> MaskPrediction:
    """Masks, quality scores, presence score and ``A_t`` for one frame.

    ``f_m`` is ``(N, d)`` or ``(h2, w2, d)``; ``f_s1`` and ``f_s0`` are the
    stage-1 and stage-0 feature maps.
    """
    gh, gw = cfg.grid
    img = np.asarray(f_m, dtype=np.float32).reshape(-1, cfg.d)
    if img.shape[0] != gh * gw:
        raise DimensionError(f"image tokens {img.shape[0]} do not match grid {cfg.grid}")
    if f_s1.shape != (2 * gh, 2 * gw, cfg.c1) or f_s0.shape != (4 * gh, 4 * gw, cfg.c0):
        raise DimensionError(f"pyramid levels {f_s0.shape}, {f_s1.shape} do not match grid {cfg.grid}")
    with charge_to("decoder"):
        img = img + prompt.dense
        t = prompt.tokens
        for b in range(cfg.blocks):
            t, img = two_way_block(t, img, w, f"dec.tw{b}", cfg.heads)
        upd, probs = cross_attend(_ln(t, w, "dec.final.ln_t"), _ln(img, w, "dec.final.ln_i"), w, "dec.final", cfg.heads)
        t = t + upd

        grid = img.reshape(gh, gw, cfg.d)
        u1 = gelu(linear(_up2(grid), w["dec.up1.w"], w["dec.up1.b"]) + linear(f_s1, w["dec.skip1.w"], w["dec.skip1.b"]))
        u2 = gelu(linear(_up2(u1), w["dec.up2.w"], w["dec.up2.b"]) + linear(f_s0, w["dec.skip0.w"], w["dec.skip0.b"]))
        filters = []
        for j in range(N_MASKS):
            p = f"dec.hyper{j}"
            h = gelu(linear(t[1 + j], w[f"{p}.fc1.w"], w[f"{p}.fc1.b"]))
            filters.append(linear(h, w[f"{p}.fc2.w"], w[f"{p}.fc2.b"]))
        logits = linear(u2, np.stack(filters)).transpose(2, 0, 1)
        s_iou = sigmoid(linear(t[IOU_TOKEN], w["dec.iou.w"], w["dec.iou.b"]))
        s_obj = float(linear(t[OBJ_TOKEN], w["dec.obj.w"], w["dec.obj.b"])[0])

    attn = probs.astype(np.float64).mean(axis=(0, 1)).reshape(gh, gw)
    return MaskPrediction(logits > 0, logits, s_iou, s_obj, attn, t)
