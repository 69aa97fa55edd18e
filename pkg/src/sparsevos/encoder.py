"""Hierarchical window-attention image encoder.

Three stages at strides ``patch``, ``2*patch`` and ``4*patch``. Stages are
joined by 2x2 average pooling followed by a linear width change. Every block
is window attention except the last block of the final stage, which attends
globally. Final-stage window blocks can be routed per window through the
shortcut branch of :mod:`sparsevos.swr`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .layers import Weights, block, block_macs, block_shapes, linear
from .ledger import charge_to
from .numerics import DimensionError
from .swr import RoutingDecision, RoutingError, ShortcutWeights, shortcut_forward
from .windows import WindowGrid, WindowLayout, window_partition, window_unpartition

__all__ = [
    "EncoderConfig",
    "FeaturePyramid",
    "WindowGrid",
    "WindowLayout",
    "encode",
    "encoder_shapes",
    "mhsa_block",
    "window_partition",
    "window_unpartition",
]


@dataclass(frozen=True)
class EncoderConfig:
    image_size: tuple[int, int] = (64, 64)
    patch: int = 2
    channels: tuple[int, int, int] = (16, 32, 64)
    layers: tuple[int, int, int] = (1, 1, 2)
    windows: tuple[tuple[int, int], ...] = ((4, 4), (4, 4), (2, 2))
    heads: int = 2

    def __post_init__(self) -> None:
        H, W = self.image_size
        step = self.patch * 4
        if H % step or W % step:
            raise ValueError(f"image extents must be multiples of {step}")
        for c in self.channels:
            if c % self.heads:
                raise ValueError(f"width {c} not divisible by {self.heads} heads")
        for h, w in self.windows:
            if h < 1 or w < 1:
                raise ValueError("window extents must be >= 1")
        if len(self.layers) != 3 or len(self.windows) != 3 or self.layers[2] < 1:
            raise ValueError("three stages with at least one final-stage block are required")

    def extents(self, stage: int) -> tuple[int, int]:
        H, W = self.image_size
        f = self.patch * (2**stage)
        return H // f, W // f

    def layout(self, stage: int) -> WindowLayout:
        H, W = self.extents(stage)
        h, w = self.windows[stage]
        return WindowLayout(H, W, h, w)

    @property
    def d(self) -> int:
        return self.channels[2]

    def is_global(self, stage: int, i: int) -> bool:
        return stage == 2 and i == self.layers[2] - 1

    def routable_blocks(self) -> list[int]:
        return [i for i in range(self.layers[2]) if not self.is_global(2, i)]


@dataclass
class FeaturePyramid:
    s0: np.ndarray
    s1: np.ndarray
    s2: np.ndarray
    extras: dict = field(default_factory=dict, repr=False)

    @property
    def embedding(self) -> np.ndarray:
        """Final-stage features as ``(N, d)`` tokens."""
        return self.s2.reshape(-1, self.s2.shape[-1])


def encoder_shapes(cfg: EncoderConfig) -> dict[str, tuple[int, ...]]:
    c0, c1, c2 = cfg.channels
    H0, W0 = cfg.extents(0)
    shapes: dict[str, tuple[int, ...]] = {
        "enc.patch.w": (c0, cfg.patch * cfg.patch * 3),
        "enc.patch.b": (c0,),
        "enc.pos": (H0, W0, c0),
        "enc.down0.w": (c1, c0),
        "enc.down0.b": (c1,),
        "enc.down1.w": (c2, c1),
        "enc.down1.b": (c2,),
    }
    for s, n in enumerate(cfg.layers):
        for i in range(n):
            shapes.update(block_shapes(f"enc.stage{s}.block{i}", cfg.channels[s]))
    return shapes


def shortcut_prefix(i: int) -> str:
    return f"swr.stage2.block{i}"


def mhsa_block(x, w: Weights, prefix: str, heads: int):
    """Transformer block over a :class:`WindowGrid` (per window) or tokens."""
    if isinstance(x, WindowGrid):
        n, h, ww, c = x.blocks.shape
        out = block(x.blocks.reshape(n, h * ww, c), w, prefix, heads)
        return WindowGrid(x.layout, out.reshape(n, h, ww, c))
    squeeze = x.ndim == 2
    out = block(x[None] if squeeze else x, w, prefix, heads)
    return out[0] if squeeze else out


def patchify(image: np.ndarray, patch: int) -> np.ndarray:
    H, W, C = image.shape
    x = image.reshape(H // patch, patch, W // patch, patch, C).transpose(0, 2, 1, 3, 4)
    return x.reshape(H // patch, W // patch, patch * patch * C)


def pool2(x: np.ndarray) -> np.ndarray:
    H, W, C = x.shape
    return x.reshape(H // 2, 2, W // 2, 2, C).mean(axis=(1, 3), dtype=np.float32)


def _window_block(x: np.ndarray, w: Weights, prefix: str, heads: int, h: int, ww: int) -> np.ndarray:
    H, W, _ = x.shape
    g = mhsa_block(window_partition(x, h, ww), w, prefix, heads)
    return window_unpartition(g, H, W)


def _global_block(x: np.ndarray, w: Weights, prefix: str, heads: int) -> np.ndarray:
    H, W, C = x.shape
    return block(x.reshape(1, H * W, C), w, prefix, heads).reshape(H, W, C)


def routed_block(
    x: np.ndarray,
    w: Weights,
    prefix: str,
    heads: int,
    layout: WindowLayout,
    plan: RoutingDecision | None,
    shortcut: ShortcutWeights | None,
) -> np.ndarray:
    """Final-stage window block with per-window routing.

    Object windows run the full block; the rest run the shortcut. Without a
    plan every window runs the full block.
    """
    H, W, C = x.shape
    g = window_partition(x, layout.h, layout.w)
    n = g.n_windows
    tokens = g.blocks.reshape(n, layout.h * layout.w, C)
    if plan is None:
        with charge_to("encoder_stage2_attention"):
            out = block(tokens, w, prefix, heads)
    else:
        if plan.n_windows != n:
            raise RoutingError(f"plan has {plan.n_windows} windows, stage grid has {n}")
        obj = np.asarray(plan.object_windows, dtype=np.int64)
        bg = np.asarray(plan.background_windows, dtype=np.int64)
        if bg.size and shortcut is None:
            raise RoutingError("routing plan sends windows to a shortcut that was not provided")
        out = np.empty_like(tokens)
        if obj.size:
            with charge_to("encoder_stage2_attention"):
                out[obj] = block(tokens[obj], w, prefix, heads)
        if bg.size:
            with charge_to("encoder_shortcut"):
                out[bg] = shortcut_forward(tokens[bg], shortcut)
    return window_unpartition(WindowGrid(g.layout, out.reshape(g.blocks.shape)), H, W)


def encode_front(image: np.ndarray, cfg: EncoderConfig, w: Weights) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stages 0 and 1 plus the downsampling into stage 2.

    Returns ``(F_s0, F_s1, stage-2 input)``.
    """
    H, W = cfg.image_size
    if image.shape != (H, W, 3):
        raise DimensionError(f"image {image.shape} does not match configured {(H, W, 3)}")
    feats = []
    with charge_to("encoder_other"):
        x = linear(patchify(image.astype(np.float32, copy=False), cfg.patch), w["enc.patch.w"], w["enc.patch.b"])
        x = x + w["enc.pos"]
        for s in (0, 1):
            h, ww = cfg.windows[s]
            for i in range(cfg.layers[s]):
                x = _window_block(x, w, f"enc.stage{s}.block{i}", cfg.heads, h, ww)
            feats.append(x)
            x = linear(pool2(x), w[f"enc.down{s}.w"], w[f"enc.down{s}.b"])
    return feats[0], feats[1], x


def encode_stage2(
    x: np.ndarray,
    cfg: EncoderConfig,
    w: Weights,
    plan: RoutingDecision | None = None,
    shortcuts: dict[int, ShortcutWeights] | None = None,
) -> np.ndarray:
    layout = cfg.layout(2)
    for i in range(cfg.layers[2]):
        p = f"enc.stage2.block{i}"
        if cfg.is_global(2, i):
            with charge_to("encoder_other"):
                x = _global_block(x, w, p, cfg.heads)
        else:
            sc = None if shortcuts is None else shortcuts.get(i)
            x = routed_block(x, w, p, cfg.heads, layout, plan, sc)
    return x


def encode(
    image: np.ndarray,
    cfg: EncoderConfig,
    w: Weights,
    plan: RoutingDecision | None = None,
    shortcuts: dict[int, ShortcutWeights] | None = None,
) -> FeaturePyramid:
    s0, s1, x = encode_front(image, cfg, w)
    return FeaturePyramid(s0, s1, encode_stage2(x, cfg, w, plan, shortcuts))


def dense_encoder_macs(cfg: EncoderConfig) -> int:
    """Closed-form MAC count of a dense :func:`encode` call."""
    total = 0
    c = cfg.channels
    H0, W0 = cfg.extents(0)
    total += H0 * W0 * cfg.patch * cfg.patch * 3 * c[0]
    for s in range(3):
        lay = cfg.layout(s)
        for i in range(cfg.layers[s]):
            if cfg.is_global(s, i):
                n = lay.H * lay.W
                total += block_macs(n, n, c[s])
            else:
                n = lay.Hp * lay.Wp
                total += block_macs(n, lay.h * lay.w, c[s])
        if s < 2:
            Hn, Wn = cfg.extents(s + 1)
            total += Hn * Wn * c[s] * c[s + 1]
    return total
