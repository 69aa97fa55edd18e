"""Model configuration, weight initialisation and weight files.

Random initialisation alone yields a network whose masks carry no relation
to the scene, which makes accuracy comparisons between the dense and the
accelerated pipelines meaningless. :func:`init_weights` therefore plants a
small appearance tracker on top of low-variance random weights:

* six residual channels are reserved: centred RGB (0-2), a pair of
  opposite constant anchors (3, 4) that pin every LayerNorm to a nearly
  constant scale, and an objectness channel (5);
* the memory encoder writes the mask-weighted object colour and the mask
  fraction of each memory cell;
* the first memory layer lets each image token match its colour against
  the memory colours and read back the matched mask fraction as objectness;
* the decoder's final token-to-image attention pools the colour of the
  high-objectness tokens, and each mask hypernetwork turns that colour into
  a per-pixel colour-match filter plus an objectness prior.

All other weights are random with standard deviation ``std``. Apart from
the routable final-stage blocks they never write into the reserved
channels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .decoder import N_MASKS, DecoderConfig, decoder_shapes
from .encoder import EncoderConfig, encoder_shapes, shortcut_prefix
from .memory import MemoryConfig, memory_attention_shapes, memory_encoder_shapes
from .numerics import FormatError, Rng, load_tensors, save_tensors
from .swr import ShortcutWeights

COLOR = (0, 1, 2)
ANCHOR_POS, ANCHOR_NEG, OBJ = 3, 4, 5
RESERVED = 6
GATE = OBJ  # at stage 0 the objectness slot carries the memory-encoder mask gate

ANCHOR = 4.0  # anchor magnitude; LayerNorm output scale ~ sqrt(d/2)/ANCHOR
OFFSET = 4.0  # shift keeping GELU inputs in its near-linear regime
GATE_GAIN = 12.0
MEM_MATCH_GAIN = 200.0
DEC_FOCUS_GAIN = 8.0
MASK_GAIN = 20.0
PRIOR_GAIN = 2.0
MASK_THRESHOLDS = (0.25, 0.15, 0.1)
IOU_BIAS = (0.0, 1.0, 0.5)
OBJ_GAIN = 20.0


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    memory: MemoryConfig = field(default_factory=MemoryConfig)
    decoder_blocks: int = 2

    @property
    def d(self) -> int:
        return self.encoder.d

    @property
    def decoder(self) -> DecoderConfig:
        c0, c1, c2 = self.encoder.channels
        return DecoderConfig(d=c2, c0=c0, c1=c1, heads=self.encoder.heads, blocks=self.decoder_blocks, grid=self.encoder.extents(2))

    @property
    def memory_grid(self) -> tuple[int, int]:
        h, w = self.encoder.extents(2)
        return h // self.memory.pool, w // self.memory.pool


def model_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes = encoder_shapes(cfg.encoder)
    shapes.update(memory_encoder_shapes(cfg.encoder.channels[0], cfg.d))
    shapes.update(memory_attention_shapes(cfg.d, cfg.memory.layers))
    shapes.update(decoder_shapes(cfg.decoder))
    return shapes


def shortcut_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d = cfg.d
    out: dict[str, tuple[int, ...]] = {}
    for i in cfg.encoder.routable_blocks():
        out.update({k: v.shape for k, v in ShortcutWeights.identity(d).to_dict(shortcut_prefix(i)).items()})
    return out


def all_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    return {**model_shapes(cfg), **shortcut_shapes(cfg)}


def shortcuts_from(w: Mapping[str, np.ndarray], cfg: ModelConfig) -> dict[int, ShortcutWeights]:
    return {i: ShortcutWeights.from_dict(w, shortcut_prefix(i)) for i in cfg.encoder.routable_blocks()}


def _random(shapes: Mapping[str, tuple[int, ...]], rng: Rng, std: float) -> dict[str, np.ndarray]:
    w: dict[str, np.ndarray] = {}
    for name in sorted(shapes):
        shape = shapes[name]
        if name.endswith(".g"):
            w[name] = np.ones(shape, dtype=np.float32)
        elif name.endswith(".b"):
            w[name] = np.zeros(shape, dtype=np.float32)
        else:
            w[name] = rng.fork(hash_name(name)).normal(shape, std)
    return w


def hash_name(name: str) -> int:
    """Stable 64-bit label for a weight name (FNV-1a)."""
    h = 0xCBF29CE484222325
    for byte in name.encode("utf-8"):
        h = ((h ^ byte) * 0x100000001B3) & ((1 << 64) - 1)
    return h


def _residual_writers(w: Mapping[str, np.ndarray], cfg: ModelConfig) -> list[str]:
    """Residual-writing matrices kept off the reserved channels.

    The routable final-stage blocks are left unconstrained so that routing
    them through the shortcut does perturb the tracking signal.
    """
    suffixes = (".proj.w", ".proj.b", ".fc2.w", ".fc2.b", ".out.w", ".out.b")
    routed = tuple(f"enc.stage2.block{i}." for i in cfg.encoder.routable_blocks())
    return [n for n in w if n.endswith(suffixes) and not n.startswith(("dec.hyper", *routed))]


def _plant(w: dict[str, np.ndarray], cfg: ModelConfig) -> None:
    enc = cfg.encoder
    c0, c1, d = enc.channels
    p = enc.patch
    heads = enc.heads
    dh = d // heads
    if min(c0, c1, d) < 8 or dh < 4:
        raise ValueError("the planted tracker needs >= 8 channels per stage and >= 4 per head")

    for name in _residual_writers(w, cfg):
        w[name][:RESERVED] = 0.0

    # patch embedding: centred mean colour and the two anchors
    w["enc.patch.w"][:RESERVED] = 0.0
    for c in COLOR:
        for py in range(p):
            for px in range(p):
                w["enc.patch.w"][c, (py * p + px) * 3 + c] = 1.0 / (p * p)
    w["enc.patch.b"][list(COLOR)] = -0.5
    w["enc.patch.b"][ANCHOR_POS] = ANCHOR
    w["enc.patch.b"][ANCHOR_NEG] = -ANCHOR
    w["enc.pos"][..., :RESERVED] = 0.0
    for s in (0, 1):
        dw = w[f"enc.down{s}.w"]
        dw[:RESERVED] = 0.0
        dw[:, :RESERVED] = 0.0
        dw[np.arange(RESERVED), np.arange(RESERVED)] = 1.0

    # memory encoder: gated colour and mask fraction per memory cell
    w["mem.enc.mask"][:RESERVED] = 0.0
    w["mem.enc.mask"][GATE] = GATE_GAIN
    p1, b1 = w["mem.enc.proj1.w"], w["mem.enc.proj1.b"]
    p1[:RESERVED] = 0.0
    for c in (*COLOR, ANCHOR_POS):
        p1[c, GATE] = 1.0
        b1[c] = OFFSET - GATE_GAIN
    for c in COLOR:
        p1[c, c] = 1.0
    p2 = w["mem.enc.proj2.w"]
    p2[:RESERVED] = 0.0
    for c in COLOR:
        p2[c, c] = 1.0
        p2[c, ANCHOR_POS] = -1.0
    p2[ANCHOR_POS, ANCHOR_POS] = 1.0 / OFFSET

    # first memory layer: colour match, objectness read-out (both heads alike)
    pre = "mem.layer0.cross"
    for h in range(heads):
        o = h * dh
        for c in COLOR:
            w[f"{pre}.q.w"][o + c] = 0.0
            w[f"{pre}.q.w"][o + c, c] = MEM_MATCH_GAIN
            w[f"{pre}.k.w"][o + c] = 0.0
            w[f"{pre}.k.w"][o + c, c] = 1.0
        w[f"{pre}.v.w"][o] = 0.0
        w[f"{pre}.v.w"][o, ANCHOR_POS] = 1.0
        w[f"{pre}.out.w"][OBJ, o] = 1.0 / heads

    # decoder tokens carry the anchors; prompts only touch objectness
    w["dec.tokens"][:, :RESERVED] = 0.0
    w["dec.tokens"][:, ANCHOR_POS] = ANCHOR
    w["dec.tokens"][:, ANCHOR_NEG] = -ANCHOR
    for n in ("dec.prompt.mask", "dec.prompt.bias", "dec.prompt.none"):
        w[n][:RESERVED] = 0.0
    w["dec.prompt.mask"][OBJ] = 1.0

    # final attention: focus on objectness, fetch colour and objectness
    ln_scale = ANCHOR / math.sqrt(d / 2)  # inverse LayerNorm gain on reserved channels
    for h in range(heads):
        o = h * dh
        w["dec.final.q.w"][o] = 0.0
        w["dec.final.q.w"][o, ANCHOR_POS] = DEC_FOCUS_GAIN
        w["dec.final.k.w"][o] = 0.0
        w["dec.final.k.w"][o, OBJ] = 1.0
        for j, c in enumerate((*COLOR, OBJ)):
            w["dec.final.v.w"][o + j] = 0.0
            w["dec.final.v.w"][o + j, c] = ln_scale
            w["dec.final.out.w"][c, o + j] = 1.0 / heads

    # upscaling: colour from the stage-0 skip, objectness from the tokens
    w["dec.up1.w"][:RESERVED] = 0.0
    w["dec.up1.w"][OBJ, OBJ] = 1.0
    w["dec.up1.b"][OBJ] = OFFSET
    w["dec.skip1.w"][:RESERVED] = 0.0
    w["dec.up2.w"][:RESERVED] = 0.0
    w["dec.up2.w"][OBJ, OBJ] = 1.0
    w["dec.up2.b"][ANCHOR_POS] = OFFSET
    w["dec.skip0.w"][:RESERVED] = 0.0
    for c in COLOR:
        w["dec.skip0.w"][c, c] = 1.0
        w["dec.skip0.b"][c] = OFFSET

    # hypernetworks: logit = MASK_GAIN (colour . pixel - theta_j) + PRIOR_GAIN (obj - 1/2)
    for j in range(N_MASKS):
        pre = f"dec.hyper{j}"
        f1, f1b, f2, f2b = (w[f"{pre}.{k}"] for k in ("fc1.w", "fc1.b", "fc2.w", "fc2.b"))
        f1[:RESERVED] = 0.0
        f2[:RESERVED] = 0.0
        for c in COLOR:
            f1[c, c] = 1.0
            f1b[c] = OFFSET
            f2[c, c] = MASK_GAIN
            f2b[c] = -OFFSET * MASK_GAIN
            f2[ANCHOR_POS, c] = -MASK_GAIN
        f2b[OBJ] = PRIOR_GAIN
        f2b[ANCHOR_POS] = 3 * OFFSET * MASK_GAIN - PRIOR_GAIN - (MASK_GAIN * MASK_THRESHOLDS[j] + 0.5 * PRIOR_GAIN) / OFFSET
    w["dec.iou.b"][:] = IOU_BIAS
    w["dec.obj.w"][:] = 0.0
    w["dec.obj.w"][0, OBJ] = OBJ_GAIN
    w["dec.obj.b"][0] = -0.5 * OBJ_GAIN


def init_weights(cfg: ModelConfig, seed: int = 0, std: float = 0.02, planted: bool = True) -> dict[str, np.ndarray]:
    """All model weights plus identity-initialised shortcuts."""
    rng = Rng(seed)
    w = _random(model_shapes(cfg), rng, std)
    if planted:
        _plant(w, cfg)
    sc_rng = rng.fork(0x5C)
    for i in cfg.encoder.routable_blocks():
        w.update(ShortcutWeights.identity(cfg.d, sc_rng.fork(i)).to_dict(shortcut_prefix(i)))
    return w


def save_weights(w: Mapping[str, np.ndarray], path: str | Path) -> None:
    save_tensors(path, w)


def load_weights(path: str | Path, cfg: ModelConfig | None = None) -> dict[str, np.ndarray]:
    """Read a weight file; with ``cfg`` every expected tensor must be present
    with the configured shape."""
    w = load_tensors(path)
    if cfg is not None:
        check_shapes(w, all_shapes(cfg))
    return w


def check_shapes(w: Mapping[str, np.ndarray], expected: Mapping[str, tuple[int, ...]]) -> None:
    missing = sorted(set(expected) - set(w))
    if missing:
        raise FormatError(f"weight file lacks {len(missing)} tensors, e.g. {missing[0]}")
    for name, shape in expected.items():
        if tuple(w[name].shape) != tuple(shape):
            raise FormatError(f"tensor {name} has shape {w[name].shape}, expected {shape}")
