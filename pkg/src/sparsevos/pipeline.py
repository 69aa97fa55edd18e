"""Streaming video object segmentation with optional SWR and SMR.

One :class:`StreamState` per video. :func:`init_stream` consumes the
annotated first frame; every later frame goes through :func:`step`, which
routes from the previous prediction, encodes, runs memory attention, decodes
and finally updates the memory bank and the saliency pattern queue.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .config import PipelineConfig
from .decoder import MaskPrediction, decode, make_prompt, mask_to_grid
from .encoder import encode_front, encode_stage2
from .ledger import CostLedger, metering
from .memory import LayerRecord, MemoryBank, encode_memory, memory_attention_dense
from .numerics import DimensionError
from .smr import SaliencyPatternQueue, memory_attention_sparse, patterns_for_latest
from .swr import RoutingDecision, ShortcutWeights, route
from .weights import shortcuts_from


class ProtocolError(ValueError):
    pass


@dataclass
class FrameTrace:
    t: int
    routing: RoutingDecision
    ledger: CostLedger
    pred: MaskPrediction
    f_m: np.ndarray
    records: list[LayerRecord]
    bank_frames: list[int]
    queue_frames: list[int]
    mem_tokens_dense: int = 0
    mem_tokens_used: int = 0
    wall: dict[str, float] = field(default_factory=dict)  # seconds per phase, informational

    @property
    def memory_savings(self) -> float:
        if self.mem_tokens_dense == 0:
            return 0.0
        return 1.0 - self.mem_tokens_used / self.mem_tokens_dense


@dataclass
class StreamState:
    cfg: PipelineConfig
    weights: Mapping[str, np.ndarray]
    shortcuts: dict[int, ShortcutWeights]
    t: int
    bank: MemoryBank
    queue: SaliencyPatternQueue
    prev: MaskPrediction | None
    ledger: CostLedger = field(default_factory=CostLedger)
    trace: list[FrameTrace] = field(default_factory=list)
    keep_trace: bool = True

    def _log(self, tr: FrameTrace) -> None:
        self.ledger.merge(tr.ledger)
        if self.keep_trace:
            self.trace.append(tr)
        else:
            self.trace[:] = [tr]


def downsample_mask(mask: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    return mask_to_grid(mask, shape) >= 0.5


def upsample_mask(mask: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    H, W = shape
    fy, fx = H // mask.shape[0], W // mask.shape[1]
    if fy * mask.shape[0] != H or fx * mask.shape[1] != W:
        raise DimensionError(f"cannot upsample {mask.shape} to {shape}")
    return mask.repeat(fy, axis=0).repeat(fx, axis=1)


def init_stream(
    first_frame: np.ndarray,
    gt_mask: np.ndarray | None,
    cfg: PipelineConfig,
    weights: Mapping[str, np.ndarray],
    keep_trace: bool = True,
) -> StreamState:
    if gt_mask is None:
        raise ProtocolError("the first frame needs a ground-truth mask")
    enc, dcfg = cfg.model.encoder, cfg.model.decoder
    if gt_mask.shape != first_frame.shape[:2]:
        raise DimensionError(f"mask {gt_mask.shape} does not match frame {first_frame.shape[:2]}")
    state = StreamState(
        cfg, weights, shortcuts_from(weights, cfg.model), 0,
        MemoryBank(cfg.m, cfg.dt), SaliencyPatternQueue(cfg.model.memory.layers), None, keep_trace=keep_trace,
    )
    ledger = CostLedger()
    with metering(ledger, "other"):
        s0, s1, x = encode_front(first_frame, enc, weights)
        f_t = encode_stage2(x, enc, weights).reshape(-1, enc.d)
        pred = decode(f_t, s0, s1, make_prompt(weights, dcfg, gt_mask), weights, dcfg)
        prompt_mem = encode_memory(s0, downsample_mask(gt_mask, s0.shape[:2]), weights, cfg.model.memory_grid, 0, is_prompt=True)
    state.bank.push(prompt_mem, 0)
    state.prev = pred
    state._log(FrameTrace(0, RoutingDecision.dense(0, enc.layout(2).n_windows), ledger, pred, f_t, [], state.bank.indices(), []))
    return state


def step(state: StreamState, frame: np.ndarray, plan: RoutingDecision | None = None) -> tuple[MaskPrediction, StreamState]:
    """Process the next frame. ``plan`` overrides the router's decision."""
    cfg, w = state.cfg, state.weights
    enc, dcfg, mcfg = cfg.model.encoder, cfg.model.decoder, cfg.model.memory
    t = state.t + 1
    layout = enc.layout(2)
    if plan is None:
        plan = route(state.prev, layout, cfg.router, t) if cfg.swr_enabled else RoutingDecision.dense(t, layout.n_windows)
        use_plan = cfg.swr_enabled
    else:
        use_plan = True
    ledger = CostLedger()
    bank, queue = state.bank, state.queue
    with metering(ledger, "other"):
        c0 = time.perf_counter()
        s0, s1, x = encode_front(frame, enc, w)
        c1 = time.perf_counter()
        f_t = encode_stage2(x, enc, w, plan if use_plan else None, state.shortcuts).reshape(-1, enc.d)
        c2 = time.perf_counter()
        if cfg.smr_enabled:
            f_m, records = memory_attention_sparse(f_t, bank, queue, w, mcfg)
        else:
            f_m, records = memory_attention_dense(f_t, bank, w, mcfg)
        c3 = time.perf_counter()
        pred = decode(f_m, s0, s1, make_prompt(w, dcfg), w, dcfg)
        c4 = time.perf_counter()
        patterns = patterns_for_latest(records, bank, cfg.smr.s)
        mem = encode_memory(s0, pred.mask, w, cfg.model.memory_grid, t)
        c5 = time.perf_counter()
    wall = {"encoder_front": c1 - c0, "encoder_stage2": c2 - c1, "memory_attention": c3 - c2, "decoder": c4 - c3, "other": c5 - c4}
    dense_tokens = sum(f.K for f in bank.frames())
    used_tokens = len(records[0].frame)
    bank_before = bank.indices()
    queue_before = queue.frames()
    evicted = bank.push(mem, t)
    queue.advance(patterns, evicted)
    queue.check_alignment(bank)
    state.t = t
    state.prev = pred
    state._log(FrameTrace(t, plan, ledger, pred, f_m, records, bank_before, queue_before, dense_tokens, used_tokens, wall))
    return pred, state


def run_stream(
    frames, gt_first: np.ndarray, cfg: PipelineConfig, weights: Mapping[str, np.ndarray], keep_trace: bool = True
) -> StreamState:
    it = iter(frames)
    state = init_stream(next(it), gt_first, cfg, weights, keep_trace)
    for frame in it:
        step(state, frame)
    return state
