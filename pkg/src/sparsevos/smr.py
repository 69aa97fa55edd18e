"""Object-aware sparse memory retrieval.

Each memory frame is attended densely exactly once per layer, while it is the
newest queue entry. Its head- and query-averaged attention at that moment
picks the ``max(1, floor((1 - s) K))`` tokens it keeps for the rest of its
queue lifetime. The prompt frame and the newest frame always stay dense.
"""

from __future__ import annotations

import math
import warnings
from collections import OrderedDict
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .layers import Weights, attend
from .memory import LayerRecord, MemoryBank, MemoryConfig, TokenSet, run_memory_attention
from .numerics import cosine_similarity, topk_indices


class AlignmentError(ValueError):
    pass


@dataclass(frozen=True)
class SmrConfig:
    s: float = 0.95

    def __post_init__(self) -> None:
        if not (0.0 <= self.s <= 1.0):
            raise ValueError(f"sparsity ratio must lie in [0, 1], got {self.s}")

    def keep_count(self, K: int) -> int:
        return keep_count(self.s, K)


def keep_count(s: float, K: int) -> int:
    """Retained tokens per frame: ``floor((1 - s) K)``, raised to at least 1."""
    # the 1e-9 guard keeps e.g. (1 - 0.9) * 10 from flooring to 0
    k = math.floor((1.0 - s) * K + 1e-9)
    if k < 1:
        warnings.warn(f"sparsity {s} keeps no token of {K}; keeping 1", RuntimeWarning, stacklevel=2)
        k = 1
    return min(k, K)


@dataclass(frozen=True)
class SaliencyPattern:
    frame: int
    layer: int
    indices: tuple[int, ...]


def recognize_pattern(attn_avg: Sequence[float], s: float, K: int | None = None, frame: int = -1, layer: int = 0) -> SaliencyPattern:
    v = np.asarray(attn_avg, dtype=np.float64)
    K = v.size if K is None else K
    if v.size != K:
        raise ValueError(f"attention vector has {v.size} entries, expected {K}")
    return SaliencyPattern(frame, layer, tuple(topk_indices(v, keep_count(s, K))))


class SaliencyPatternQueue:
    """Per-layer cached patterns for the bank's non-newest queue frames."""

    def __init__(self, layers: int) -> None:
        self.layers = layers
        self._patterns: OrderedDict[int, tuple[SaliencyPattern, ...]] = OrderedDict()

    def __len__(self) -> int:
        return len(self._patterns)

    def frames(self) -> list[int]:
        return list(self._patterns)

    def pattern(self, frame: int, layer: int) -> SaliencyPattern:
        try:
            return self._patterns[frame][layer]
        except KeyError:
            raise AlignmentError(f"no saliency pattern cached for memory frame {frame}") from None

    def advance(self, new_patterns: Sequence[SaliencyPattern], evicted: Iterable[int] = ()) -> None:
        """Cache the patterns of the frame leaving the newest slot, then drop
        the patterns of frames the bank evicted."""
        if new_patterns:
            frames = {p.frame for p in new_patterns}
            if len(frames) != 1 or len(new_patterns) != self.layers:
                raise AlignmentError("expected one pattern per layer for a single frame")
            f = frames.pop()
            if self._patterns and f <= next(reversed(self._patterns)):
                raise AlignmentError(f"pattern for frame {f} arrives out of order")
            self._patterns[f] = tuple(sorted(new_patterns, key=lambda p: p.layer))
        for f in evicted:
            if f not in self._patterns:
                raise AlignmentError(f"bank evicted frame {f} which has no cached pattern")
            del self._patterns[f]

    def check_alignment(self, bank: MemoryBank) -> None:
        expected = [f.t for f in bank.older_frames()]
        if self.frames() != expected:
            raise AlignmentError(f"pattern queue frames {self.frames()} != bank frames {expected}")

    def dump(self) -> list[tuple[int, int, tuple[int, ...]]]:
        return [(p.frame, p.layer, p.indices) for pats in self._patterns.values() for p in pats]


def assemble_sparse_bank(bank: MemoryBank, queue: SaliencyPatternQueue, layer: int) -> TokenSet:
    """Prompt and newest frames in full, older frames reduced to their pattern."""
    subsets = {f.t: queue.pattern(f.t, layer).indices for f in bank.older_frames()}
    return TokenSet.from_frames(bank.frames(), subsets)


def memory_attention_sparse(
    f_t: np.ndarray, bank: MemoryBank, queue: SaliencyPatternQueue, w: Weights, cfg: MemoryConfig
) -> tuple[np.ndarray, list[LayerRecord]]:
    if len(bank) == 0:
        raise ValueError("memory attention needs at least the prompt frame")
    sets = [assemble_sparse_bank(bank, queue, l) for l in range(cfg.layers)]
    return run_memory_attention(f_t, sets, w, cfg.heads)


def patterns_for_latest(records: Sequence[LayerRecord], bank: MemoryBank, s: float) -> list[SaliencyPattern]:
    """Recognise the newest queue frame's pattern in every layer."""
    latest = bank.latest
    if latest is None:
        return []
    return [recognize_pattern(rec.frame_mean(latest.t), s, latest.K, latest.t, l) for l, rec in enumerate(records)]


def temporal_consistency(first: Sequence[LayerRecord], later: Sequence[LayerRecord], frame: int, layer: int) -> float:
    """Cosine similarity of one memory frame's ``N x K`` attention block as
    seen by two different query frames."""
    return cosine_similarity(first[layer].frame_block(frame), later[layer].frame_block(frame))


def attend_masked(q: np.ndarray, k: np.ndarray, v: np.ndarray, keep: np.ndarray, heads: int) -> np.ndarray:
    """Attention over all keys with dropped keys masked to ``-inf``."""
    bias = np.where(np.asarray(keep, dtype=bool), 0.0, -np.inf).astype(q.dtype)
    return attend(q, k, v, heads, bias=bias)[0]


def attend_gathered(q: np.ndarray, k: np.ndarray, v: np.ndarray, keep: np.ndarray, heads: int) -> np.ndarray:
    """Attention over only the kept keys."""
    idx = np.flatnonzero(np.asarray(keep, dtype=bool))
    return attend(q, k[idx], v[idx], heads)[0]
