"""Multiply-accumulate accounting.

A :class:`CostLedger` is attached to the current execution context with
:func:`metering`; :func:`record` adds MACs to whichever ledger and module key
are active. Nothing is counted when no ledger is attached.
"""

from __future__ import annotations

import contextvars
from collections import Counter
from contextlib import contextmanager
from typing import Iterator

# Modules reported by the benchmark. Finer keys roll up into these groups.
MODULE_KEYS = (
    "encoder_stage2_attention",
    "encoder_shortcut",
    "encoder_other",
    "memory_self_attention",
    "memory_cross_attention",
    "memory_cross_attention_values",
    "memory_cross_projection",
    "memory_ffn",
    "decoder",
    "other",
)

GROUPS = {
    "encoder": ("encoder_stage2_attention", "encoder_shortcut", "encoder_other"),
    "encoder_stage2": ("encoder_stage2_attention", "encoder_shortcut"),
    "memory_attention": (
        "memory_self_attention",
        "memory_cross_attention",
        "memory_cross_attention_values",
        "memory_cross_projection",
        "memory_ffn",
    ),
    "memory_cross_attention": ("memory_cross_attention",),
    "decoder": ("decoder",),
    "other": ("other",),
}


class CostLedger:
    """MAC counters keyed by module name. Counters only ever grow."""

    def __init__(self) -> None:
        self._counts: Counter[str] = Counter()

    def add(self, module: str, macs: int) -> None:
        if macs < 0:
            raise ValueError("MAC counts are nonnegative")
        self._counts[module] += int(macs)

    def __getitem__(self, module: str) -> int:
        return self._counts.get(module, 0)

    def total(self) -> int:
        return sum(self._counts.values())

    def group(self, name: str) -> int:
        return sum(self[k] for k in GROUPS[name])

    def as_dict(self) -> dict[str, int]:
        return {k: self[k] for k in sorted(set(MODULE_KEYS) | set(self._counts))}

    def merge(self, other: "CostLedger") -> None:
        for k, v in other._counts.items():
            self._counts[k] += v

    def copy(self) -> "CostLedger":
        out = CostLedger()
        out._counts = Counter(self._counts)
        return out

    def __repr__(self) -> str:
        items = ", ".join(f"{k}={v}" for k, v in sorted(self._counts.items()) if v)
        return f"CostLedger({items})"


_active: contextvars.ContextVar[tuple[CostLedger, str] | None] = contextvars.ContextVar(
    "sparsevos_ledger", default=None
)


@contextmanager
def metering(ledger: CostLedger | None, module: str = "other") -> Iterator[CostLedger | None]:
    """Attach ``ledger`` to the current context, charging MACs to ``module``."""
    if ledger is None:
        token = _active.set(None)
    else:
        token = _active.set((ledger, module))
    try:
        yield ledger
    finally:
        _active.reset(token)


@contextmanager
def charge_to(module: str) -> Iterator[None]:
    """Switch the module key of the already-attached ledger, if any."""
    cur = _active.get()
    if cur is None:
        yield
        return
    token = _active.set((cur[0], module))
    try:
        yield
    finally:
        _active.reset(token)


def record(macs: int, module: str | None = None) -> None:
    cur = _active.get()
    if cur is None:
        return
    ledger, default = cur
    ledger.add(module or default, macs)


def active_ledger() -> CostLedger | None:
    cur = _active.get()
    return None if cur is None else cur[0]
