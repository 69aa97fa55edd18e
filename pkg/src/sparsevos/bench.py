"""Benchmark harness: accuracy, analytic MAC speedups and parameter sweeps.

Speedups are ratios of ledger MACs between the dense configuration and an
accelerated one over the same corpus. Wall-clock times are recorded for
inspection only; the first two frames of each stream are warm-up and
excluded from them.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .config import PipelineConfig
from .corpus import Scene, iou
from .encoder import EncoderConfig
from .layers import block_macs
from .ledger import MODULE_KEYS, CostLedger, metering
from .memory import MemoryBank, MemoryConfig, MemoryFrame, memory_attention_dense, memory_attention_shapes
from .numerics import Rng
from .pipeline import StreamState, run_stream, upsample_mask
from .smr import SaliencyPatternQueue, keep_count, memory_attention_sparse, patterns_for_latest, temporal_consistency

MODES = {
    "dense": (False, False),
    "swr": (True, False),
    "smr": (False, True),
    "both": (True, True),
}

FRAME_COLUMNS = (
    "config", "scene", "t", "iou_gt", "iou_dense", "window_sparsity", "n_windows", "n_object_windows",
    "mem_tokens", "mem_tokens_dense", *(f"macs_{k}" for k in MODULE_KEYS), "macs_total", "wall_ms",
)
SUMMARY_COLUMNS = (
    "config", "frames", "mean_iou_gt", "mean_iou_dense", "mean_window_sparsity", "pooled_window_sparsity", "mean_memory_savings",
    "speedup_encoder_stage2", "speedup_memory_cross_attention", "speedup_memory_attention", "speedup_total",
    "wall_ms_encoder_stage2", "wall_ms_memory_attention", "wall_ms_total",
)
SPEEDUP_GROUPS = ("encoder_stage2", "memory_cross_attention", "memory_attention")
WARMUP_FRAMES = 2


@dataclass
class BenchReport:
    config: str
    rows: list[dict] = field(default_factory=list)
    ledger: CostLedger = field(default_factory=CostLedger)
    wall: dict[str, float] = field(default_factory=dict)
    summary: dict = field(default_factory=dict)
    masks: dict[str, list[np.ndarray]] = field(default_factory=dict)  # predicted masks per scene, image resolution


def mode_config(cfg: PipelineConfig, mode: str) -> PipelineConfig:
    swr, smr = MODES[mode]
    return cfg.with_modes(swr, smr)


def _frame_rows(name: str, scene: Scene, state: StreamState, dense_masks: Sequence[np.ndarray] | None) -> list[dict]:
    rows = []
    shape = scene.frames[0].shape[:2]
    for tr in state.trace:
        m = upsample_mask(tr.pred.mask, shape)
        row = {
            "config": name,
            "scene": scene.name,
            "t": tr.t,
            "iou_gt": iou(m, scene.masks[tr.t]),
            "iou_dense": iou(m, dense_masks[tr.t]) if dense_masks is not None else 1.0,
            "window_sparsity": tr.routing.window_sparsity,
            "n_windows": tr.routing.n_windows,
            "n_object_windows": len(tr.routing.w_obj),
            "mem_tokens": tr.mem_tokens_used,
            "mem_tokens_dense": tr.mem_tokens_dense,
        }
        for k in MODULE_KEYS:
            row[f"macs_{k}"] = tr.ledger[k]
        row["macs_total"] = tr.ledger.total()
        row["wall_ms"] = 1e3 * sum(tr.wall.values())
        rows.append(row)
    return rows


def run_benchmark(
    scenes: Sequence[Scene],
    w: Mapping[str, np.ndarray],
    cfg: PipelineConfig,
    modes: Iterable[str] = ("dense", "swr", "smr", "both"),
) -> dict[str, BenchReport]:
    """Run each mode over every scene. The dense mode always runs first
    since the others are scored against its masks."""
    modes = list(modes)
    order = ["dense"] + [m for m in modes if m != "dense"]
    reports: dict[str, BenchReport] = {}
    dense_masks: dict[str, list[np.ndarray]] = {}
    for mode in order:
        rep = BenchReport(mode)
        c = mode_config(cfg, mode)
        for sc in scenes:
            state = run_stream(sc.frames, sc.masks[0], c, w)
            rep.masks[sc.name] = [upsample_mask(tr.pred.mask, sc.frames[0].shape[:2]) for tr in state.trace]
            if mode == "dense":
                dense_masks[sc.name] = rep.masks[sc.name]
            rep.rows.extend(_frame_rows(mode, sc, state, dense_masks[sc.name]))
            rep.ledger.merge(state.ledger)
            for tr in state.trace[WARMUP_FRAMES:]:
                for k, v in tr.wall.items():
                    rep.wall[k] = rep.wall.get(k, 0.0) + v
        reports[mode] = rep
    for mode in order:
        reports[mode].summary = summarize(reports[mode], reports["dense"])
    return {m: reports[m] for m in order if m in modes or m == "dense"}


def speedup(dense: CostLedger, accel: CostLedger, group: str | None = None) -> float:
    a = accel.total() if group is None else accel.group(group)
    d = dense.total() if group is None else dense.group(group)
    if a == 0:
        return 1.0 if d == 0 else float("inf")
    return d / a


def summarize(rep: BenchReport, dense: BenchReport) -> dict:
    rows = rep.rows
    later = [r for r in rows if r["t"] > 0]
    savings = [1 - r["mem_tokens"] / r["mem_tokens_dense"] for r in later if r["mem_tokens_dense"]]
    frames = max(1, sum(1 for r in rows if r["t"] >= WARMUP_FRAMES))
    out = {
        "config": rep.config,
        "frames": len(rows),
        "mean_iou_gt": float(np.mean([r["iou_gt"] for r in rows])),
        "mean_iou_dense": float(np.mean([r["iou_dense"] for r in rows])),
        "mean_window_sparsity": float(np.mean([r["window_sparsity"] for r in later])) if later else 0.0,
        "pooled_window_sparsity": pooled_sparsity(rows),
        "mean_memory_savings": float(np.mean(savings)) if savings else 0.0,
    }
    for g in SPEEDUP_GROUPS:
        out[f"speedup_{g}"] = speedup(dense.ledger, rep.ledger, g)
    out["speedup_total"] = speedup(dense.ledger, rep.ledger)
    out["wall_ms_encoder_stage2"] = 1e3 * rep.wall.get("encoder_stage2", 0.0) / frames
    out["wall_ms_memory_attention"] = 1e3 * rep.wall.get("memory_attention", 0.0) / frames
    out["wall_ms_total"] = 1e3 * sum(rep.wall.values()) / frames
    return out


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def write_csv(path: str | Path, rows: Iterable[Mapping], columns: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(columns)
        for r in rows:
            wr.writerow([_fmt(r[c]) for c in columns])


def read_csv(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_report(out_dir: str | Path, reports: Mapping[str, BenchReport]) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"report": out / "report.csv", "summary": out / "summary.csv"}
    write_csv(paths["report"], (r for rep in reports.values() for r in rep.rows), FRAME_COLUMNS)
    write_csv(paths["summary"], (rep.summary for rep in reports.values()), SUMMARY_COLUMNS)
    return paths


# -- closed forms ------------------------------------------------------------------


def shortcut_macs(tokens: int, d: int) -> int:
    return tokens * d * (d // 2) * 2


def pooled_sparsity(rows: Sequence[Mapping]) -> float:
    """Routed windows over all windows of every frame, frame 0 included."""
    n = sum(r["n_windows"] for r in rows)
    return 1.0 - sum(r["n_object_windows"] for r in rows) / n if n else 0.0


def predicted_stage2_speedup(enc: EncoderConfig, sparsity: float) -> float:
    """Stage-2 MAC speedup when a fraction ``sparsity`` of windows is routed.
    Cost is linear in the routed count, so pooled sparsity predicts the
    aggregate speedup of a whole run."""
    lay = enc.layout(2)
    n = lay.h * lay.w
    full, short = block_macs(n, n, enc.d), shortcut_macs(n, enc.d)
    return full / ((1 - sparsity) * full + sparsity * short)


def stage2_macs(enc: EncoderConfig, n_object_windows: int) -> int:
    """Routable stage-2 MACs for one frame: object windows pay the full
    block, every other window pays the shortcut."""
    lay = enc.layout(2)
    n = lay.h * lay.w
    routable = len(enc.routable_blocks())
    per_block = n_object_windows * block_macs(n, n, enc.d) + (lay.n_windows - n_object_windows) * shortcut_macs(n, enc.d)
    return routable * per_block


def analytic_memory_savings(s: float, K: int, m: int) -> float:
    """Fraction of memory tokens skipped at steady state (prompt, latest and
    ``m - 1`` sparse frames)."""
    k = keep_count(s, K)
    return (m - 1) * (K - k) / ((m + 1) * K)


def cross_attention_macs(N: int, K: int, d: int, m: int, k: int | None = None) -> int:
    """Score MACs of one cross-attention layer over a full bank; with ``k``
    the ``m - 1`` older frames keep ``k`` tokens each."""
    if k is None:
        return (m + 1) * N * K * d
    return 2 * N * K * d + (m - 1) * N * k * d


@dataclass
class ProbeStep:
    t: int
    dense: CostLedger
    sparse: CostLedger
    tokens_dense: int
    tokens_sparse: int
    queue_len: int
    bank_len: int


def memory_cost_probe(N: int, K: int, d: int, m: int, s: float, layers: int = 1, steps: int = 12, heads: int = 1, seed: int = 0) -> list[ProbeStep]:
    """Drive a memory bank and pattern queue with random tokens and meter
    dense and sparse memory attention on the same state at every step."""
    rng = Rng(seed)
    cfg = MemoryConfig(m=m, dt=1, layers=layers, heads=heads)
    w = {n: rng.normal(shape, 0.5) for n, shape in sorted(memory_attention_shapes(d, layers).items())}
    for n in w:
        if n.endswith(".g"):
            w[n] = np.ones_like(w[n])
    bank = MemoryBank(m, 1)
    queue = SaliencyPatternQueue(layers)
    bank.push(MemoryFrame(0, rng.normal((K, d)), is_prompt=True), 0)
    out = []
    for t in range(1, steps + 1):
        f_t = rng.normal((N, d))
        dl, sl = CostLedger(), CostLedger()
        with metering(dl):
            memory_attention_dense(f_t, bank, w, cfg)
        with metering(sl):
            _, records = memory_attention_sparse(f_t, bank, queue, w, cfg)
        out.append(ProbeStep(t, dl, sl, sum(f.K for f in bank.frames()), len(records[0].frame), len(queue), len(bank)))
        patterns = patterns_for_latest(records, bank, s)
        evicted = bank.push(MemoryFrame(t, rng.normal((K, d))), t)
        queue.advance(patterns, evicted)
        queue.check_alignment(bank)
    return out


# -- sweeps ------------------------------------------------------------------------

TAU_COLUMNS = ("tau", "mean_window_sparsity", "mean_salient_windows", "mean_iou_dense", "speedup_encoder_stage2")
S_COLUMNS = ("s", "k", "mean_memory_savings", "steady_memory_savings", "analytic_floor", "analytic_5s_over_7", "mean_iou_dense", "speedup_memory_cross_attention")


def tau_sweep(scenes: Sequence[Scene], w, cfg: PipelineConfig, taus: Sequence[float] = (0.3, 0.5, 0.7, 0.9), theta_obj: float | None = 1e9) -> list[dict]:
    """SWR-only runs over ``taus``. By default ``theta_obj`` is raised so the
    saliency branch is consulted on every frame."""
    base = cfg if theta_obj is None else replace(cfg, router=replace(cfg.router, theta_obj=theta_obj))
    rows = []
    dense = run_benchmark(scenes, w, base, ["dense"])["dense"]
    for tau in taus:
        c = replace(base, router=replace(base.router, tau=tau))
        rep = run_benchmark(scenes, w, c, ["swr"])["swr"]
        later = [r for r in rep.rows if r["t"] > 0]
        sal = []
        for sc in scenes:
            st = run_stream(sc.frames, sc.masks[0], mode_config(c, "swr"), w)
            sal.extend(len(tr.routing.w_salient) for tr in st.trace[1:])
        rows.append({
            "tau": tau,
            "mean_window_sparsity": float(np.mean([r["window_sparsity"] for r in later])),
            "mean_salient_windows": float(np.mean(sal)),
            "mean_iou_dense": rep.summary["mean_iou_dense"],
            "speedup_encoder_stage2": speedup(dense.ledger, rep.ledger, "encoder_stage2"),
        })
    return rows


def s_sweep(scenes: Sequence[Scene], w, cfg: PipelineConfig, ss: Sequence[float] = (0.0, 0.5, 0.95)) -> list[dict]:
    rows = []
    K = cfg.model.memory_grid[0] * cfg.model.memory_grid[1]
    m = cfg.m
    dense = run_benchmark(scenes, w, cfg, ["dense"])["dense"]
    for s in ss:
        c = replace(cfg, smr=replace(cfg.smr, s=s))
        rep = run_benchmark(scenes, w, c, ["smr"])["smr"]
        later = [r for r in rep.rows if r["t"] > 0]
        steady = [1 - r["mem_tokens"] / r["mem_tokens_dense"] for r in later if r["mem_tokens_dense"] == (m + 1) * K]
        rows.append({
            "s": s,
            "k": keep_count(s, K),
            "mean_memory_savings": rep.summary["mean_memory_savings"],
            "steady_memory_savings": float(np.mean(steady)) if steady else 0.0,
            "analytic_floor": analytic_memory_savings(s, K, m),
            "analytic_5s_over_7": 5 * s / 7,
            "mean_iou_dense": rep.summary["mean_iou_dense"],
            "speedup_memory_cross_attention": speedup(dense.ledger, rep.ledger, "memory_cross_attention"),
        })
    return rows


# -- diagnostics -------------------------------------------------------------------

CONSISTENCY_COLUMNS = ("frame", "layer", "first_step", "second_step", "cosine")


def consistency_rows(state: StreamState) -> list[dict]:
    """Cosine between each memory frame's attention block at its first and
    second recollection, per layer. Needs a kept trace of a stream run with
    dense memory attention, where every block keeps its full extent."""
    if state.cfg.smr_enabled:
        raise ValueError("temporal consistency needs a stream run with dense memory attention")
    by_t = {tr.t: tr for tr in state.trace}
    rows = []
    for tr in state.trace:
        j = tr.t
        if j == 0:
            continue
        seen = [u.t for u in state.trace if u.t > j and j in u.bank_frames]
        if len(seen) < 2:
            continue
        a, b = by_t[seen[0]], by_t[seen[1]]
        for layer in range(len(a.records)):
            rows.append({
                "frame": j,
                "layer": layer,
                "first_step": a.t,
                "second_step": b.t,
                "cosine": temporal_consistency(a.records, b.records, j, layer),
            })
    return rows
