"""Acceptance suite. Each criterion prints one PASS/FAIL line; the collected
verdicts are repeated in the terminal summary (see conftest.py)."""

import math
import time
from dataclasses import replace

import numpy as np
import pytest

from sparsevos.bench import memory_cost_probe, read_csv, run_benchmark
from sparsevos.bench import consistency_rows
from sparsevos.cli import main
from sparsevos.corpus import make_corpus, write_corpus, corpus_specs
from sparsevos.distill import (
    Student,
    TrainConfig,
    collect_samples,
    finite_difference_check,
    shortcut_as_float64,
    to_float64,
    train_shortcut,
)
from sparsevos.encoder import encode, shortcut_prefix
from sparsevos.layers import full_block_param_count
from sparsevos.numerics import topk_indices
from sparsevos.pipeline import init_stream, run_stream, step
from sparsevos.smr import attend_gathered, attend_masked
from sparsevos.swr import RoutingDecision, ShortcutWeights, cumulative_selection, param_count
from sparsevos.weights import save_weights, shortcuts_from

VERDICTS: list[str] = []


def verdict(capsys, name: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} {name}: {detail}"
    VERDICTS.append(line)
    with capsys.disabled():
        print(f"\n{line}")
    assert ok, line


# -- C1 ----------------------------------------------------------------------------------


def test_c01_smr_zero_sparsity_is_dense(cfg, weights, capsys):
    t0 = time.perf_counter()
    sc = make_corpus(1, seed=21, n_frames=20)[0]
    c0 = replace(cfg, smr=replace(cfg.smr, s=0.0)).with_modes(False, True)
    dense = run_stream(sc.frames, sc.masks[0], cfg.dense(), weights)
    sparse = run_stream(sc.frames, sc.masks[0], c0, weights)
    worst = 0.0
    mask_mismatch = 0
    for a, b in zip(dense.trace, sparse.trace):
        worst = max(worst, float(np.abs(a.f_m - b.f_m).max() / np.abs(a.f_m).max()))
        mask_mismatch += int(not np.array_equal(a.pred.masks, b.pred.masks))
    elapsed = time.perf_counter() - t0
    ok = len(dense.trace) == 20 and worst <= 1e-6 and mask_mismatch == 0
    verdict(capsys, "C1 s=0 sparse pipeline matches dense", ok, f"max rel F_M diff {worst:.2e} (<= 1e-6), mask mismatches {mask_mismatch}, {elapsed:.1f}s")


# -- C2 ----------------------------------------------------------------------------------


def test_c02_all_object_routing_is_bit_identical(cfg, weights, capsys):
    sc = make_corpus(1, seed=22, n_frames=20)[0]
    enc = cfg.model.encoder
    n = enc.layout(2).n_windows
    shortcuts = shortcuts_from(weights, cfg.model)
    differing = 0
    for t, img in enumerate(sc.frames):
        plan = RoutingDecision.dense(max(t, 1), n)
        differing += int(not np.array_equal(encode(img, enc, weights).s2, encode(img, enc, weights, plan, shortcuts).s2))
    dense = run_stream(sc.frames, sc.masks[0], cfg.dense(), weights)
    swr = init_stream(sc.frames[0], sc.masks[0], cfg.with_modes(True, False), weights)
    for t in range(1, len(sc.frames)):
        step(swr, sc.frames[t], RoutingDecision.dense(t, n))
    differing += sum(int(not np.array_equal(a.f_m, b.f_m)) for a, b in zip(dense.trace, swr.trace))
    verdict(capsys, "C2 all-object routing is bit-identical", differing == 0, f"{differing} differing frames over 20 encoder outputs and 20 pipeline steps")


# -- C3 ----------------------------------------------------------------------------------


def test_c03_cross_attention_ledger(capsys):
    last = memory_cost_probe(N=16, K=100, d=4, m=6, s=0.95, layers=1, steps=10)[-1]
    dense = last.dense["memory_cross_attention"]
    sparse = last.sparse["memory_cross_attention"]
    ok = dense == 44800 and sparse == 14400
    verdict(capsys, "C3 cross-attention MAC ledger", ok, f"dense {dense} (44800), sparse {sparse} (14400), ratio {dense / sparse:.3f}")


# -- C4 ----------------------------------------------------------------------------------


def test_c04_overall_memory_sparsity(capsys):
    s = 0.95
    last = memory_cost_probe(N=16, K=100, d=4, m=6, s=s, steps=10)[-1]
    excluded = 1 - last.tokens_sparse / last.tokens_dense
    target = 5 * s / 7
    rel = abs(excluded - target) / target
    desk = memory_cost_probe(N=16, K=64, d=4, m=6, s=s, steps=10)[-1]
    desk_excluded = 1 - desk.tokens_sparse / desk.tokens_dense
    verdict(
        capsys,
        "C4 overall memory sparsity is 5s/7",
        rel <= 0.01,
        f"excluded {excluded:.6f} vs 5s/7 {target:.6f} (rel {rel:.2e}); desk K=64 gives {desk_excluded:.6f}",
    )


# -- C5 ----------------------------------------------------------------------------------


def test_c05_parameter_counts(capsys):
    bad = []
    for d in (8, 16, 32):
        if not (param_count(d) == ShortcutWeights.identity(d).param_count() == d * d + 2 * d):
            bad.append(f"shortcut d={d}")
        if full_block_param_count(d) != 12 * d * d + 13 * d:
            bad.append(f"block d={d}")
    counts = ", ".join(f"d={d}: {param_count(d)}/{full_block_param_count(d)}" for d in (8, 16, 32))
    verdict(capsys, "C5 shortcut d^2+2d and block 12d^2+13d", not bad, f"shortcut/block {counts}" + (f"; wrong {bad}" if bad else ""))


# -- C6 ----------------------------------------------------------------------------------


def test_c06_gather_equals_mask(capsys):
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(100):
        K = int(rng.integers(1, 65))
        k = int(rng.integers(1, K + 1))
        heads = int(rng.integers(1, 5))
        d = 4 * heads
        q, kk, v = rng.normal(size=(8, d)), rng.normal(size=(K, d)), rng.normal(size=(K, d))
        keep = np.zeros(K, dtype=bool)
        keep[rng.choice(K, k, replace=False)] = True
        worst = max(worst, float(np.abs(attend_gathered(q, kk, v, keep, heads) - attend_masked(q, kk, v, keep, heads)).max()))
    verdict(capsys, "C6 gather equals additive mask", worst <= 1e-6, f"max abs diff {worst:.2e} over 100 cases (<= 1e-6)")


# -- C7 ----------------------------------------------------------------------------------


def _topk_oracle(v, k):
    best = sorted(range(len(v)), key=lambda i: (-v[i], i))[:k]
    return sorted(best)


def _cumulative_oracle(alpha, tau):
    # enumerate every prefix of the descending order and keep its last member
    # whenever the prefix mass is within tau
    order = sorted(range(len(alpha)), key=lambda i: (-alpha[i], i))
    return {order[k - 1] for k in range(1, len(order) + 1) if math.fsum(alpha[j] for j in order[:k]) <= tau}


def test_c07_selection_oracles(capsys):
    rng = np.random.default_rng(7)
    topk_bad = 0
    for _ in range(1000):
        n = int(rng.integers(1, 65))
        v = rng.integers(0, 8, size=n).astype(float) if rng.uniform() < 0.5 else rng.normal(size=n)
        k = int(rng.integers(0, n + 1))
        topk_bad += int(topk_indices(v, k) != _topk_oracle(list(v), k))
    cum_bad = 0
    for _ in range(1000):
        n = int(rng.integers(1, 17))
        raw = rng.uniform(size=n)
        alpha = list(raw / raw.sum())
        order = sorted(range(n), key=lambda i: (-alpha[i], i))
        prefixes = [math.fsum(alpha[j] for j in order[:k]) for k in range(1, n + 1)]
        tau = float(rng.uniform(0.05, 1.0))
        while min(abs(p - tau) for p in prefixes) < 1e-9:  # a tie with a prefix sum is decided by rounding alone
            tau = float(rng.uniform(0.05, 1.0))
        cum_bad += int(set(cumulative_selection(alpha, tau)) != _cumulative_oracle(alpha, tau))
    ok = topk_bad == 0 and cum_bad == 0
    verdict(capsys, "C7 TopK and cumulative selection oracles", ok, f"mismatches topk {topk_bad}/1000, cumulative {cum_bad}/1000")


# -- C8 ----------------------------------------------------------------------------------


def test_c08_fifo_invariants(cfg, weights, capsys):
    sc = make_corpus(1, seed=3, n_frames=100)[0]
    st = run_stream(sc.frames, sc.masks[0], cfg, weights)
    violations = 0
    for tr in st.trace[1:]:
        violations += int(len(tr.bank_frames) > 1 + cfg.m)
        violations += int(len(tr.queue_frames) > cfg.m - 1)
        violations += int(tr.queue_frames != tr.bank_frames[1:-1])
    try:
        st.queue.check_alignment(st.bank)
    except ValueError:
        violations += 1
    verdict(capsys, "C8 bank and queue FIFO invariants", violations == 0, f"{violations} violations over {len(st.trace)} frames")


# -- C9 and C10 share one distillation run -----------------------------------------------


@pytest.fixture(scope="module")
def distilled(cfg, weights):
    train = make_corpus(30, seed=11, n_frames=20)
    held = make_corpus(5, seed=99, n_frames=20)
    t0 = time.perf_counter()
    sc, record = train_shortcut(train, held, weights, cfg, TrainConfig())
    elapsed = time.perf_counter() - t0
    block = cfg.model.encoder.routable_blocks()[0]
    w = dict(weights)
    w.update(sc.to_dict(shortcut_prefix(block)))
    return sc, record, w, elapsed


def test_c09_shortcut_training(cfg, weights, distilled, capsys):
    sc, record, _, elapsed = distilled
    (samples,) = collect_samples(make_corpus(1, seed=99, n_frames=7), cfg, weights, sample_stride=3, memory_stride=1)
    student = Student(weights, cfg.model.encoder, cfg.model.memory, dtype=np.float64)
    errors, skipped = finite_difference_check(student, to_float64(samples[0]), shortcut_as_float64(sc), h=1e-5, per_tensor=16)
    fd = max(errors.values())
    ok = record.reduction >= 0.5 and fd < 1e-4
    verdict(
        capsys,
        "C9 shortcut distillation",
        ok,
        f"held-out loss {record.initial_loss:.4g} -> {record.final_loss:.4g} ({100 * record.reduction:.1f}% >= 50%), "
        f"{len(record.steps)} updates, FD rel err {fd:.1e} (< 1e-4, {skipped} kink coords skipped), {elapsed:.0f}s",
    )


def test_c10_accuracy_retention(cfg, distilled, capsys):
    _, _, w, _ = distilled
    scenes = make_corpus(10, seed=123, n_frames=20)
    reports = run_benchmark(scenes, w, cfg, ["dense", "both"])
    both, dense = reports["both"].summary, reports["dense"].summary
    drop = dense["mean_iou_gt"] - both["mean_iou_gt"]
    ok = both["mean_iou_dense"] >= 0.90 and drop <= 0.05
    verdict(
        capsys,
        "C10 SWR+SMR accuracy retention",
        ok,
        f"IoU vs dense {both['mean_iou_dense']:.4f} (>= 0.90), GT IoU dense {dense['mean_iou_gt']:.4f} both {both['mean_iou_gt']:.4f} "
        f"drop {drop:+.4f} (<= 0.05), total MAC speedup {both['speedup_total']:.2f}x",
    )


# -- C11 ---------------------------------------------------------------------------------


def test_c11_monotone_sweeps(tmp_path, cfg, weights, capsys):
    corpus = tmp_path / "corpus"
    write_corpus(corpus, corpus_specs(3, seed=7, n_frames=12))
    save_weights(weights, tmp_path / "w.esm")
    assert main(["bench", "--weights", str(tmp_path / "w.esm"), "--corpus", str(corpus), "--out", str(tmp_path / "out")]) == 0
    tau_rows = read_csv(tmp_path / "out" / "tau_sweep.csv")
    s_rows = read_csv(tmp_path / "out" / "s_sweep.csv")
    taus = [float(r["tau"]) for r in tau_rows]
    sparsity = [float(r["mean_window_sparsity"]) for r in tau_rows]
    ss = [float(r["s"]) for r in s_rows]
    savings = [float(r["mean_memory_savings"]) for r in s_rows]
    ok = (
        taus == [0.3, 0.5, 0.7, 0.9]
        and ss == [0.0, 0.5, 0.95]
        and all(a >= b for a, b in zip(sparsity, sparsity[1:]))
        and all(a <= b for a, b in zip(savings, savings[1:]))
    )
    verdict(
        capsys,
        "C11 tau and s sweeps are monotone",
        ok,
        "window sparsity " + " ".join(f"{v:.4f}" for v in sparsity) + "; memory savings " + " ".join(f"{v:.4f}" for v in savings),
    )


# -- C12 ---------------------------------------------------------------------------------


def test_c12_temporal_consistency(cfg, weights, capsys):
    sc = make_corpus(1, seed=12, n_frames=12, static=True)[0]
    st = run_stream(sc.frames, sc.masks[0], cfg.dense(), weights)
    rows = consistency_rows(st)
    cos = np.array([r["cosine"] for r in rows])
    ok = len(rows) > 0 and cos.min() >= 0.8
    verdict(capsys, "C12 static-scene temporal consistency", ok, f"cosine min {cos.min():.6f} mean {cos.mean():.6f} over {len(rows)} (frame, layer) pairs (>= 0.8)")
