import xml.etree.ElementTree as ET

import numpy as np
import pytest

from sparsevos.bench import (
    FRAME_COLUMNS,
    S_COLUMNS,
    SUMMARY_COLUMNS,
    TAU_COLUMNS,
    analytic_memory_savings,
    consistency_rows,
    cross_attention_macs,
    pooled_sparsity,
    predicted_stage2_speedup,
    read_csv,
    run_benchmark,
    s_sweep,
    speedup,
    stage2_macs,
    tau_sweep,
    write_csv,
    write_report,
)
from sparsevos.encoder import EncoderConfig
from sparsevos.ledger import CostLedger
from sparsevos.pipeline import run_stream
from sparsevos.plots import accuracy_vs_speedup, s_sweep_plot, tau_sweep_plot


@pytest.fixture(scope="module")
def reports(cfg, weights, scenes):
    return run_benchmark(scenes[:2], weights, cfg)


def test_dense_speedups_are_one(reports):
    s = reports["dense"].summary
    for k in ("speedup_encoder_stage2", "speedup_memory_cross_attention", "speedup_memory_attention", "speedup_total"):
        assert s[k] == 1.0
    assert s["mean_iou_dense"] == 1.0


def test_report_shapes(reports, scenes):
    assert list(reports) == ["dense", "swr", "smr", "both"]
    for rep in reports.values():
        assert len(rep.rows) == 2 * len(scenes[0])
        assert set(FRAME_COLUMNS) <= set(rep.rows[0])
        assert set(SUMMARY_COLUMNS) <= set(rep.summary)


def test_accelerated_modes_save_macs(reports):
    assert reports["swr"].summary["speedup_encoder_stage2"] > 1.0
    assert reports["smr"].summary["speedup_memory_cross_attention"] > 1.0
    assert reports["swr"].summary["speedup_memory_cross_attention"] == 1.0
    assert reports["smr"].summary["speedup_encoder_stage2"] == 1.0


def test_frame_rows_sum_to_ledger(reports):
    for rep in reports.values():
        assert sum(r["macs_total"] for r in rep.rows) == rep.ledger.total()


def test_stage2_closed_form(reports, cfg):
    enc = cfg.model.encoder
    rep = reports["swr"]
    for r in rep.rows:
        assert r["macs_encoder_stage2_attention"] + r["macs_encoder_shortcut"] == stage2_macs(enc, r["n_object_windows"])
    sigma = pooled_sparsity(rep.rows)
    measured = rep.summary["speedup_encoder_stage2"]
    assert measured == pytest.approx(predicted_stage2_speedup(enc, sigma), rel=0.05)


@pytest.mark.parametrize("sigma", [0.0, 0.5, 0.9])
def test_predicted_speedup_by_hand(sigma):
    enc = EncoderConfig()
    n, d, W = 4, 64, 16  # 2x2 windows on the 8x8 stage-2 grid, width 64
    full = 12 * n * d * d + 2 * n * n * d
    short = 2 * n * d * (d // 2)
    expected = W * full / ((1 - sigma) * W * full + sigma * W * short)
    assert predicted_stage2_speedup(enc, sigma) == pytest.approx(expected)


def test_speedup_edge_cases():
    a, b = CostLedger(), CostLedger()
    assert speedup(a, b) == 1.0
    a.add("decoder", 10)
    b.add("decoder", 5)
    assert speedup(a, b, "decoder") == 2.0


def test_memory_closed_forms():
    assert cross_attention_macs(16, 100, 4, 6) == 44800
    assert cross_attention_macs(16, 100, 4, 6, k=5) == 14400
    assert analytic_memory_savings(0.95, 100, 6) == pytest.approx(5 * 0.95 / 7, rel=1e-12)
    assert analytic_memory_savings(0.0, 100, 6) == 0.0


def test_csv_round_trip(tmp_path, reports):
    paths = write_report(tmp_path, reports)
    rows = read_csv(paths["report"])
    assert list(rows[0]) == list(FRAME_COLUMNS)
    assert len(rows) == sum(len(r.rows) for r in reports.values())
    summary = read_csv(paths["summary"])
    assert [r["config"] for r in summary] == list(reports)
    first = (tmp_path / "report.csv").read_bytes()
    write_report(tmp_path, reports)
    assert (tmp_path / "report.csv").read_bytes() == first


def test_write_csv_rejects_missing_column(tmp_path):
    with pytest.raises(KeyError):
        write_csv(tmp_path / "x.csv", [{"a": 1}], ["a", "b"])


# -- sweeps -------------------------------------------------------------------------


@pytest.fixture(scope="module")
def sweeps(cfg, weights, scenes):
    return tau_sweep(scenes[:2], weights, cfg), s_sweep(scenes[:2], weights, cfg)


def test_tau_sweep(sweeps):
    rows, _ = sweeps
    assert [r["tau"] for r in rows] == [0.3, 0.5, 0.7, 0.9]
    assert all(set(TAU_COLUMNS) <= set(r) for r in rows)
    sp = [r["mean_window_sparsity"] for r in rows]
    assert all(a >= b for a, b in zip(sp, sp[1:]))
    sal = [r["mean_salient_windows"] for r in rows]
    assert all(a <= b for a, b in zip(sal, sal[1:]))


def test_s_sweep(sweeps, cfg):
    _, rows = sweeps
    assert [r["s"] for r in rows] == [0.0, 0.5, 0.95]
    assert all(set(S_COLUMNS) <= set(r) for r in rows)
    sav = [r["mean_memory_savings"] for r in rows]
    assert all(a <= b for a, b in zip(sav, sav[1:]))
    for r in rows:
        assert r["analytic_5s_over_7"] == pytest.approx(5 * r["s"] / 7)
        assert r["steady_memory_savings"] == pytest.approx(r["analytic_floor"], abs=1e-12)
    assert rows[0]["mean_memory_savings"] == 0.0


def test_consistency_needs_dense_memory(cfg, weights, scene):
    st = run_stream(scene.frames, scene.masks[0], cfg, weights)
    with pytest.raises(ValueError):
        consistency_rows(st)
    rows = consistency_rows(run_stream(scene.frames, scene.masks[0], cfg.dense(), weights))
    assert rows and all(-1.0 <= r["cosine"] <= 1.0 + 1e-9 for r in rows)
    assert all(r["first_step"] < r["second_step"] for r in rows)


# -- plots ---------------------------------------------------------------------------


def _is_svg(path):
    root = ET.parse(path).getroot()
    return root.tag.endswith("svg")


def test_single_point_plot(tmp_path):
    p = accuracy_vs_speedup([{"config": "dense", "speedup_total": 1.0, "mean_iou_gt": 0.9}], tmp_path / "a.svg")
    assert _is_svg(p)
    assert p.read_text().count("<path") >= 1


def test_plots_are_byte_stable(tmp_path, sweeps):
    tau_rows, s_rows = sweeps
    for fn, rows in ((tau_sweep_plot, tau_rows), (s_sweep_plot, s_rows)):
        a = fn(rows, tmp_path / "a.svg")
        b = fn(rows, tmp_path / "b.svg")
        assert _is_svg(a)
        assert a.read_bytes() == b.read_bytes()


def test_pooled_sparsity_weights_frames_equally():
    rows = [{"t": 0, "n_windows": 16, "n_object_windows": 16}, {"t": 1, "n_windows": 16, "n_object_windows": 4}, {"t": 2, "n_windows": 16, "n_object_windows": 8}]
    assert pooled_sparsity(rows) == pytest.approx(1 - 28 / 48)
    assert np.isfinite(pooled_sparsity(rows))
