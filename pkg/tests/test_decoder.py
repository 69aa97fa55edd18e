import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sparsevos.decoder import (
    N_MASKS,
    DecoderConfig,
    MaskPrediction,
    choose_output,
    decode,
    decoder_shapes,
    make_prompt,
    mask_to_grid,
)
from sparsevos.numerics import DimensionError, Rng

CFG = DecoderConfig(d=16, c0=4, c1=8, heads=2, blocks=2, grid=(4, 4))


def random_weights(cfg=CFG, seed=0, std=0.3):
    rng = Rng(seed)
    w = {n: rng.normal(s, std) for n, s in sorted(decoder_shapes(cfg).items())}
    for n in w:
        if n.endswith(".g"):
            w[n] = w[n] + 1.0
    return w


def inputs(cfg=CFG, seed=1):
    rng = Rng(seed)
    gh, gw = cfg.grid
    return rng.normal((gh * gw, cfg.d)), rng.normal((4 * gh, 4 * gw, cfg.c0)), rng.normal((2 * gh, 2 * gw, cfg.c1))


def prediction(s_iou):
    # mask j has exactly j foreground pixels, so masks are told apart by their sum
    logits = -np.ones((3, 2, 2))
    logits[1, 0, 0] = logits[2, 0, 0] = logits[2, 0, 1] = 1.0
    return MaskPrediction(logits > 0, logits, np.asarray(s_iou), 0.0, np.full((1, 1), 1.0))


def test_zero_network_fixed_point():
    w = {n: np.zeros(s, np.float32) for n, s in decoder_shapes(CFG).items()}
    f_m, s0, s1 = inputs()
    pred = decode(f_m, s0, s1, make_prompt(w, CFG), w, CFG)
    assert np.allclose(pred.s_iou, 0.5)
    assert pred.s_obj == 0.0
    assert np.allclose(pred.attention, 1 / 16)
    assert not pred.present


@pytest.mark.parametrize("grid", [(4, 4), (2, 3)])
def test_output_shapes(grid):
    cfg = DecoderConfig(d=16, c0=4, c1=8, heads=2, blocks=1, grid=grid)
    w = random_weights(cfg)
    f_m, s0, s1 = inputs(cfg)
    pred = decode(f_m, s0, s1, make_prompt(w, cfg), w, cfg)
    assert pred.masks.shape == (N_MASKS, *cfg.mask_shape) and pred.masks.dtype == bool
    assert pred.s_iou.shape == (3,)
    assert pred.attention.shape == grid
    assert np.array_equal(pred.masks, pred.logits > 0)


@pytest.mark.parametrize("s_iou,chosen", [([0.2, 0.9, 0.5], 1), ([0.5, 0.5, 0.5], 0), ([0.1, 0.7, 0.7], 1)])
def test_selection_rule(s_iou, chosen):
    pred = prediction(s_iou)
    assert pred.chosen == chosen
    assert choose_output(pred).sum() == chosen


def test_determinism():
    w = random_weights()
    f_m, s0, s1 = inputs()
    a = decode(f_m, s0, s1, make_prompt(w, CFG), w, CFG)
    b = decode(f_m, s0, s1, make_prompt(w, CFG), w, CFG)
    assert np.array_equal(a.logits, b.logits) and np.array_equal(a.s_iou, b.s_iou) and a.s_obj == b.s_obj


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6))
def test_attention_is_distribution_and_scores_bounded(seed):
    w = random_weights(seed=seed % 97)
    f_m, s0, s1 = inputs(seed=seed)
    pred = decode(f_m, s0, s1, make_prompt(w, CFG), w, CFG)
    assert (pred.attention >= 0).all()
    assert pred.attention.sum() == pytest.approx(1.0, abs=1e-6)
    assert ((pred.s_iou >= 0) & (pred.s_iou <= 1)).all()


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 1000), st.floats(-3, 3))
def test_uniform_logit_shift_keeps_choice(seed, shift):
    w = random_weights(seed=seed)
    f_m, s0, s1 = inputs(seed=seed)
    a = decode(f_m, s0, s1, make_prompt(w, CFG), w, CFG)
    w2 = dict(w)
    w2["dec.iou.b"] = w["dec.iou.b"] + np.float32(shift)
    b = decode(f_m, s0, s1, make_prompt(w2, CFG), w2, CFG)
    if np.unique(a.s_iou).size == 3:
        assert a.chosen == b.chosen


def test_mask_prompt_changes_prediction():
    w = random_weights()
    f_m, s0, s1 = inputs()
    mask = np.zeros(CFG.mask_shape, bool)
    mask[:8, :8] = True
    a = decode(f_m, s0, s1, make_prompt(w, CFG), w, CFG)
    b = decode(f_m, s0, s1, make_prompt(w, CFG, mask), w, CFG)
    assert not np.allclose(a.logits, b.logits)


def test_mask_to_grid_fractions():
    m = np.zeros((4, 4), bool)
    m[0, 0] = m[0, 1] = m[1, 0] = True
    assert mask_to_grid(m, (2, 2)).tolist() == [[0.75, 0.0], [0.0, 0.0]]
    with pytest.raises(DimensionError):
        mask_to_grid(m, (3, 3))


def test_bad_pyramid_rejected():
    w = random_weights()
    f_m, s0, s1 = inputs()
    with pytest.raises(DimensionError):
        decode(f_m[:-1], s0, s1, make_prompt(w, CFG), w, CFG)
    with pytest.raises(DimensionError):
        decode(f_m, s1, s0, make_prompt(w, CFG), w, CFG)
