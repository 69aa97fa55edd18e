import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sparsevos.encoder import EncoderConfig, dense_encoder_macs, encode, encoder_shapes, mhsa_block, routed_block
from sparsevos.layers import block_shapes, full_block_param_count
from sparsevos.ledger import CostLedger, metering
from sparsevos.numerics import Rng
from sparsevos.swr import RoutingDecision, ShortcutWeights, shortcut_forward
from sparsevos.windows import WindowGrid, WindowLayout, window_partition, window_unpartition


def random_block(c, seed=0, std=0.3):
    rng = Rng(seed)
    w = {}
    for name, shape in block_shapes("b", c).items():
        w[name] = rng.normal(shape, std) + (1.0 if name.endswith(".g") else 0.0)
    return w


def random_encoder_weights(cfg, seed=0):
    rng = Rng(seed)
    return {n: rng.normal(s, 0.1) + (1.0 if n.endswith(".g") else 0.0) for n, s in sorted(encoder_shapes(cfg).items())}


# -- windows -----------------------------------------------------------------------


@pytest.mark.parametrize("H,h,n_windows,padded", [(8, 4, 4, 8), (10, 4, 9, 12), (4, 4, 1, 4)])
def test_partition_counts(H, h, n_windows, padded):
    x = np.arange(H * H * 2, dtype=np.float32).reshape(H, H, 2)
    g = window_partition(x, h, h)
    assert g.n_windows == n_windows
    assert (g.layout.Hp, g.layout.Wp) == (padded, padded)
    if n_windows == 1:
        assert np.array_equal(g.blocks[0], x)


@pytest.mark.parametrize("shape", [(10, 10, 3), (8, 8, 2)])
def test_round_trip(shape, rng):
    x = rng.normal(size=shape).astype(np.float32)
    assert np.array_equal(window_unpartition(window_partition(x, 4, 4), *shape[:2]), x)


def test_unpartition_zero():
    g = WindowGrid(WindowLayout(6, 6, 4, 4), np.zeros((4, 4, 4, 3), np.float32))
    assert not window_unpartition(g, 6, 6).any()


def test_partition_padding_is_zero():
    g = window_partition(np.ones((5, 5, 1), np.float32), 4, 4)
    assert g.blocks.sum() == 25


def test_round_trip_exhaustive():
    rng = np.random.default_rng(1)
    for H in range(1, 17):
        for W in range(1, 17):
            x = rng.normal(size=(H, W, 2)).astype(np.float32)
            for h in range(1, 6):
                for w in range(1, 6):
                    assert np.array_equal(window_unpartition(window_partition(x, h, w), H, W), x)


def test_window_order_matches_index():
    lay = WindowLayout(8, 8, 4, 4)
    x = np.zeros((8, 8, 1), np.float32)
    x[5, 6, 0] = 1.0
    g = window_partition(x, 4, 4)
    assert int(lay.window_index(5, 6)) == 3
    assert g.blocks[3].sum() == 1.0


# -- mhsa_block ----------------------------------------------------------------------


def test_block_zero_projections_is_identity(rng):
    w = random_block(8)
    for k in ("proj.w", "proj.b", "fc2.w", "fc2.b"):
        w[f"b.{k}"] = np.zeros_like(w[f"b.{k}"])
    x = rng.normal(size=(5, 8)).astype(np.float32)
    assert np.array_equal(mhsa_block(x, w, "b", 2), x)


def test_block_window_permutation(rng):
    w = random_block(8)
    x = rng.normal(size=(4, 3, 3, 8)).astype(np.float32)
    lay = WindowLayout(6, 6, 3, 3)
    perm = [2, 0, 3, 1]
    a = mhsa_block(WindowGrid(lay, x), w, "b", 2).blocks
    b = mhsa_block(WindowGrid(lay, x[perm]), w, "b", 2).blocks
    assert np.allclose(a[perm], b, atol=1e-6)


def test_window_independence(rng):
    w = random_block(8)
    x = rng.normal(size=(8, 8, 8)).astype(np.float32)
    base = window_unpartition(mhsa_block(window_partition(x, 4, 4), w, "b", 2), 8, 8)
    x2 = x.copy()
    x2[:4, 4:] = 0.0  # window 1
    out = window_unpartition(mhsa_block(window_partition(x2, 4, 4), w, "b", 2), 8, 8)
    changed = np.any(out != base, axis=-1)
    assert changed[:4, 4:].any()
    changed[:4, 4:] = False
    assert not changed.any()


def _ln(x, g, b):
    mu = x.mean()
    var = ((x - mu) ** 2).mean()
    return (x - mu) / np.sqrt(var + 1e-5) * g + b


def test_single_token_oracle():
    c = 4
    w = random_block(c, seed=3)
    x = np.array([0.3, -1.2, 0.7, 2.0], np.float32)
    out = mhsa_block(x[None], w, "b", 1)[0]
    # one key: attention weight is exactly 1, so the head returns v
    n1 = _ln(x, w["b.ln1.g"], w["b.ln1.b"])
    v = w["b.qkv.w"][2 * c :] @ n1 + w["b.qkv.b"][2 * c :]
    x1 = x + w["b.proj.w"] @ v + w["b.proj.b"]
    h = w["b.fc1.w"] @ _ln(x1, w["b.ln2.g"], w["b.ln2.b"]) + w["b.fc1.b"]
    gelu = 0.5 * h * (1 + np.tanh(np.sqrt(2 / np.pi) * (h + 0.044715 * h**3)))
    expected = x1 + w["b.fc2.w"] @ gelu + w["b.fc2.b"]
    assert np.allclose(out, expected, atol=1e-5)


@pytest.mark.parametrize("d", [4, 8, 16, 64])
def test_block_param_count(d):
    assert full_block_param_count(d) == 12 * d * d + 13 * d


# -- encode --------------------------------------------------------------------------


@pytest.fixture(scope="module")
def small():
    cfg = EncoderConfig(image_size=(32, 32), patch=2, channels=(8, 16, 32), layers=(1, 1, 2), windows=((4, 4), (4, 4), (2, 2)), heads=2)
    w = random_encoder_weights(cfg)
    sc = {0: ShortcutWeights.identity(32, Rng(4), 0.3)}
    sc[0].w_up[:] = Rng(5).normal(sc[0].w_up.shape, 0.3)
    return cfg, w, sc


def test_all_object_plan_is_bit_identical(small, rng):
    cfg, w, sc = small
    img = rng.uniform(size=(32, 32, 3)).astype(np.float32)
    dense = encode(img, cfg, w)
    plan = RoutingDecision.dense(1, cfg.layout(2).n_windows)
    routed = encode(img, cfg, w, plan, sc)
    for a, b in zip((dense.s0, dense.s1, dense.s2), (routed.s0, routed.s1, routed.s2)):
        assert np.array_equal(a, b)


def test_no_object_plan_skips_stage2_attention(small, rng):
    cfg, w, sc = small
    img = rng.uniform(size=(32, 32, 3)).astype(np.float32)
    ledger = CostLedger()
    with metering(ledger):
        out = encode(img, cfg, w, RoutingDecision(1, cfg.layout(2).n_windows), sc)
    assert ledger["encoder_stage2_attention"] == 0
    assert ledger["encoder_shortcut"] > 0
    assert np.all(np.isfinite(out.s2))


def test_routing_changes_only_routed_windows(small, rng):
    cfg, w, sc = small
    lay = cfg.layout(2)
    x = rng.normal(size=(lay.H, lay.W, cfg.d)).astype(np.float32)
    dense = routed_block(x, w, "enc.stage2.block0", cfg.heads, lay, None, None)
    plan = RoutingDecision(1, lay.n_windows, w_pred=frozenset(range(1, lay.n_windows)))
    out = routed_block(x, w, "enc.stage2.block0", cfg.heads, lay, plan, sc[0])
    # untouched windows agree up to BLAS blocking over a different batch size
    mask = np.ones((lay.H, lay.W), bool)
    mask[: lay.h, : lay.w] = False
    assert np.allclose(out[mask], dense[mask], rtol=0, atol=1e-5)
    assert not np.allclose(out[~mask], dense[~mask], atol=1e-3)
    expected = x[: lay.h, : lay.w].reshape(-1, cfg.d)
    assert np.allclose(out[: lay.h, : lay.w].reshape(-1, cfg.d), shortcut_forward(expected, sc[0]))


def _hand_macs(cfg):
    """Count every matmul of the dense encoder from the tensor extents."""
    total = 0
    H, W = cfg.image_size[0] // cfg.patch, cfg.image_size[1] // cfg.patch
    c = cfg.channels
    total += H * W * (cfg.patch**2 * 3) * c[0]  # patch embedding
    for s in range(3):
        h, w = cfg.windows[s]
        Hp, Wp = -(-H // h) * h, -(-W // w) * w
        for i in range(cfg.layers[s]):
            glob = s == 2 and i == cfg.layers[s] - 1
            tokens = H * W if glob else Hp * Wp
            group = H * W if glob else h * w
            qkv = tokens * c[s] * 3 * c[s]
            proj = tokens * c[s] * c[s]
            scores = tokens * group * c[s]  # summed over heads: heads * (c/heads)
            values = tokens * group * c[s]
            fc1 = tokens * c[s] * 4 * c[s]
            fc2 = tokens * 4 * c[s] * c[s]
            total += qkv + proj + scores + values + fc1 + fc2
        if s < 2:
            H, W = H // 2, W // 2
            total += H * W * c[s] * c[s + 1]
    return total


@pytest.mark.parametrize(
    "cfg",
    [
        EncoderConfig(),
        EncoderConfig(image_size=(32, 32), channels=(8, 16, 32)),
        EncoderConfig(image_size=(48, 40), windows=((5, 3), (4, 4), (3, 2)), layers=(2, 1, 3)),
    ],
)
def test_dense_macs_match_hand_count(cfg):
    w = random_encoder_weights(cfg)
    ledger = CostLedger()
    with metering(ledger):
        out = encode(np.zeros((*cfg.image_size, 3), np.float32), cfg, w)
    assert all(np.all(np.isfinite(a)) for a in (out.s0, out.s1, out.s2))
    assert ledger.group("encoder") == ledger.total() == _hand_macs(cfg)
    assert dense_encoder_macs(cfg) == _hand_macs(cfg)


def test_desk_scale_mac_count():
    # 64x64 input, patch 2, widths 16/32/64, windows 4/4/2 evaluated by hand
    stage0 = 32 * 32 * (12 * 16 * 16 + 2 * 16 * 16)
    stage1 = 16 * 16 * (12 * 32 * 32 + 2 * 16 * 32)
    stage2_window = 8 * 8 * (12 * 64 * 64 + 2 * 4 * 64)
    stage2_global = 8 * 8 * (12 * 64 * 64 + 2 * 64 * 64)
    glue = 32 * 32 * 12 * 16 + 16 * 16 * 16 * 32 + 8 * 8 * 32 * 64
    assert dense_encoder_macs(EncoderConfig()) == stage0 + stage1 + stage2_window + stage2_global + glue


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(0, 15), max_size=16))
def test_stage2_macs_linear_in_object_windows(obj):
    cfg = EncoderConfig(image_size=(32, 32), channels=(8, 16, 32), windows=((4, 4), (4, 4), (1, 1)))
    w = random_encoder_weights(cfg)
    sc = {0: ShortcutWeights.identity(32)}
    lay = cfg.layout(2)
    plan = RoutingDecision(1, lay.n_windows, w_pred=frozenset(obj))
    ledger = CostLedger()
    with metering(ledger):
        encode(np.zeros((32, 32, 3), np.float32), cfg, w, plan, sc)
    n_obj = len(plan.w_obj)
    full = 12 * 32 * 32 + 2 * 1 * 32  # one token per window
    short = 32 * 16 * 2
    assert ledger["encoder_stage2_attention"] == n_obj * full
    assert ledger["encoder_shortcut"] == (lay.n_windows - n_obj) * short
