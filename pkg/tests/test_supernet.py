import numpy as np
import pytest

from posenas.autograd import ShapeError, Tensor, grad_check, mse
from posenas.nn import Conv, ConvSpec, Identity
from posenas.supernet import (
    SKIP,
    MixedLayer,
    StageSpec,
    SupernetConfig,
    build_supernet,
    candidate_ids_for,
    desk_config,
    drop_path,
    layer_plan,
    layer_probs,
    mixed_forward,
    op_id,
    table1_small_config,
)
from helpers import tensor64


def _toy_layer(rng=None, dtype=np.float32, channels=4):
    rng = rng or np.random.default_rng(0)
    return MixedLayer(0, 0, channels, channels, 1, (3,), (3,), rng, dtype)


def test_layer_probs_uniform():
    p = layer_probs(Tensor(np.zeros(7)))
    np.testing.assert_allclose(p.data, np.full(7, 1 / 7), atol=1e-7)


def test_layer_probs_analytic():
    p = layer_probs(Tensor(np.array([np.log(3.0), 0.0])))
    np.testing.assert_allclose(p.data, [0.75, 0.25], atol=1e-7)


def test_layer_probs_extreme_logits():
    p = layer_probs(Tensor(np.array([1000.0, 0.0])))
    assert np.isfinite(p.data).all()
    np.testing.assert_allclose(p.data, [1.0, 0.0], atol=1e-8)


def test_layer_probs_rejects_nonfinite():
    with pytest.raises(ValueError):
        layer_probs(Tensor(np.array([np.nan, 0.0])))
    with pytest.raises(ValueError):
        layer_probs(Tensor(np.array([np.inf, 0.0])))


def test_candidate_sets_and_skip_admissibility():
    rng = np.random.default_rng(1)
    layer = MixedLayer(0, 0, 8, 8, 1, (3, 5, 7), (3, 6), rng)
    assert len(layer.candidates) == 7  # 6 MBConv variants + skip
    assert layer.candidate_ids[-1] == SKIP
    assert layer.candidate_ids[0] == "mbconv-k3-e3"

    stride2 = MixedLayer(1, 0, 8, 8, 2, (3, 5, 7), (3, 6), rng)
    assert SKIP not in stride2.candidate_ids
    widened = MixedLayer(2, 0, 8, 16, 1, (3, 5, 7), (3, 6), rng)
    assert SKIP not in widened.candidate_ids


def test_mixed_forward_one_hot_selects_candidate():
    rng = np.random.default_rng(2)
    layer = MixedLayer(0, 0, 4, 4, 1, (3, 5), (3,), rng)
    x = Tensor(rng.standard_normal((2, 4, 6, 6)).astype(np.float32))
    outs = [m(x, training=True) for m in layer.candidates]
    for pick in range(len(layer.candidates)):
        alpha = np.full(len(layer.candidates), -40.0, dtype=np.float32)
        alpha[pick] = 40.0
        layer.alpha.data[...] = alpha
        out = mixed_forward(x, layer, training=True)
        np.testing.assert_allclose(out.data, outs[pick].data, atol=1e-5)


def test_mixed_forward_identical_candidates_is_identity():
    rng = np.random.default_rng(3)
    layer = _toy_layer(rng)
    layer.candidates = [Identity(), Identity()]
    layer.candidate_specs = [SKIP, SKIP]
    layer.alpha = Tensor(np.array([1.3, -0.4], dtype=np.float32), requires_grad=True)
    x = Tensor(rng.standard_normal((1, 4, 5, 5)).astype(np.float32))
    out = mixed_forward(x, layer)
    np.testing.assert_allclose(out.data, x.data, atol=1e-6)


def test_mixed_forward_half_skip_half_zero_conv():
    # hand-evaluated two-term sum: 0.5 * x + 0.5 * 0 = x / 2
    rng = np.random.default_rng(4)
    layer = _toy_layer(rng)
    zero_conv = Conv(ConvSpec("pointwise", 1, 1, 4, 4), rng)
    zero_conv.weight.data[...] = 0.0
    layer.candidates = [Identity(), zero_conv]
    layer.candidate_specs = [SKIP, zero_conv.spec]
    layer.alpha = Tensor(np.zeros(2, dtype=np.float32), requires_grad=True)
    x = Tensor(rng.standard_normal((2, 4, 5, 5)).astype(np.float32))
    out = mixed_forward(x, layer)
    np.testing.assert_allclose(out.data, 0.5 * x.data, atol=1e-6)


def test_mixed_forward_shape_disagreement_errors():
    rng = np.random.default_rng(5)
    layer = _toy_layer(rng)
    layer.candidates = [Identity(), Conv(ConvSpec("pointwise", 1, 1, 4, 8), rng)]
    layer.candidate_specs = [SKIP, "bad"]
    layer.alpha = Tensor(np.zeros(2, dtype=np.float32), requires_grad=True)
    x = Tensor(np.zeros((1, 4, 5, 5), dtype=np.float32))
    with pytest.raises(ShapeError, match="disagree"):
        mixed_forward(x, layer)


def test_mixed_alpha_gradient_matches_fd():
    rng = np.random.default_rng(6)
    layer = MixedLayer(0, 0, 2, 2, 1, (3,), (3,), rng, dtype=np.float64)
    assert len(layer.candidates) == 2  # one MBConv + skip
    x = tensor64(rng.standard_normal((2, 2, 5, 5)))
    target = tensor64(rng.standard_normal((2, 2, 5, 5)))

    def f(alpha):
        layer.alpha = alpha
        return mse(mixed_forward(x, layer, training=True), target)

    err = grad_check(f, tensor64(np.array([0.3, -0.2]), requires_grad=True), 1e-5)
    assert err < 1e-4


def test_drop_path_zero_rate_keeps_everything():
    layer = _toy_layer()
    active, probs = drop_path(layer, 0.0, np.random.default_rng(0))
    assert active.all()
    np.testing.assert_allclose(probs, layer.probs_np(), atol=1e-7)


def test_drop_path_renormalizes_and_survives():
    rng = np.random.default_rng(1)
    layer = MixedLayer(0, 0, 4, 4, 1, (3, 5, 7), (3, 6), rng)
    layer.alpha.data[...] = rng.standard_normal(len(layer.candidates))
    r = np.random.default_rng(123)
    for _ in range(50):
        active, probs = drop_path(layer, 0.85, r)
        assert active.any()
        assert abs(probs.sum() - 1.0) < 1e-6
        assert np.all(probs[~active] == 0.0)


def test_drop_path_deterministic_per_seed():
    layer = _toy_layer()

    def run():
        r = np.random.default_rng(7)
        return [drop_path(layer, 0.5, r)[0].tolist() for _ in range(20)]

    assert run() == run()


def test_drop_path_invalid_rate():
    layer = _toy_layer()
    with pytest.raises(ValueError):
        drop_path(layer, 1.0, np.random.default_rng(0))


def test_config_validation():
    with pytest.raises(ValueError, match="non-decreasing"):
        SupernetConfig(stages=(StageSpec(8, 2, 1), StageSpec(6, 2, 1), StageSpec(8, 2, 1), StageSpec(8, 1, 1)))
    with pytest.raises(ValueError, match="stride-2"):
        SupernetConfig(downsamples=5)
    with pytest.raises(ValueError, match="divisible"):
        SupernetConfig(input_size=60)


def test_table1_small_layout():
    cfg = table1_small_config()
    assert cfg.stages[0] == StageSpec(24, 2, 4)  # [24, s2] + [24, s1] x 3
    assert cfg.stages[1] == StageSpec(32, 2, 6)
    assert cfg.stages[2] == StageSpec(64, 2, 10)
    assert cfg.stages[3] == StageSpec(96, 1, 8)
    assert cfg.feature_size() == 16  # 256 input -> 16 x 16 trunk output
    plan = layer_plan(cfg)
    assert len(plan) == 28
    # stage-3 layers all see 16 x 16 inputs after its stride-2 entry
    stage3 = [p for p in plan if p[1] == 2]
    assert stage3[0][5] == (32, 32, 32)
    assert stage3[1][5] == (64, 16, 16)


def test_desk_config_layout():
    cfg = desk_config()
    assert cfg.stages[0] == StageSpec(6, 2, 2)  # widths 6, layers 1 + 1
    assert cfg.feature_size() == 4
    sn = build_supernet(cfg, seed=0)
    assert [l.stride for l in sn.layers] == [2, 1, 2, 1, 2, 1, 1, 1]
    assert [l.out_ch for l in sn.layers] == [6, 6, 8, 8, 16, 16, 24, 24]


def test_supernet_forward_matches_declared_head_shape():
    cfg = desk_config()
    sn = build_supernet(cfg, seed=1)
    x = Tensor(np.random.default_rng(0).standard_normal((2, 1, 64, 64)).astype(np.float32))
    out = sn(x, training=True)
    assert out.shape == (2, *sn.head_in_shape())
    assert sn.head_in_shape() == (24, 4, 4)


def test_probabilities_sum_to_one_everywhere():
    sn = build_supernet(desk_config(), seed=2)
    for layer in sn.layers:
        layer.alpha.data[...] = np.random.default_rng(layer.index).standard_normal(
            len(layer.candidates)
        )
        assert abs(layer.probs_np().sum() - 1.0) < 1e-6


def test_skip_only_where_admissible():
    sn = build_supernet(desk_config(), seed=3)
    for layer in sn.layers:
        has_skip = SKIP in layer.candidate_ids
        admissible = layer.stride == 1 and layer.in_ch == layer.out_ch
        assert has_skip == admissible


def test_candidate_ids_helper_matches_layers():
    cfg = desk_config()
    sn = build_supernet(cfg, seed=4)
    for (idx, stage, in_ch, out_ch, stride, _), layer in zip(layer_plan(cfg), sn.layers):
        assert candidate_ids_for(cfg, in_ch, out_ch, stride) == layer.candidate_ids


def test_op_id_round_trip_tokens():
    from posenas.nn import MBConvSpec

    assert op_id(MBConvSpec(5, 6, 1, 4, 4)) == "mbconv-k5-e6"
    assert op_id(SKIP) == "skip"
    with pytest.raises(ValueError):
        op_id("mystery")
