from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from poisonbrew import autograd as ag
from poisonbrew import nn
from poisonbrew.autograd import Tensor


# ----------------------------------------------------------- loop oracles

def _conv_loops(x, w, b):
    n, h, wd, cin = x.shape
    k, _, _, cout = w.shape
    p = k // 2
    xp = np.zeros((n, h + 2 * p, wd + 2 * p, cin))
    xp[:, p:p + h, p:p + wd] = x
    out = np.zeros((n, h, wd, cout))
    for i in range(h):
        for j in range(wd):
            patch = xp[:, i:i + k, j:j + k, :]
            out[:, i, j, :] = np.tensordot(patch, w, axes=([1, 2, 3], [0, 1, 2])) + b
    return out


def _pool_loops(x, s):
    n, h, w, c = x.shape
    ho, wo = h // s, w // s
    out = np.zeros((n, ho, wo, c))
    for i in range(ho):
        for j in range(wo):
            out[:, i, j, :] = x[:, i * s:(i + 1) * s, j * s:(j + 1) * s, :].max(axis=(1, 2))
    return out


def _oracle_logits(spec, flat, x):
    parts = spec.layout().split(flat)
    h = (x - spec.input_mean) / spec.input_std
    if spec.kind == "mlp":
        for i in range(len(spec.widths)):
            h = np.maximum(h @ parts[2 * i] + parts[2 * i + 1], 0.0)
        return h @ parts[-2] + parts[-1]
    nconv = len(spec.widths)
    for i in range(nconv):
        h = np.maximum(_conv_loops(h, parts[2 * i], parts[2 * i + 1]), 0.0)
        if i >= nconv - 2:
            h = _pool_loops(h, spec.pool)
    return h.reshape(len(x), -1) @ parts[-2] + parts[-1]


# ------------------------------------------------------------------ tests

def test_mlp_param_count():
    assert nn.ModelSpec.mlp([2, 4, 2]).param_count() == 2 * 4 + 4 + 4 * 2 + 2


def _closed_form_count(widths, cin, size, classes, k=3, pool=3):
    total, c = 0, cin
    for w in widths:
        total += k * k * c * w + w
        c = w
    s = size // pool // pool
    return total + widths[-1] * s * s * classes + classes


def test_convnet_eighth_width_param_count_closed_form():
    spec = nn.ModelSpec.convnet(Fraction(1, 8), (32, 32, 3), 10)
    assert spec.layer_widths == (8, 16, 16, 32, 32)
    assert spec.param_count() == _closed_form_count((8, 16, 16, 32, 32), 3, 32, 10) == 20490


def test_full_width_feature_is_2304():
    assert nn.ModelSpec.convnet(1, (32, 32, 3), 10).feature_width == 2304
    assert nn.ModelSpec.mlp([2, 4, 2]).feature_width == 4


@settings(max_examples=25, deadline=None)
@given(st.fractions(Fraction(1, 64), Fraction(2)), st.integers(9, 40))
def test_width_scale_rounds_up_and_counts_match(scale, size):
    spec = nn.ModelSpec.convnet(scale, (size, size, 3), 7)
    assert all(w >= 1 for w in spec.layer_widths)
    for base, w in zip(nn.CONVNET_WIDTHS, spec.layer_widths):
        assert w - 1 < base * scale <= w
    assert spec.param_count() == _closed_form_count(spec.layer_widths, 3, size, 7)


def test_pooled_size_zero_rejected():
    with pytest.raises(ValueError, match="zero"):
        nn.ModelSpec.convnet(1, (8, 8, 3), 10)


def test_build_deterministic():
    spec = nn.ModelSpec.convnet(Fraction(1, 8), (12, 12, 3), 10)
    assert np.array_equal(nn.build(spec, 3).flat, nn.build(spec, 3).flat)
    assert not np.array_equal(nn.build(spec, 3).flat, nn.build(spec, 4).flat)


def test_init_bounds():
    spec = nn.ModelSpec.convnet(Fraction(1, 8), (12, 12, 3), 10)
    p = nn.build(spec, 0)
    for name, part, shape in zip(spec.layout().names, p.parts(), spec.layout().shapes):
        wshape = spec.layout().shapes[spec.layout().names.index(name.replace(".bias", ".weight"))]
        fan_in = int(np.prod(wshape[:-1]))
        gain = spec.init_gain if name.endswith("weight") else 1.0
        assert np.abs(part).max() <= np.sqrt(gain / fan_in)


def test_mlp_logits_match_straight_line_oracle():
    spec = nn.ModelSpec.mlp([2, 4, 2])
    params = nn.build(spec, 0)
    x = np.random.default_rng(0).normal(size=(5, 2))
    assert np.allclose(nn.logits(params, Tensor(x)).data, _oracle_logits(spec, params.flat, x), rtol=0, atol=1e-13)


def test_convnet_logits_match_loop_oracle():
    spec = nn.ModelSpec.convnet(Fraction(1, 16), (11, 11, 3), 4)
    params = nn.build(spec, 0)
    x = np.random.default_rng(1).uniform(size=(3, 11, 11, 3))
    got = nn.logits(params, Tensor(x)).data
    assert np.allclose(got, _oracle_logits(spec, params.flat, x), rtol=1e-12, atol=1e-12)


def test_zero_final_layer_gives_zero_logits():
    spec = nn.ModelSpec.convnet(Fraction(1, 16), (9, 9, 3), 4)
    parts = [p.copy() for p in nn.build(spec, 0).parts()]
    parts[-2][:] = 0.0
    parts[-1][:] = 0.0
    params = nn.ModelParams(spec, spec.layout().flatten(parts))
    x = np.random.default_rng(2).uniform(size=(2, 9, 9, 3))
    assert np.array_equal(nn.logits(params, Tensor(x)).data, np.zeros((2, 4)))


def test_batching_invariance_and_feature_consistency():
    spec = nn.ModelSpec.convnet(Fraction(1, 16), (9, 9, 3), 4)
    params = nn.build(spec, 2)
    x = np.random.default_rng(3).uniform(size=(4, 9, 9, 3))
    full = nn.logits(params, Tensor(x)).data
    rows = np.concatenate([nn.logits(params, Tensor(x[i:i + 1])).data for i in range(4)])
    assert np.allclose(full, rows, rtol=0, atol=1e-12)
    feats = nn.penultimate_features(params, Tensor(x)).data
    parts = params.parts()
    assert np.array_equal(feats @ parts[-2] + parts[-1], full)
    same = nn.penultimate_features(params, Tensor(np.stack([x[0], x[0]]))).data
    assert np.array_equal(same[0], same[1])


def test_shape_mismatch_rejected():
    spec = nn.ModelSpec.convnet(Fraction(1, 16), (9, 9, 3), 4)
    with pytest.raises(ValueError, match="does not match"):
        nn.logits(nn.build(spec, 0), Tensor(np.zeros((1, 10, 10, 3))))


def test_maxpool_ties_route_to_lowest_index():
    x = Tensor(np.ones((1, 3, 3, 1)), requires_grad=True)
    (g,) = ag.grad(ag.sum(nn.maxpool(x, 3)), [x])
    expect = np.zeros((1, 3, 3, 1))
    expect[0, 0, 0, 0] = 1.0
    assert np.array_equal(g.data, expect)


def test_cross_entropy_gradcheck_on_specs():
    for spec in (nn.ModelSpec.mlp([3, 4, 3]), nn.ModelSpec.convnet(Fraction(1, 32), (9, 9, 2), 3)):
        params = nn.build(spec, 0)
        x = np.random.default_rng(4).uniform(size=(2, *spec.input_shape))
        rep = ag.finite_diff_check(lambda t: ag.cross_entropy(nn.logits(params, t), np.array([0, 2])), x,
                                   coords=np.arange(min(30, x.size)))
        assert rep.max_rel_error < 1e-4


def test_checkpoint_round_trip(tmp_path):
    spec = nn.ModelSpec.convnet(Fraction(1, 8), (12, 12, 3), 10)
    params = nn.build(spec, 9)
    nn.save_checkpoint(tmp_path / "m.ckpt", params)
    back = nn.load_checkpoint(tmp_path / "m.ckpt")
    assert back.spec == spec and back.seed == 9
    assert back.flat.tobytes() == params.flat.tobytes()


def test_checkpoint_truncated(tmp_path):
    spec = nn.ModelSpec.mlp([2, 4, 2])
    nn.save_checkpoint(tmp_path / "m.ckpt", nn.build(spec, 0))
    raw = (tmp_path / "m.ckpt").read_bytes()
    (tmp_path / "bad.ckpt").write_bytes(raw[:-8])
    with pytest.raises(ValueError, match="expected 22"):
        nn.load_checkpoint(tmp_path / "bad.ckpt")
    (tmp_path / "junk.ckpt").write_bytes(b"hello")
    with pytest.raises(ValueError, match="not a checkpoint"):
        nn.load_checkpoint(tmp_path / "junk.ckpt")


def test_params_read_only():
    p = nn.build(nn.ModelSpec.mlp([2, 4, 2]), 0)
    with pytest.raises(ValueError):
        p.flat[0] = 1.0
