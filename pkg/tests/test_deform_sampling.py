import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

import naive_reference
from smalldet import deform_sampling as ds
from smalldet.geometry import Box, NormalizedPoint


def test_ref_to_level():
    assert ds.ref_to_level(NormalizedPoint(0, 0), (8, 4)) == (0, 0)
    assert ds.ref_to_level(NormalizedPoint(1, 1), (8, 4)) == (8, 4)
    assert ds.ref_to_level(NormalizedPoint(0.5, 0.5), (8, 4)) == (4, 2)


def test_bilinear_examples():
    rng = np.random.default_rng(0)
    grid = rng.normal(size=(3, 4, 2))
    np.testing.assert_array_equal(ds.bilinear_sample(grid, (2.5, 1.5)), grid[1, 2])
    np.testing.assert_allclose(ds.bilinear_sample(grid, (2.0, 1.5)), (grid[1, 1] + grid[1, 2]) / 2, rtol=0, atol=1e-15)
    np.testing.assert_array_equal(ds.bilinear_sample(grid, (-10, -10)), np.zeros(2))


def test_bilinear_zero_padding_at_edge():
    grid = np.ones((2, 2, 1))
    # half a cell beyond the left edge: half the mass comes from padding
    assert ds.bilinear_sample(grid, (0.0, 1.0))[0] == pytest.approx(0.5)


def _identity_params(m, c):
    d = c // m
    out = np.zeros((m, c, d))
    val = np.zeros((m, d, c))
    for h in range(m):
        out[h, h * d:(h + 1) * d] = np.eye(d)
        val[h, :, h * d:(h + 1) * d] = np.eye(d)
    return ds.AttentionParams(out, val)


def test_forward_collapses_to_single_point():
    rng = np.random.default_rng(1)
    pyr = ds.FeaturePyramid([rng.normal(size=(4, 4, 2))])
    p = NormalizedPoint(0.5, 0.5)  # level coords (2, 2)
    offsets = np.zeros((1, 1, 2, 2))
    offsets[0, 0, 0] = (0.5, -0.5)  # lands on the center of cell (row 1, col 2)
    offsets[0, 0, 1] = (-1.7, 0.3)
    weights = np.array([[[1.0, 0.0]]])
    out = ds.attention_forward(p, pyr, ds.SamplingState(offsets, weights), _identity_params(1, 2))
    np.testing.assert_allclose(out, pyr.levels[0][1, 2], rtol=0, atol=1e-15)


def test_forward_on_constant_level():
    pyr = ds.FeaturePyramid([np.full((5, 5, 2), 3.0)])
    params = ds.AttentionParams.random(1, 2, np.random.default_rng(2))
    p = NormalizedPoint(0.5, 0.5)
    offsets = np.random.default_rng(3).uniform(-1, 1, (1, 1, 4, 2))
    uniform = ds.SamplingState(offsets, np.full((1, 1, 4), 0.25))
    single = ds.SamplingState(np.zeros((1, 1, 1, 2)), np.ones((1, 1, 1)))
    np.testing.assert_allclose(ds.attention_forward(p, pyr, uniform, params),
                               ds.attention_forward(p, pyr, single, params), rtol=0, atol=1e-12)


def random_instance(rng):
    m = int(rng.integers(1, 5))
    c = m * int(rng.integers(1, 4 // m + 1))
    l, k = int(rng.integers(1, 5)), int(rng.integers(1, 5))
    levels = [rng.normal(size=(int(rng.integers(2, 7)), int(rng.integers(2, 7)), c)) for _ in range(l)]
    offsets = rng.normal(0, 2, (m, l, k, 2))
    weights = ds.softmax_weights(rng.normal(size=(m, l, k)))
    params = ds.AttentionParams.random(m, c, rng)
    p = NormalizedPoint(*rng.uniform(0, 1, 2))
    return p, levels, offsets, weights, params


def test_forward_matches_naive_reference():
    rng = np.random.default_rng(11)
    for _ in range(500):
        p, levels, offsets, weights, params = random_instance(rng)
        fast = ds.attention_forward(p, ds.FeaturePyramid(levels), ds.SamplingState(offsets, weights), params)
        slow = naive_reference.attention_forward((p.px, p.py), levels, offsets, weights,
                                                 params.out_proj, params.value_proj)
        np.testing.assert_allclose(fast, slow, rtol=0, atol=1e-12)


@settings(max_examples=200)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4)),
              elements=st.floats(-1e3, 1e3)))
def test_softmax_sums_to_one_per_head(logits):
    a = ds.softmax_weights(logits)
    assert np.all(a >= 0)
    np.testing.assert_allclose(a.reshape(a.shape[0], -1).sum(axis=1), 1.0, atol=1e-6)


def test_softmax_backward_matches_jacobian():
    rng = np.random.default_rng(4)
    logits = rng.normal(size=(2, 2, 3))
    g = rng.normal(size=logits.shape)
    a = ds.softmax_weights(logits)
    flat = a.reshape(2, -1)
    expected = np.stack([(np.diag(f) - np.outer(f, f)) @ gg for f, gg in zip(flat, g.reshape(2, -1))])
    np.testing.assert_allclose(ds.softmax_backward(a, g).reshape(2, -1), expected, atol=1e-14)


GEOM = ds.LevelGeometry((64.0, 64.0), ((8, 8), (4, 4)))


def test_partition_examples():
    box = Box(16, 16, 32, 32)
    p = NormalizedPoint(0.5, 0.5)
    st0 = ds.partition_points(ds.SamplingState(np.zeros((2, 2, 3, 2)), np.full((2, 2, 3), 1 / 6)), box, p, GEOM)
    assert st0.inside_mask.all()
    far = ds.SamplingState(np.full((2, 2, 3, 2), 100.0), np.full((2, 2, 3), 1 / 6))
    assert not ds.partition_points(far, box, p, GEOM).inside_mask.any()
    geom = ds.LevelGeometry((64.0, 64.0), ((8, 8),))
    mixed = ds.SamplingState(np.array([[[[1.0, 0.0], [3.0, 0.0]]]]), np.array([[[0.5, 0.5]]]))
    # level stride 8: +1 -> x=40 (inside), +3 -> x=56 (outside the box ending at 48)
    np.testing.assert_array_equal(ds.partition_points(mixed, box, p, geom).inside_mask, [[[True, False]]])


def test_partition_boundary_is_inside():
    geom = ds.LevelGeometry((64.0, 64.0), ((8, 8),))
    box = Box(16, 16, 32, 32)
    st1 = ds.SamplingState(np.array([[[[2.0, 2.0]]]]), np.ones((1, 1, 1)))
    assert ds.partition_points(st1, box, NormalizedPoint(0.5, 0.5), geom).inside_mask.all()


def _single(offset, inside, weight=1.0):
    return ds.SamplingState(np.array(offset, dtype=float).reshape(1, 1, 1, 2), np.full((1, 1, 1), weight),
                            np.array(inside).reshape(1, 1, 1))


def test_offset_loss_examples():
    unit = ds.LevelGeometry((1.0, 1.0), ((2, 2),))  # level scale 2
    box = Box(0, 0, 0.1, 0.05)  # eta*(w,h) in level pixels = (0.2, 0.1) at eta=1
    assert ds.offset_loss([_single((0.5, 0.5), True)], [box], 1.0, unit) == 0.0
    assert ds.offset_loss([_single((0.2, 0.1), False)], [box], 1.0, unit) == pytest.approx(0.0, abs=1e-30)
    assert ds.offset_loss([_single((0.5, 0.5), False)], [box], 1.0, unit) == pytest.approx(0.49, abs=1e-15)
    assert ds.offset_loss([_single((-0.5, 0.5), False)], [box], 1.0, unit) == pytest.approx(0.49, abs=1e-15)
    with pytest.raises(ValueError):
        ds.offset_loss([_single((0.5, 0.5), False)], [box], 0.5, unit)


def test_offset_loss_requires_partition():
    with pytest.raises(ValueError):
        ds.offset_loss([ds.SamplingState(np.zeros((1, 1, 1, 2)), np.ones((1, 1, 1)))], [Box(0, 0, 1, 1)], 1.0, GEOM)


def _state(weights, inside):
    weights = np.asarray(weights, dtype=float)
    return ds.SamplingState(np.zeros(weights.shape + (2,)), weights, np.asarray(inside))


def test_attention_loss_examples():
    assert ds.attention_loss([_state([[[0.5, 0.3, 0.2]]], [[[False, True, True]]])]) == pytest.approx(0.2)
    assert ds.attention_loss([_state([[[0.2, 0.5, 0.3]]], [[[False, True, True]]])]) == 0.0
    assert ds.attention_loss([_state([[[0.2, 0.5, 0.3]]], [[[True, True, True]]])]) == 0.0
    # empty inside set: every outside weight is penalized in full
    assert ds.attention_loss([_state([[[0.6, 0.4]]], [[[False, False]]])]) == pytest.approx(1.0)


def test_attention_loss_strict_min():
    s = _state([[[0.35, 0.4, 0.25]]], [[[False, True, True]]])
    assert ds.attention_loss([s]) == 0.0
    assert ds.attention_loss([s], strict_min=True) == pytest.approx(0.1)


def test_gradient_examples():
    unit = ds.LevelGeometry((1.0, 1.0), ((2, 2),))
    offsets = np.array([[[[0.5, 0.5], [0.7, -0.3]]]])
    st2 = ds.SamplingState(offsets, np.array([[[0.5, 0.5]]]), np.array([[[True, False]]]))
    g = ds.offset_loss_grad([st2], [Box(0, 0, 0.1, 0.05)], 1.0, unit)[0]
    np.testing.assert_array_equal(g[0, 0, 0], [0.0, 0.0])
    assert np.all(g[0, 0, 1] != 0.0)
    ga = ds.attention_loss_grad([_state([[[0.2, 0.5, 0.3]]], [[[False, True, True]]])])[0]
    assert ga[0, 0, 0] == 0.0


def _random_fixture(rng, all_inside):
    m, l, k = (int(v) for v in rng.integers(1, 4, 3))
    image = (float(rng.integers(32, 257)), float(rng.integers(32, 257)))
    shapes = tuple((max(2, int(np.ceil(image[0] / s))), max(2, int(np.ceil(image[1] / s)))) for s in (8, 16, 32)[:l])
    geom = ds.LevelGeometry(image, shapes)
    states, boxes = [], []
    for _ in range(int(rng.integers(1, 5))):
        w, h = rng.uniform(4, image[0] / 2), rng.uniform(4, image[1] / 2)
        box = Box(rng.uniform(0, image[0] - w), rng.uniform(0, image[1] - h), w, h)
        p = NormalizedPoint(*np.divide(box.center, image))
        half = 0.5 * np.array([w, h]) * geom.scales()
        off = rng.uniform(-1, 1, (m, l, k, 2)) * half[None, :, None, :]
        if not all_inside:
            off = off * rng.uniform(0.5, 4.0, off.shape)
        st3 = ds.partition_points(ds.SamplingState(off, ds.softmax_weights(rng.normal(size=(m, l, k)))), box, p, geom)
        states.append(st3)
        boxes.append(box)
    return states, boxes, geom


def test_losses_vanish_when_every_point_is_inside():
    rng = np.random.default_rng(5)
    for _ in range(300):
        states, boxes, geom = _random_fixture(rng, all_inside=True)
        assert all(s.inside_mask.all() for s in states)
        for eta in ds.DEFAULT_ETA_SCHEDULE:
            assert ds.offset_loss(states, boxes, eta, geom) == 0.0
        assert ds.attention_loss(states) == 0.0
        assert ds.attention_loss(states, strict_min=True) == 0.0


def test_attention_loss_bounded_by_outside_mass():
    rng = np.random.default_rng(6)
    for _ in range(300):
        states, _, _ = _random_fixture(rng, all_inside=False)
        outside_mass = sum(float(s.weights[~s.inside_mask].sum()) for s in states)
        assert ds.attention_loss(states) <= outside_mass + 1e-12


def test_offset_loss_monotone_in_eta():
    rng = np.random.default_rng(8)
    unit = ds.LevelGeometry((1.0, 1.0), ((1, 1),))
    for _ in range(200):
        box = Box(0, 0, *rng.uniform(0.1, 1.0, 2))
        etas = np.sort(rng.uniform(1.0, 2.0, 2))
        # every component beyond the larger target
        off = np.sign(rng.normal(size=2)) * (etas[1] * np.array([box.w, box.h]) + rng.uniform(0.01, 1, 2))
        s = _single(off, False)
        assert ds.offset_loss([s], [box], etas[0], unit) >= ds.offset_loss([s], [box], etas[1], unit)


def test_sampling_config_validation():
    ds.SamplingConfig()
    for eta in [(1.5, 1.3), (1.0, 1.1, 1.0, 1.0, 1.0, 1.0), (1.5, 1.3, 1.2, 1.1, 1.05, 1.01), (0.9,) * 6]:
        with pytest.raises(ValueError):
            ds.SamplingConfig(eta_schedule=eta)
