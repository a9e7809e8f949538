import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from smalldet.geometry import (
    Box,
    NormalizedPoint,
    area_ratio,
    contains,
    expand,
    intersection_area,
    iou,
)

coord = st.floats(-100, 100, allow_nan=False)
size = st.floats(0.01, 100, allow_nan=False)
boxes = st.builds(Box, coord, coord, size, size)


def test_iou_examples():
    assert iou(Box(0, 0, 2, 2), Box(0, 0, 2, 2)) == 1.0
    assert iou(Box(0, 0, 1, 1), Box(5, 5, 1, 1)) == 0.0
    assert iou(Box(0, 0, 2, 2), Box(1, 0, 2, 2)) == pytest.approx(1 / 3, abs=1e-15)


def test_touching_boxes_have_zero_iou():
    assert iou(Box(0, 0, 1, 1), Box(1, 0, 1, 1)) == 0.0


def test_area_ratio_examples():
    b = Box(3, 4, 5, 6)
    assert area_ratio(b, b) == 1.0
    assert area_ratio(Box(0, 0, 2, 2), Box(0, 0, 1, 1)) == 4.0
    assert area_ratio(Box(0, 0, 1, 1), Box(0, 0, 2, 2)) == 0.25


def test_contains_is_closed():
    b = Box(0, 0, 2, 2)
    assert contains(b, (1, 1))
    assert contains(b, (2, 2))
    assert contains(b, (0, 0))
    assert not contains(b, (3, 1))
    assert not contains(b, (1, -1e-12))


def test_expand_examples():
    b = Box(0, 0, 2, 2)
    assert expand(b, 1.0) == b
    assert expand(b, 2.0).as_tuple() == (-1, -1, 4, 4)
    assert expand(Box(1, 1, 1, 1), 1.5).as_tuple() == (0.75, 0.75, 1.5, 1.5)
    with pytest.raises(ValueError):
        expand(b, 0.9)


@pytest.mark.parametrize("args", [(0, 0, 0, 1), (0, 0, 1, -1), (math.nan, 0, 1, 1), (0, math.inf, 1, 1)])
def test_invalid_boxes_rejected(args):
    with pytest.raises(ValueError):
        Box(*args)


def test_conversions_round_trip():
    b = Box(1.5, 2.5, 4.0, 6.0)
    assert Box.from_cxcywh(*b.to_cxcywh()) == b
    assert Box.from_xyxy(b.x, b.y, b.x2, b.y2) == b


def test_normalized_point():
    with pytest.raises(ValueError):
        NormalizedPoint(1.1, 0.5)
    p = NormalizedPoint.from_pixels(-3, 700, (640, 480))
    assert (p.px, p.py) == (0.0, 1.0)


@given(boxes, boxes)
def test_iou_symmetric_and_bounded(a, b):
    assert iou(a, b) == iou(b, a)
    assert 0.0 <= iou(a, b) <= 1.0


@given(boxes)
def test_iou_self_is_one(a):
    assert iou(a, a) == 1.0


@given(boxes, boxes)
def test_area_ratio_reciprocal(a, b):
    assert area_ratio(a, b) * area_ratio(b, a) == pytest.approx(1.0, abs=1e-12)


@given(boxes, st.floats(1.0, 10.0))
def test_expand_preserves_center(b, eta):
    e = expand(b, eta)
    assert e.center == pytest.approx(b.center, rel=1e-12, abs=1e-12)
    assert e.w == pytest.approx(eta * b.w)


def test_u_rho_identity_on_random_pairs():
    rng = np.random.default_rng(7)
    worst = 0.0
    n = 0
    while n < 2000:
        g = Box(*rng.uniform(0, 50, 2), *rng.uniform(1, 40, 2))
        p = Box(g.x + rng.normal(0, 5), g.y + rng.normal(0, 5), *(rng.uniform(0.3, 2.0, 2) * (g.w, g.h)))
        z = intersection_area(p, g)
        if z == 0.0:
            continue
        u, rho = iou(p, g), area_ratio(p, g)
        worst = max(worst, abs((z / g.area) / (rho + 1) - u / (1 + u)))
        n += 1
    assert worst < 1e-9
