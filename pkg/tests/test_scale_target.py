import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from smalldet.geometry import Box
from smalldet.gradcheck import fd_gradient, relative_error
from smalldet.scale_target import (
    ScaleTargetParams,
    breakdown,
    confidence,
    confidence_grad,
    scale_score,
    target_confidence,
)

DEFAULT = ScaleTargetParams()


def test_scale_score_examples():
    assert scale_score(1.0, 3.7) == 1.0
    assert scale_score(4.0, 6.0) == pytest.approx(2.4787521766663585e-3, rel=1e-12)
    assert scale_score(0.25, 6.0) == pytest.approx(0.22313016014842982, rel=1e-12)


def test_confidence_examples():
    assert confidence(1.0, 1.0, ScaleTargetParams(0.3, 2.0)) == 1.0
    assert confidence(0.0, 1.0) == 0.0
    assert confidence(0.5, 1.0) == pytest.approx(0.6029039138453802, rel=1e-12)


def test_target_confidence_examples():
    assert target_confidence(1.0, 0.7) == 0.7
    assert target_confidence(0.0, 0.9) == 0.0
    assert target_confidence(0.6, 0.5) == pytest.approx(0.30, abs=1e-15)


def test_confidence_grad_example():
    du, drho = confidence_grad(0.5, 1.0)
    assert du == pytest.approx(0.8802397142142551, rel=1e-12)
    assert drho == 0.0


@pytest.mark.parametrize("beta,theta", [(0.0, 6.0), (1.0, 6.0), (0.5, 0.0), (0.5, -1.0)])
def test_params_validated(beta, theta):
    with pytest.raises(ValueError):
        ScaleTargetParams(beta, theta)


def test_domain_errors():
    with pytest.raises(ValueError):
        confidence(1.2, 1.0)
    with pytest.raises(ValueError):
        confidence(0.5, 0.0)
    with pytest.raises(ValueError):
        target_confidence(0.5, 1.5)


@given(st.floats(0.05, 20.0), st.floats(0.01, 0.98), st.floats(0.001, 0.01))
def test_confidence_increasing_in_u(rho, u, du):
    assert confidence(u + du, rho) > confidence(u, rho)


@given(st.floats(0.01, 1.0), st.floats(0.01, 0.9))
def test_confidence_peaks_at_matched_scale(u, d):
    peak = confidence(u, 1.0)
    assert confidence(u, (1 + d) ** 2) < peak
    assert confidence(u, (1 - d) ** 2) < peak
    assert confidence(u, (1 + 2 * d) ** 2) < confidence(u, (1 + d) ** 2)


@given(st.floats(0.0, 0.99), st.floats(0.1, 20.0))
def test_scale_score_symmetric_in_sqrt_ratio(d, theta):
    assert scale_score((1 + d) ** 2, theta) == pytest.approx(scale_score((1 - d) ** 2, theta), rel=1e-12)


def test_confidence_grad_matches_finite_differences():
    rng = np.random.default_rng(3)
    for _ in range(1000):
        u, rho = rng.uniform(0.05, 0.99), math.exp(rng.uniform(-2, 2))
        params = ScaleTargetParams(rng.uniform(0.1, 0.9), rng.uniform(0.5, 10))
        numeric = fd_gradient(lambda x: confidence(x[0], x[1], params), [u, rho])
        assert relative_error(confidence_grad(u, rho, params), numeric) < 1e-4


def test_breakdown_chain():
    gt = Box(10, 10, 20, 10)
    pred = Box(12, 10, 20, 20)
    ch = breakdown(pred, gt, 0.8)
    assert ch.rho == 2.0
    assert ch.r == pytest.approx(math.sqrt(2.0))
    assert ch.u == pytest.approx(180 / 420)
    assert ch.c == pytest.approx(ch.u ** 0.73 * ch.v ** 0.27)
    assert ch.t == pytest.approx(0.8 * ch.c)
    assert breakdown(pred, gt, 0.8, target_mode="c_only").t == ch.c
    with pytest.raises(ValueError):
        breakdown(pred, gt, 0.8, target_mode="other")


def test_perfect_prediction_gives_unit_confidence():
    b = Box(1, 2, 3, 4)
    ch = breakdown(b, b, 0.4)
    assert (ch.u, ch.rho, ch.c, ch.t) == (1.0, 1.0, 1.0, 0.4)
