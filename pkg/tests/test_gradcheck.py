import numpy as np
import pytest

from smalldet import checks
from smalldet.gradcheck import FDSpec, NonFiniteEvaluation, check, fd_gradient, relative_error
from smalldet.scale_target import ScaleTargetParams, confidence, confidence_grad


def test_constant_function():
    np.testing.assert_array_equal(fd_gradient(lambda x: 4.2, np.array([1.0, -3.0, 1e4])), np.zeros(3))


def test_quadratic():
    g = fd_gradient(lambda x: float(x @ x), np.array([3.0]))
    assert g[0] == pytest.approx(6.0, abs=1e-8)


def test_cross_check_with_confidence_grad():
    params = ScaleTargetParams(0.73, 6.0)
    numeric = fd_gradient(lambda x: confidence(x[0], x[1], params), np.array([0.5, 1.2]))
    assert relative_error(confidence_grad(0.5, 1.2, params), numeric) < 1e-4


def test_non_finite_value_reported():
    with pytest.raises(NonFiniteEvaluation) as info, np.errstate(invalid="ignore"):
        fd_gradient(lambda x: float(np.sqrt(x[1])), np.array([1.0, 0.0]))
    assert info.value.index == 1


def test_relative_error_floor():
    assert relative_error([0.0], [1e-10]) == pytest.approx(1e-2)
    assert relative_error([], []) == 0.0
    with pytest.raises(ValueError):
        relative_error([1.0], [1.0, 2.0])


def _smooth_sampler(rng, spec):
    return rng.uniform(-2, 2, 3), None


def _smooth(x, _):
    return float(np.sin(x[0]) * np.exp(x[1]) + x[2] ** 3)


def _smooth_grad(x, _):
    return np.array([np.cos(x[0]) * np.exp(x[1]), np.sin(x[0]) * np.exp(x[1]), 3 * x[2] ** 2])


def test_check_self_comparison_passes():
    rep = check(_smooth, lambda x, c: fd_gradient(lambda z: _smooth(z, c), x), 50, _smooth_sampler)
    assert rep.passed and rep.max_rel_error == 0.0


def test_planted_fault_detected():
    rep = check(_smooth, lambda x, c: 1.01 * _smooth_grad(x, c), 100, _smooth_sampler, name="planted")
    assert not rep.passed
    assert rep.failure_count == 100
    assert rep.max_rel_error == pytest.approx(1e-2 / 1.01, rel=1e-3)
    assert rep.failures[0]["sample"] == 0 and len(rep.failures[0]["point"]) == 3


def test_check_deterministic():
    a = check(_smooth, _smooth_grad, 40, _smooth_sampler, seed=3).to_dict()
    b = check(_smooth, _smooth_grad, 40, _smooth_sampler, seed=3).to_dict()
    assert a == b


@pytest.mark.parametrize("f,grad,x", [
    (lambda x: float(np.sin(x[0]) * x[1] ** 2), lambda x: np.array([np.cos(x[0]) * x[1] ** 2, 2 * np.sin(x[0]) * x[1]]),
     np.array([0.7, 1.3])),
    (lambda x: float(np.exp(0.5 * x[0]) + x[0] * x[1]), lambda x: np.array([0.5 * np.exp(0.5 * x[0]) + x[1], x[0]]),
     np.array([0.3, -0.8])),
    (lambda x: float(np.log1p(x[0] ** 2) * np.cos(x[1])),
     lambda x: np.array([2 * x[0] / (1 + x[0] ** 2) * np.cos(x[1]), -np.log1p(x[0] ** 2) * np.sin(x[1])]),
     np.array([0.9, 0.4])),
])
def test_richardson_quadratic_convergence(f, grad, x):
    err_coarse = np.abs(fd_gradient(f, x, FDSpec(eps=1e-3)) - grad(x)).max()
    err_fine = np.abs(fd_gradient(f, x, FDSpec(eps=1e-4)) - grad(x)).max()
    # a tenfold smaller step should cut the truncation error about a hundredfold
    assert 50 < err_coarse / err_fine < 200


def test_registry_contents():
    names = set(checks.build_registry())
    for required in ("confidence", "discount", "vfl_loss", "reweighted_cls_loss", "reg_loss", "offset_loss",
                     "attention_loss"):
        assert required in names
    with pytest.raises(KeyError):
        checks.build_registry(fault="nope")


@pytest.mark.parametrize("name", sorted(checks.build_registry()))
def test_each_check_passes_on_a_sample(name):
    (rep,) = checks.run_suite(checks.build_registry(), [name], samples=20, seed=1)
    assert rep.passed, rep.failures[:1]


def test_variant_registries_pass():
    reg = checks.build_registry(strict_min=True, share_branch_convs=True)
    names = [n for n in reg if n.startswith(("attention", "weight_generator"))]
    assert all(r.passed for r in checks.run_suite(reg, names, samples=20, seed=2))


def test_fault_flag_breaks_only_that_check():
    reg = checks.build_registry(fault="reg_loss")
    reps = {r.name: r for r in checks.run_suite(reg, ["reg_loss", "discount"], samples=10)}
    assert not reps["reg_loss"].passed and reps["discount"].passed
