"""Central finite differences and analytic-gradient checking."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable, List, Tuple

import numpy as np


@dataclass(frozen=True)
class FDSpec:
    eps: float = 1e-5
    tolerance: float = 1e-3
    kink_radius: float = 1e-4

    def __post_init__(self) -> None:
        if not (self.eps > 0 and self.tolerance > 0 and self.kink_radius >= 0):
            raise ValueError("eps and tolerance must be positive, kink_radius non-negative")


class NonFiniteEvaluation(ArithmeticError):
    def __init__(self, index: int, value: float):
        super().__init__(f"non-finite function value {value} when perturbing coordinate {index}")
        self.index = index
        self.value = value


def fd_gradient(f: Callable[[np.ndarray], float], x, spec: FDSpec = FDSpec()) -> np.ndarray:
    """Central differences with a per-coordinate step ``eps * max(1, |x_i|)``."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        h = spec.eps * max(1.0, abs(orig))
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        for v in (fp, fm):
            if not math.isfinite(v):
                raise NonFiniteEvaluation(i, v)
        g[i] = (fp - fm) / ((orig + h) - (orig - h))
    return grad


def relative_error(analytic, numeric) -> float:
    """``max|a - b| / max(max|a|, max|b|, 1e-8)`` over the whole vector."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    b = np.asarray(numeric, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"gradient shapes differ: {a.shape} vs {b.shape}")
    if a.size == 0:
        return 0.0
    scale = max(np.abs(a).max(), np.abs(b).max(), 1e-8)
    return float(np.abs(a - b).max() / scale)


@dataclass
class CheckReport:
    name: str
    samples: int
    max_rel_error: float
    tolerance: float
    failure_count: int = 0
    failures: List[dict] = field(default_factory=list)
    seconds: float = 0.0  # wall clock, kept out of to_dict() so reports stay reproducible

    @property
    def passed(self) -> bool:
        return self.failure_count == 0

    def to_dict(self) -> dict:
        return {"name": self.name, "samples": self.samples, "max_rel_error": self.max_rel_error,
                "tolerance": self.tolerance, "passed": self.passed, "failure_count": self.failure_count,
                "failures": self.failures}


# a sampler returns (point, context); f and grad take both
Sampler = Callable[[np.random.Generator, FDSpec], Tuple[np.ndarray, Any]]


def check(
    f: Callable[[np.ndarray, Any], float],
    analytic_grad: Callable[[np.ndarray, Any], np.ndarray],
    samples: int,
    sampler: Sampler,
    spec: FDSpec = FDSpec(),
    seed: int = 0,
    name: str = "",
    max_failures_listed: int = 5,
) -> CheckReport:
    """Compare ``analytic_grad`` to central differences at ``samples`` points.

    The sampler is responsible for staying clear of kinks.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    failures = []
    n_failed = 0
    for k in range(samples):
        x, ctx = sampler(rng, spec)
        numeric = fd_gradient(lambda z: f(z, ctx), x, spec)
        analytic = np.asarray(analytic_grad(np.array(x, dtype=np.float64), ctx), dtype=np.float64)
        err = relative_error(analytic, numeric)
        worst = max(worst, err)
        if err > spec.tolerance:
            n_failed += 1
            if len(failures) < max_failures_listed:
                failures.append({"sample": k, "point": np.asarray(x).ravel().tolist(),
                                 "analytic": analytic.ravel().tolist(), "numeric": numeric.ravel().tolist(),
                                 "rel_error": err})
    return CheckReport(name, samples, worst, spec.tolerance, n_failed, failures)
