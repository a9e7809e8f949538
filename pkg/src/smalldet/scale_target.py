"""Scale-aligned classification targets.

The confidence of a matched prediction blends its IoU ``u`` with a scale
score derived from the area ratio ``rho`` (predicted area over ground-truth
area)::

    r = sqrt(rho)
    v = exp(-theta * (r - 1)**2)
    c = u**beta * v**(1 - beta)
    t = c * s

where ``s`` is the current predicted score. ``t`` is used as a detached
classification target.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Tuple

from .geometry import Box, area_ratio, iou

TARGET_MODES = ("c_times_s", "c_only")


@dataclass(frozen=True)
class ScaleTargetParams:
    beta: float = 0.73
    theta: float = 6.0

    def __post_init__(self) -> None:
        if not 0.0 < self.beta < 1.0:
            raise ValueError(f"beta must lie in (0, 1), got {self.beta}")
        if not self.theta > 0.0:
            raise ValueError(f"theta must be positive, got {self.theta}")


@dataclass(frozen=True)
class ConfidenceBreakdown:
    u: float
    rho: float
    r: float
    v: float
    c: float
    t: float

    def as_dict(self) -> dict:
        return {"u": self.u, "rho": self.rho, "r": self.r, "v": self.v, "c": self.c, "t": self.t}


def _check_rho(rho: float) -> None:
    if not (rho > 0.0 and math.isfinite(rho)):
        raise ValueError(f"area ratio must be a positive finite number, got {rho}")


def _check_u(u: float) -> None:
    if not 0.0 <= u <= 1.0:
        raise ValueError(f"IoU must lie in [0, 1], got {u}")


def scale_score(rho: float, theta: float) -> float:
    _check_rho(rho)
    d = math.sqrt(rho) - 1.0
    return math.exp(-theta * d * d)


def confidence(u: float, rho: float, params: ScaleTargetParams = ScaleTargetParams()) -> float:
    _check_u(u)
    v = scale_score(rho, params.theta)
    return u ** params.beta * v ** (1.0 - params.beta)


def target_confidence(c: float, s: float) -> float:
    if not (0.0 <= c <= 1.0 and 0.0 <= s <= 1.0):
        raise ValueError(f"c and s must lie in [0, 1], got c={c}, s={s}")
    return c * s


def confidence_grad(u: float, rho: float, params: ScaleTargetParams = ScaleTargetParams()) -> Tuple[float, float]:
    """Return ``(dc/du, dc/drho)``.

    ``u`` must lie in the open interval (0, 1): at ``u = 0`` the derivative
    of ``u**beta`` is unbounded for ``beta < 1``.
    """
    if not 0.0 < u < 1.0:
        raise ValueError(f"confidence_grad needs u in (0, 1), got {u}")
    _check_rho(rho)
    beta, theta = params.beta, params.theta
    r = math.sqrt(rho)
    v = math.exp(-theta * (r - 1.0) ** 2)
    c = u ** beta * v ** (1.0 - beta)
    dc_du = beta * u ** (beta - 1.0) * v ** (1.0 - beta)
    # dv/drho = v * (-theta * (r - 1) / r)
    dc_drho = -c * (1.0 - beta) * theta * (r - 1.0) / r
    return dc_du, dc_drho


def breakdown(
    pred: Box,
    gt: Box,
    s: float,
    params: ScaleTargetParams = ScaleTargetParams(),
    target_mode: str = "c_times_s",
) -> ConfidenceBreakdown:
    """Full target chain for one matched (prediction, ground truth) pair."""
    if target_mode not in TARGET_MODES:
        raise ValueError(f"unknown target_mode {target_mode!r}; expected one of {TARGET_MODES}")
    u = iou(pred, gt)
    rho = area_ratio(pred, gt)
    r = math.sqrt(rho)
    v = scale_score(rho, params.theta)
    c = confidence(u, rho, params)
    t = target_confidence(c, s) if target_mode == "c_times_s" else c
    return ConfidenceBreakdown(u=u, rho=rho, r=r, v=v, c=c, t=t)
