"""Multi-scale deformable attention for a single query, and the two
sampling-point refinement losses built on top of it.

Coordinates on a feature level are level pixels: cell ``(i, j)`` covers
``[j, j+1) x [i, i+1)`` and its center sits at ``(j + 0.5, i + 0.5)``.
Sampling offsets live in the same level-pixel frame and are added after the
reference point has been mapped onto the level.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .geometry import Box, NormalizedPoint

DEFAULT_ETA_SCHEDULE = (1.5, 1.3, 1.2, 1.1, 1.05, 1.0)


@dataclass
class FeaturePyramid:
    """Feature levels, each an array of shape ``(H_l, W_l, C)``."""

    levels: List[np.ndarray]

    def __post_init__(self) -> None:
        if not self.levels:
            raise ValueError("feature pyramid needs at least one level")
        self.levels = [np.asarray(lv, dtype=np.float64) for lv in self.levels]
        depth = self.levels[0].shape[-1] if self.levels[0].ndim == 3 else None
        for i, lv in enumerate(self.levels):
            if lv.ndim != 3:
                raise ValueError(f"level {i} must be (H, W, C), got shape {lv.shape}")
            if lv.shape[0] < 2 or lv.shape[1] < 2:
                raise ValueError(f"level {i} is {lv.shape[:2]}; bilinear sampling needs at least 2x2")
            if lv.shape[2] != depth:
                raise ValueError(f"level {i} has {lv.shape[2]} channels, expected {depth}")

    @property
    def channels(self) -> int:
        return self.levels[0].shape[2]

    @property
    def shapes(self) -> Tuple[Tuple[int, int], ...]:
        """``(W_l, H_l)`` per level."""
        return tuple((lv.shape[1], lv.shape[0]) for lv in self.levels)


@dataclass(frozen=True)
class SamplingConfig:
    num_heads: int = 2
    num_levels: int = 2
    num_points: int = 4
    eta_schedule: Tuple[float, ...] = DEFAULT_ETA_SCHEDULE

    def __post_init__(self) -> None:
        for name in ("num_heads", "num_levels", "num_points"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        eta = tuple(float(e) for e in self.eta_schedule)
        object.__setattr__(self, "eta_schedule", eta)
        if len(eta) != 6:
            raise ValueError(f"eta_schedule needs one entry per decoder layer (6), got {len(eta)}")
        if any(e < 1.0 for e in eta):
            raise ValueError(f"eta entries must be >= 1, got {eta}")
        if any(a < b for a, b in zip(eta, eta[1:])):
            raise ValueError(f"eta_schedule must be non-increasing, got {eta}")
        if eta[-1] != 1.0:
            raise ValueError(f"final eta must be 1.0, got {eta[-1]}")

    @property
    def shape(self) -> Tuple[int, int, int]:
        return (self.num_heads, self.num_levels, self.num_points)


@dataclass
class SamplingState:
    """Per-query sampling offsets ``(M, L, K, 2)``, attention weights
    ``(M, L, K)`` and, once partitioned, the inside mask ``(M, L, K)``."""

    offsets: np.ndarray
    weights: np.ndarray
    inside_mask: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        self.offsets = np.asarray(self.offsets, dtype=np.float64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.offsets.ndim != 4 or self.offsets.shape[-1] != 2:
            raise ValueError(f"offsets must be (M, L, K, 2), got {self.offsets.shape}")
        if self.weights.shape != self.offsets.shape[:3]:
            raise ValueError(f"weights shape {self.weights.shape} does not match offsets {self.offsets.shape[:3]}")
        if self.inside_mask is not None:
            self.inside_mask = np.asarray(self.inside_mask, dtype=bool)
            if self.inside_mask.shape != self.weights.shape:
                raise ValueError("inside_mask shape does not match weights")


@dataclass
class AttentionParams:
    """Per-head output maps ``W_m`` of shape ``(M, C, C/M)`` and value maps
    ``W'_m`` of shape ``(M, C/M, C)``."""

    out_proj: np.ndarray
    value_proj: np.ndarray

    def __post_init__(self) -> None:
        self.out_proj = np.asarray(self.out_proj, dtype=np.float64)
        self.value_proj = np.asarray(self.value_proj, dtype=np.float64)
        if self.out_proj.ndim != 3 or self.value_proj.ndim != 3:
            raise ValueError("projections must be 3-D (head-major)")
        m, c, d = self.out_proj.shape
        if self.value_proj.shape != (m, d, c):
            raise ValueError(f"value_proj shape {self.value_proj.shape} inconsistent with out_proj {self.out_proj.shape}")
        if d * m != c:
            raise ValueError(f"head width {d} times {m} heads != channels {c}")

    @classmethod
    def random(cls, num_heads: int, channels: int, rng: np.random.Generator) -> "AttentionParams":
        if channels % num_heads:
            raise ValueError(f"channels {channels} not divisible by heads {num_heads}")
        d = channels // num_heads
        out = rng.uniform(-1, 1, size=(num_heads, channels, d)) / np.sqrt(d)
        val = rng.uniform(-1, 1, size=(num_heads, d, channels)) / np.sqrt(channels)
        return cls(out, val)


@dataclass(frozen=True)
class LevelGeometry:
    """Image size ``(W, H)`` and level shapes ``(W_l, H_l)``; converts between
    image pixels and level pixels."""

    image_size: Tuple[float, float]
    level_shapes: Tuple[Tuple[int, int], ...] = field(default_factory=tuple)

    def scale(self, level: int) -> Tuple[float, float]:
        """Level pixels per image pixel along x and y."""
        wl, hl = self.level_shapes[level]
        return wl / self.image_size[0], hl / self.image_size[1]

    def scales(self) -> np.ndarray:
        return np.array([self.scale(i) for i in range(len(self.level_shapes))], dtype=np.float64)


def softmax_weights(logits: np.ndarray) -> np.ndarray:
    """Softmax over the (level, point) axes of an ``(M, L, K)`` logit tensor."""
    logits = np.asarray(logits, dtype=np.float64)
    m = logits.shape[0]
    flat = logits.reshape(m, -1)
    flat = flat - flat.max(axis=1, keepdims=True)
    e = np.exp(flat)
    return (e / e.sum(axis=1, keepdims=True)).reshape(logits.shape)


def softmax_backward(weights: np.ndarray, grad_weights: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. softmax outputs back to the logits."""
    m = weights.shape[0]
    a = weights.reshape(m, -1)
    g = grad_weights.reshape(m, -1)
    return (a * (g - (a * g).sum(axis=1, keepdims=True))).reshape(weights.shape)


def ref_to_level(p: NormalizedPoint, level_shape: Tuple[int, int]) -> Tuple[float, float]:
    wl, hl = level_shape
    return (p.px * wl, p.py * hl)


def bilinear_sample_many(grid: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Zero-padded bilinear lookup at arbitrary level-pixel coordinates.

    ``xs`` and ``ys`` share a shape ``S``; the result has shape ``S + (C,)``.
    """
    h, w, _ = grid.shape
    gx = np.asarray(xs, dtype=np.float64) - 0.5
    gy = np.asarray(ys, dtype=np.float64) - 0.5
    x0 = np.floor(gx)
    y0 = np.floor(gy)
    fx = gx - x0
    fy = gy - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    out = np.zeros(gx.shape + (grid.shape[2],))
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            xi = x0 + dx
            yi = y0 + dy
            valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            vals = grid[np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
            out += (wx * wy * valid)[..., None] * vals
    return out


def bilinear_sample(grid: np.ndarray, q: Tuple[float, float]) -> np.ndarray:
    return bilinear_sample_many(grid, np.array(q[0]), np.array(q[1]))


def sample_locations(p: NormalizedPoint, state: SamplingState, level_shapes: Sequence[Tuple[int, int]]) -> np.ndarray:
    """Absolute level-pixel sample locations, shape ``(M, L, K, 2)``."""
    shapes = np.asarray(level_shapes, dtype=np.float64)
    if shapes.shape[0] != state.offsets.shape[1]:
        raise ValueError(f"state has {state.offsets.shape[1]} levels, geometry has {shapes.shape[0]}")
    ref = np.array([p.px, p.py]) * shapes  # (L, 2)
    return ref[None, :, None, :] + state.offsets


def attention_forward(
    p: NormalizedPoint,
    pyramid: FeaturePyramid,
    state: SamplingState,
    params: AttentionParams,
) -> np.ndarray:
    """Deformable attention output (length-C vector) for one query."""
    m, l, k = state.weights.shape
    if len(pyramid.levels) != l:
        raise ValueError(f"state has {l} levels, pyramid has {len(pyramid.levels)}")
    if params.out_proj.shape[0] != m or params.out_proj.shape[1] != pyramid.channels:
        raise ValueError("attention params do not match heads/channels")
    loc = sample_locations(p, state, pyramid.shapes)
    sampled = np.empty((m, l, k, pyramid.channels))
    for li, grid in enumerate(pyramid.levels):
        sampled[:, li] = bilinear_sample_many(grid, loc[:, li, :, 0], loc[:, li, :, 1])
    values = np.einsum("mdc,mlkc->mlkd", params.value_proj, sampled)
    pooled = np.einsum("mlk,mlkd->md", state.weights, values)
    return np.einsum("mcd,md->c", params.out_proj, pooled)


def partition_points(
    state: SamplingState,
    prev_box: Box,
    p: NormalizedPoint,
    geometry: LevelGeometry,
) -> SamplingState:
    """Fill ``inside_mask``: a point is inside when its location, mapped back to
    image pixels, lies in the closed previous-layer box."""
    loc = sample_locations(p, state, geometry.level_shapes)
    img = loc / geometry.scales()[None, :, None, :]
    x, y = img[..., 0], img[..., 1]
    mask = (x >= prev_box.x) & (x <= prev_box.x2) & (y >= prev_box.y) & (y <= prev_box.y2)
    return replace(state, inside_mask=mask)


def _require_mask(state: SamplingState) -> np.ndarray:
    if state.inside_mask is None:
        raise ValueError("sampling state has no inside_mask; call partition_points first")
    return state.inside_mask


def _offset_terms(state: SamplingState, box: Box, eta: float, geometry: LevelGeometry) -> Tuple[float, np.ndarray]:
    outside = ~_require_mask(state)
    # box size in level pixels, per level: (L, 2)
    size = np.array([box.w, box.h]) * geometry.scales()
    off = state.offsets
    direction = np.where(off >= 0.0, 1.0, -1.0)
    gap = off - direction * (eta * size)[None, :, None, :]
    l1 = np.abs(gap).sum(axis=-1)
    loss = float(np.sum(np.where(outside, l1 * l1, 0.0)))
    grad = np.where(outside[..., None], 2.0 * l1[..., None] * np.sign(gap), 0.0)
    return loss, grad


def offset_loss(
    states: Sequence[SamplingState],
    prev_boxes: Sequence[Box],
    eta: float,
    geometry: LevelGeometry,
) -> float:
    """Squared-L1 pull of outside sampling offsets toward ``eta`` times the
    previous-layer box size (signed per axis like the offset itself).

    Only positive queries should be passed in.
    """
    if eta < 1.0:
        raise ValueError(f"eta must be >= 1, got {eta}")
    if len(states) != len(prev_boxes):
        raise ValueError("states and prev_boxes differ in length")
    return float(sum(_offset_terms(s, b, eta, geometry)[0] for s, b in zip(states, prev_boxes)))


def offset_loss_grad(
    states: Sequence[SamplingState],
    prev_boxes: Sequence[Box],
    eta: float,
    geometry: LevelGeometry,
) -> List[np.ndarray]:
    """Gradients w.r.t. each state's offsets (0 at L1 kinks)."""
    return [_offset_terms(s, b, eta, geometry)[1] for s, b in zip(states, prev_boxes)]


def _attention_terms(state: SamplingState, strict_min: bool) -> Tuple[float, np.ndarray]:
    inside = _require_mask(state)
    a = state.weights
    has_inside = inside.any(axis=2)
    if strict_min:
        ref_idx = np.where(inside, a, np.inf).argmin(axis=2)
    else:
        ref_idx = np.where(inside, a, -np.inf).argmax(axis=2)
    ref = np.take_along_axis(a, ref_idx[..., None], axis=2)[..., 0]
    ref = np.where(has_inside, ref, 0.0)
    excess = a - ref[..., None]
    active = ~inside & (excess > 0.0)
    loss = float(np.sum(np.where(active, excess, 0.0)))
    grad = active.astype(np.float64)
    count = active.sum(axis=2).astype(np.float64)
    mh, lv = np.nonzero(has_inside)
    grad[mh, lv, ref_idx[mh, lv]] -= count[mh, lv]
    return loss, grad


def attention_loss(states: Sequence[SamplingState], strict_min: bool = False) -> float:
    """Hinge on outside attention weights exceeding the best inside weight of
    the same (head, level). An empty inside set uses 0 as the reference."""
    return float(sum(_attention_terms(s, strict_min)[0] for s in states))


def attention_loss_grad(states: Sequence[SamplingState], strict_min: bool = False) -> List[np.ndarray]:
    return [_attention_terms(s, strict_min)[1] for s in states]
