"""Deterministic synthetic scenes, detections and decoder-query fixtures.

Every random draw comes from a PCG64 stream keyed by ``(seed, purpose)``,
so adding a new consumer never shifts the draws of an existing one.
"""
from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np

from .deform_sampling import (
    AttentionParams,
    FeaturePyramid,
    LevelGeometry,
    SamplingConfig,
    SamplingState,
    partition_points,
    softmax_weights,
)
from .evalmap import DetectionRecord, GroundTruthRecord, SizeBucketScheme, assign_bucket, get_scheme
from .geometry import Box, NormalizedPoint, iou

MIN_AREA = 4.0
UNBOUNDED_AREA_FACTOR = 4.0
LEVEL_STRIDES = (8, 16, 32, 64)


def stream(seed: int, purpose: str) -> np.random.Generator:
    """Independent generator for one named purpose under one seed."""
    key = zlib.crc32(purpose.encode("utf-8"))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy=int(seed) & (2 ** 64 - 1), spawn_key=(key,))))


@dataclass(frozen=True)
class SceneSpec:
    image_size: Tuple[int, int] = (512, 512)
    num_objects: int = 8
    size_mix: Mapping[str, float] = field(default_factory=lambda: {"S": 0.6, "M": 0.3, "L": 0.1})
    scheme: str = "visdrone"
    num_categories: int = 3
    seed: int = 0
    aspect_range: Tuple[float, float] = (0.5, 2.0)
    area_ranges: Optional[Mapping[str, Tuple[float, float]]] = None

    def __post_init__(self) -> None:
        if self.num_objects < 0 or self.num_categories < 1:
            raise ValueError("num_objects must be >= 0 and num_categories >= 1")
        if min(self.image_size) <= 0:
            raise ValueError(f"image size must be positive, got {self.image_size}")
        labels = get_scheme(self.scheme).labels()
        unknown = set(self.size_mix) - set(labels)
        if unknown:
            raise ValueError(f"size_mix has buckets {sorted(unknown)} not in scheme {self.scheme}")
        if any(p < 0 for p in self.size_mix.values()) or sum(self.size_mix.values()) <= 0:
            raise ValueError("size_mix probabilities must be non-negative with a positive total")

    def bucket_ranges(self) -> Dict[str, Tuple[float, float]]:
        """Area range ``(lo, hi]`` used for sampling each bucket."""
        scheme = get_scheme(self.scheme)
        out = {}
        for label, lo, hi in scheme.boundaries:
            if self.area_ranges and label in self.area_ranges:
                lo, hi = self.area_ranges[label]
            if math.isinf(hi):
                hi = max(lo, MIN_AREA) * UNBOUNDED_AREA_FACTOR
            out[label] = (lo, hi)
        return out


@dataclass(frozen=True)
class PerturbSpec:
    """How detections deviate from ground truth.

    ``center_jitter`` is the std of the center shift as a fraction of box
    size; ``scale_jitter`` the log-normal sigma on width/height. Scores are
    ``clamp(IoU + N(0, score_noise), 0, 1)``.
    """

    center_jitter: float = 0.1
    scale_jitter: float = 0.1
    score_noise: float = 0.05
    drop_rate: float = 0.0
    clutter_rate: float = 0.0
    clutter_max_score: float = 0.3

    def __post_init__(self) -> None:
        if min(self.center_jitter, self.scale_jitter, self.score_noise, self.clutter_rate) < 0:
            raise ValueError("jitter, noise and clutter rate must be non-negative")
        if not 0.0 <= self.drop_rate <= 1.0:
            raise ValueError(f"drop_rate must lie in [0, 1], got {self.drop_rate}")

    @classmethod
    def identity(cls) -> "PerturbSpec":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0)


@dataclass
class Scene:
    image_id: int
    image_size: Tuple[int, int]
    gts: List[GroundTruthRecord]

    def image_record(self) -> dict:
        return {"id": self.image_id, "width": self.image_size[0], "height": self.image_size[1],
                "file_name": f"synthetic_{self.image_id:06d}.png"}


def _check_fits(spec: SceneSpec, ranges: Dict[str, Tuple[float, float]]) -> None:
    width, height = spec.image_size
    a_min, a_max = spec.aspect_range
    for label, prob in spec.size_mix.items():
        if prob <= 0:
            continue
        lo, hi = ranges[label]
        if hi <= max(lo, 0.0) or hi < MIN_AREA:
            raise ValueError(f"bucket {label} has an empty area range ({lo}, {hi}]")
        # the smallest area just above lo must fit at some admissible aspect
        area = max(lo, MIN_AREA)
        if math.sqrt(area * a_min) > width or math.sqrt(area / a_max) > height:
            raise ValueError(f"bucket {label} areas ({lo}, {hi}] cannot fit in a {width}x{height} image")


def _sample_box(rng: np.random.Generator, label: str, lo: float, hi: float, spec: SceneSpec,
                scheme: SizeBucketScheme) -> Box:
    width, height = spec.image_size
    a_min, a_max = spec.aspect_range
    lo_s = math.sqrt(max(lo, MIN_AREA))
    hi_s = math.sqrt(hi)
    for _ in range(1000):
        side = rng.uniform(lo_s, hi_s)
        area = side * side
        aspect = math.exp(rng.uniform(math.log(a_min), math.log(a_max)))
        w = math.sqrt(area * aspect)
        h = area / w
        if w > width or h > height or not lo < w * h <= hi:
            continue
        x = rng.uniform(0.0, width - w)
        y = rng.uniform(0.0, height - h)
        box = Box(x, y, w, h)
        if spec.area_ranges is None and assign_bucket(box, scheme) != label:
            continue
        return box
    raise ValueError(f"could not place a box of bucket {label} in a {width}x{height} image")


def generate_scene(spec: SceneSpec, image_id: int = 0) -> Scene:
    ranges = spec.bucket_ranges()
    _check_fits(spec, ranges)
    scheme = get_scheme(spec.scheme)
    labels = [k for k in scheme.labels() if spec.size_mix.get(k, 0) > 0]
    probs = np.array([spec.size_mix[k] for k in labels], dtype=np.float64)
    probs /= probs.sum()
    rng = stream(spec.seed, f"scene/{image_id}")
    gts = []
    for _ in range(spec.num_objects):
        label = labels[int(rng.choice(len(labels), p=probs))]
        box = _sample_box(rng, label, *ranges[label], spec, scheme)
        cat = int(rng.integers(1, spec.num_categories + 1))
        gts.append(GroundTruthRecord(image_id, cat, box))
    return Scene(image_id, tuple(spec.image_size), gts)


def generate_scenes(spec: SceneSpec, count: int) -> List[Scene]:
    return [generate_scene(spec, image_id=i) for i in range(count)]


def _jitter_box(gt: Box, dx: float, dy: float, sw: float, sh: float, image_size) -> Box:
    if dx == 0.0 and dy == 0.0 and sw == 0.0 and sh == 0.0:
        return gt
    cx, cy = gt.center
    cx = min(max(cx + dx * gt.w, 0.0), float(image_size[0]))
    cy = min(max(cy + dy * gt.h, 0.0), float(image_size[1]))
    return Box.from_cxcywh(cx, cy, gt.w * math.exp(sw), gt.h * math.exp(sh))


def perturb(scene: Scene, spec: PerturbSpec, seed: int) -> List[DetectionRecord]:
    """Detections for one scene: one jittered box per kept GT plus clutter.

    Jittered centers are clamped to the image so reference points stay valid.
    """
    rng = stream(seed, f"perturb/{scene.image_id}")
    dets = []
    for g in scene.gts:
        # draw everything up front so drop decisions do not shift later boxes
        drop = rng.random() < spec.drop_rate
        dx, dy = rng.normal(0.0, 1.0, 2) * spec.center_jitter
        sw, sh = rng.normal(0.0, 1.0, 2) * spec.scale_jitter
        noise = rng.normal(0.0, 1.0) * spec.score_noise
        if drop:
            continue
        box = _jitter_box(g.box, dx, dy, sw, sh, scene.image_size)
        score = min(max(iou(box, g.box) + noise, 0.0), 1.0)
        dets.append(DetectionRecord(scene.image_id, g.category_id, box, score))
    crng = stream(seed, f"clutter/{scene.image_id}")
    n_clutter = int(crng.poisson(spec.clutter_rate)) if spec.clutter_rate > 0 else 0
    cats = sorted({g.category_id for g in scene.gts}) or [1]
    width, height = scene.image_size
    for _ in range(n_clutter):
        w = crng.uniform(4.0, min(64.0, width))
        h = crng.uniform(4.0, min(64.0, height))
        box = Box(crng.uniform(0, width - w), crng.uniform(0, height - h), w, h)
        cat = cats[int(crng.integers(len(cats)))]
        dets.append(DetectionRecord(scene.image_id, cat, box, float(crng.uniform(0.0, spec.clutter_max_score))))
    return dets


def center_jitter_for_mean_iou(target: float, samples: int = 4000, seed: int = 0) -> float:
    """Center jitter (no scale jitter) whose expected IoU with the source box
    equals ``target``, found by bisection on a common-random-numbers
    simulation. IoU is scale invariant under relative jitter, so a unit box
    suffices."""
    if not 0.0 < target < 1.0:
        raise ValueError(f"target IoU must lie in (0, 1), got {target}")
    z = np.abs(stream(seed, "calibrate").normal(size=(samples, 2)))

    def mean_iou(sigma: float) -> float:
        ox = np.clip(1.0 - sigma * z[:, 0], 0.0, None)
        oy = np.clip(1.0 - sigma * z[:, 1], 0.0, None)
        inter = ox * oy
        return float(np.mean(inter / (2.0 - inter)))

    lo, hi = 0.0, 4.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if mean_iou(mid) > target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


# -- decoder-query fixtures -------------------------------------------------

@dataclass
class QueryBatch:
    """Fixtures for the sampling and reweighting losses.

    Positive queries (one per GT) come first; ``states[layer][i]`` is the
    sampling state of positive query ``i`` in decoder layer ``layer``.
    """

    image_size: Tuple[int, int]
    geometry: LevelGeometry
    pyramid: FeaturePyramid
    attention: AttentionParams
    gt_boxes: List[Box]
    pred_boxes: List[Box]
    scores: np.ndarray
    neg_scores: np.ndarray
    h_cls: np.ndarray
    h_reg: np.ndarray
    references: List[NormalizedPoint]
    prev_boxes: List[Box]
    offsets: List[np.ndarray]   # per layer, (P, M, L, K, 2)
    attn_logits: List[np.ndarray]  # per layer, (P, M, L, K)
    intended_outside: List[np.ndarray]  # per layer, (P, M, L, K) bool
    states: List[List[SamplingState]] = field(default_factory=list)

    @property
    def num_positive(self) -> int:
        return len(self.gt_boxes)

    def rebuild_states(self) -> None:
        """Recompute weights and inside masks from the raw offsets and logits."""
        self.states = []
        for off, logits in zip(self.offsets, self.attn_logits):
            layer = []
            for i in range(self.num_positive):
                st = SamplingState(off[i], softmax_weights(logits[i]))
                layer.append(partition_points(st, self.prev_boxes[i], self.references[i], self.geometry))
            self.states.append(layer)


def level_shapes(image_size: Tuple[int, int], num_levels: int) -> Tuple[Tuple[int, int], ...]:
    if num_levels > len(LEVEL_STRIDES):
        raise ValueError(f"at most {len(LEVEL_STRIDES)} levels supported")
    width, height = image_size
    return tuple((max(2, math.ceil(width / s)), max(2, math.ceil(height / s))) for s in LEVEL_STRIDES[:num_levels])


def _draw_offsets(rng: np.random.Generator, size: np.ndarray, shape, outside_fraction: float):
    """Offsets relative to the box center in level pixels. ``size`` is the
    box size per level, shape ``(L, 2)``."""
    m, l, k = shape
    outside = rng.random((m, l, k)) < outside_fraction
    half = 0.5 * size[None, :, None, :]
    inside_off = rng.uniform(-0.9, 0.9, (m, l, k, 2)) * half
    # outside: one axis beyond the half extent by a margin, the other free
    axis = rng.integers(0, 2, (m, l, k))
    sign = np.where(rng.random((m, l, k, 2)) < 0.5, -1.0, 1.0)
    far = half * (1.2 + 3.0 * rng.random((m, l, k, 2))) + 0.25
    free = rng.uniform(-1.5, 1.5, (m, l, k, 2)) * half
    pick = np.stack([axis == 0, axis == 1], axis=-1)
    outside_off = np.where(pick, sign * far, free)
    off = np.where(outside[..., None], outside_off, inside_off)
    return off, outside


def generate_query_batch(
    scene: Scene,
    config: SamplingConfig,
    seed: int,
    hidden_dim: int = 8,
    outside_fraction: float = 0.25,
    num_negatives: int = 4,
    perturb_spec: PerturbSpec = PerturbSpec(drop_rate=0.0, clutter_rate=0.0),
) -> QueryBatch:
    """One positive query per GT (reference point at its predicted box center)
    plus ``num_negatives`` unmatched queries."""
    if not 0.0 <= outside_fraction <= 1.0:
        raise ValueError(f"outside_fraction must lie in [0, 1], got {outside_fraction}")
    if hidden_dim % config.num_heads:
        raise ValueError(f"hidden_dim {hidden_dim} not divisible by {config.num_heads} heads")
    spec = PerturbSpec(perturb_spec.center_jitter, perturb_spec.scale_jitter, perturb_spec.score_noise, 0.0, 0.0)
    dets = perturb(scene, spec, seed)
    gt_boxes = [g.box for g in scene.gts]
    pred_boxes = [d.box for d in dets]
    scores = np.array([d.score for d in dets], dtype=np.float64)

    shapes = level_shapes(scene.image_size, config.num_levels)
    geometry = LevelGeometry(tuple(float(v) for v in scene.image_size), shapes)
    prng = stream(seed, "pyramid")
    pyramid = FeaturePyramid([prng.normal(size=(h, w, hidden_dim)) for w, h in shapes])
    attention = AttentionParams.random(config.num_heads, hidden_dim, stream(seed, "attention"))

    hrng = stream(seed, "hidden")
    n = len(gt_boxes)
    h_cls = hrng.normal(size=(n, hidden_dim))
    h_reg = hrng.normal(size=(n, hidden_dim))
    neg_scores = stream(seed, "negatives").uniform(0.01, 0.3, num_negatives)

    references = [NormalizedPoint.from_pixels(*b.center, scene.image_size) for b in pred_boxes]
    scales = geometry.scales()
    offsets, logits, intended = [], [], []
    for layer in range(len(config.eta_schedule)):
        orng = stream(seed, f"offsets/{layer}")
        layer_off = np.zeros((n,) + config.shape + (2,))
        layer_out = np.zeros((n,) + config.shape, dtype=bool)
        for i, b in enumerate(pred_boxes):
            size = np.array([b.w, b.h]) * scales
            layer_off[i], layer_out[i] = _draw_offsets(orng, size, config.shape, outside_fraction)
        offsets.append(layer_off)
        intended.append(layer_out)
        logits.append(stream(seed, f"attn_logits/{layer}").normal(size=(n,) + config.shape))

    batch = QueryBatch(tuple(scene.image_size), geometry, pyramid, attention, gt_boxes, pred_boxes, scores,
                       neg_scores, h_cls, h_reg, references, list(pred_boxes), offsets, logits, intended)
    batch.rebuild_states()
    return batch
