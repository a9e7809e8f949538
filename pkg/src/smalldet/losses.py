"""Classification / regression losses and the positive-sample reweighting
network.

All cross-entropies are positive-valued: ``CE(p, q) = -(q log p + (1-q) log(1-p))``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from .geometry import Box

PROB_EPS = 1e-7
BN_EPS = 1e-5


@dataclass(frozen=True)
class FocalParams:
    alpha: float = 0.5
    gamma: float = 1.5

    def __post_init__(self) -> None:
        if not (self.alpha > 0 and self.gamma > 0):
            raise ValueError(f"alpha and gamma must be positive, got {self.alpha}, {self.gamma}")


def clamp_prob(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if not np.all(np.isfinite(p)) or np.any((p < 0.0) | (p > 1.0)):
        raise ValueError("probabilities must be finite and lie in [0, 1]")
    return np.clip(p, PROB_EPS, 1.0 - PROB_EPS)


def cross_entropy(p, q) -> np.ndarray:
    p = clamp_prob(p)
    q = np.asarray(q, dtype=np.float64)
    return -(q * np.log(p) + (1.0 - q) * np.log1p(-p))


# -- classification ---------------------------------------------------------

def _cls_loss(s_pos, t_pos, r_pos, s_neg, params: FocalParams) -> float:
    s_pos = clamp_prob(s_pos)
    s_neg = clamp_prob(s_neg)
    pos = np.sum(np.asarray(r_pos, dtype=np.float64) * cross_entropy(s_pos, t_pos))
    neg = np.sum(s_neg ** params.gamma * cross_entropy(s_neg, 0.0))
    return float(pos + params.alpha * neg)


def _cls_grad(s_pos, t_pos, r_pos, s_neg, params: FocalParams):
    """Returns ``(dL/ds_pos, dL/dr_pos, dL/ds_neg)``; targets are detached."""
    sp = clamp_prob(s_pos)
    sn = clamp_prob(s_neg)
    t_pos = np.asarray(t_pos, dtype=np.float64)
    r_pos = np.asarray(r_pos, dtype=np.float64)
    d_pos = r_pos * (sp - t_pos) / (sp * (1.0 - sp))
    d_r = cross_entropy(sp, t_pos)
    g = params.gamma
    d_neg = params.alpha * (g * sn ** (g - 1.0) * -np.log1p(-sn) + sn ** g / (1.0 - sn))
    return d_pos, d_r, d_neg


def _split(preds: Sequence[Tuple[float, float, bool]]):
    pos = [(p, q) for p, q, is_pos in preds if is_pos]
    neg = [p for p, _, is_pos in preds if not is_pos]
    s_pos = np.array([p for p, _ in pos], dtype=np.float64)
    q_pos = np.array([q for _, q in pos], dtype=np.float64)
    return s_pos, q_pos, np.array(neg, dtype=np.float64)


def vfl_loss(preds: Sequence[Tuple[float, float, bool]], params: FocalParams = FocalParams()) -> float:
    """Varifocal loss over ``(p, q, is_positive)`` triples.

    Positives are weighted by their own target ``q``; negatives by
    ``alpha * p**gamma``.
    """
    s_pos, q_pos, s_neg = _split(preds)
    return _cls_loss(s_pos, q_pos, q_pos, s_neg, params)


def vfl_loss_grad(preds: Sequence[Tuple[float, float, bool]], params: FocalParams = FocalParams()) -> np.ndarray:
    """dL/dp for each entry, in input order."""
    s_pos, q_pos, s_neg = _split(preds)
    d_pos, _, d_neg = _cls_grad(s_pos, q_pos, q_pos, s_neg, params)
    out = np.empty(len(preds))
    flags = np.array([bool(x[2]) for x in preds], dtype=bool)
    out[flags] = d_pos
    out[~flags] = d_neg
    return out


def reweighted_cls_loss(
    positives: Sequence[Tuple[float, float, float]],
    negatives: Sequence[float],
    params: FocalParams = FocalParams(),
) -> float:
    """``sum r * CE(s, t)`` over positives ``(s, t, r)`` plus the focal negative term."""
    arr = np.asarray(positives, dtype=np.float64).reshape(-1, 3)
    return _cls_loss(arr[:, 0], arr[:, 1], arr[:, 2], np.asarray(negatives, dtype=np.float64), params)


def reweighted_cls_loss_grad(
    positives: Sequence[Tuple[float, float, float]],
    negatives: Sequence[float],
    params: FocalParams = FocalParams(),
):
    arr = np.asarray(positives, dtype=np.float64).reshape(-1, 3)
    return _cls_grad(arr[:, 0], arr[:, 1], arr[:, 2], np.asarray(negatives, dtype=np.float64), params)


def discount(w: float, t: float, s: float) -> float:
    """``w ** (1 - |t - s|)``: a large target/prediction gap pushes the weight toward 1."""
    if not 0.0 < w < 1.0:
        raise ValueError(f"weight must lie in (0, 1), got {w}")
    return w ** (1.0 - abs(t - s))


def discount_grad(w: float, t: float, s: float) -> float:
    """d discount / d w with the gap held fixed."""
    if not 0.0 < w < 1.0:
        raise ValueError(f"weight must lie in (0, 1), got {w}")
    e = 1.0 - abs(t - s)
    return e * w ** (e - 1.0)


# -- regression -------------------------------------------------------------

def _iou_with_grad(pred: Box, gt: Box) -> Tuple[float, np.ndarray]:
    """IoU and its gradient w.r.t. ``(x, y, w, h)`` of ``pred``."""
    px1, py1, px2, py2 = pred.x, pred.y, pred.x2, pred.y2
    iw = min(px2, gt.x2) - max(px1, gt.x)
    ih = min(py2, gt.y2) - max(py1, gt.y)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0, np.zeros(4)
    inter = iw * ih
    union = pred.area + gt.area - inter
    # derivatives w.r.t. edges (x1, x2, y1, y2)
    d_iw = np.array([-1.0 if px1 > gt.x else 0.0, 1.0 if px2 < gt.x2 else 0.0, 0.0, 0.0])
    d_ih = np.array([0.0, 0.0, -1.0 if py1 > gt.y else 0.0, 1.0 if py2 < gt.y2 else 0.0])
    d_inter = d_iw * ih + d_ih * iw
    d_area = np.array([-pred.h, pred.h, -pred.w, pred.w])
    d_iou = (d_inter * union - inter * (d_area - d_inter)) / (union * union)
    # edges -> (x, y, w, h): x1 = x, x2 = x + w
    grad = np.array([d_iou[0] + d_iou[1], d_iou[2] + d_iou[3], d_iou[1], d_iou[3]])
    # same rounding guard as geometry.iou
    return (1.0 if pred == gt else min(inter / union, 1.0)), grad


def _l1_center(pred: Box, gt: Box) -> Tuple[float, np.ndarray]:
    a = np.array(pred.to_cxcywh())
    b = np.array(gt.to_cxcywh())
    d = np.sign(a - b)
    # (cx, cy, w, h) -> (x, y, w, h): cx = x + w/2
    grad = np.array([d[0], d[1], 0.5 * d[0] + d[2], 0.5 * d[1] + d[3]])
    return float(np.abs(a - b).sum()), grad


def box_loss(pred: Box, gt: Box) -> float:
    """Unweighted L1 (center/size form) plus ``1 - IoU``."""
    l1, _ = _l1_center(pred, gt)
    u, _ = _iou_with_grad(pred, gt)
    return l1 + (1.0 - u)


def reg_loss(pairs: Sequence[Tuple[Box, Box, float]]) -> float:
    return float(sum(r * box_loss(pred, gt) for pred, gt, r in pairs))


def reg_loss_grad(pairs: Sequence[Tuple[Box, Box, float]]) -> Tuple[np.ndarray, np.ndarray]:
    """Returns ``(dL/d(x,y,w,h) per pair, dL/dr per pair)``."""
    d_box = np.zeros((len(pairs), 4))
    d_r = np.zeros(len(pairs))
    for i, (pred, gt, r) in enumerate(pairs):
        l1, g1 = _l1_center(pred, gt)
        u, gu = _iou_with_grad(pred, gt)
        d_box[i] = r * (g1 - gu)
        d_r[i] = l1 + 1.0 - u
    return d_box, d_r


def total_loss(cls: float, reg: float, offset: float, atten: float) -> float:
    for name, v in (("cls", cls), ("reg", reg), ("offset", offset), ("atten", atten)):
        if v < 0:
            raise ValueError(f"loss component {name} is negative: {v}")
    return cls + reg + offset + atten


# -- weight generator -------------------------------------------------------

@dataclass
class BatchNorm:
    scale: np.ndarray
    shift: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray

    @classmethod
    def identity(cls, n: int) -> "BatchNorm":
        return cls(np.ones(n), np.zeros(n), np.zeros(n), np.ones(n))

    def copy(self) -> "BatchNorm":
        return BatchNorm(self.scale.copy(), self.shift.copy(), self.running_mean.copy(), self.running_var.copy())


@dataclass
class WeightGeneratorParams:
    """Parameters of the reweighting network for hidden width ``C``.

    ``conv1`` maps the concatenated ``(H_reg, H_cls)`` pair (2C) to C,
    ``conv2_*`` maps C to C and ``conv3_*`` maps C to 1. With
    ``share_branch_convs`` the reg branch reuses the cls convolutions (its
    batch norm stays separate).
    """

    conv1: np.ndarray
    bn1: BatchNorm
    conv2_cls: np.ndarray
    conv3_cls: np.ndarray
    bn_cls: BatchNorm
    conv2_reg: Optional[np.ndarray] = None
    conv3_reg: Optional[np.ndarray] = None
    bn_reg: Optional[BatchNorm] = None
    share_branch_convs: bool = False

    def __post_init__(self) -> None:
        c = self.conv1.shape[0]
        if self.conv1.shape != (c, 2 * c):
            raise ValueError(f"conv1 must be (C, 2C), got {self.conv1.shape}")
        if self.bn_reg is None:
            self.bn_reg = BatchNorm.identity(1)
        if self.share_branch_convs:
            self.conv2_reg = None
            self.conv3_reg = None
        elif self.conv2_reg is None or self.conv3_reg is None:
            raise ValueError("unshared weight generator needs conv2_reg and conv3_reg")
        for name in ("conv2_cls", "conv2_reg"):
            arr = getattr(self, name)
            if arr is not None and arr.shape != (c, c):
                raise ValueError(f"{name} must be ({c}, {c}), got {arr.shape}")
        for name in ("conv3_cls", "conv3_reg"):
            arr = getattr(self, name)
            if arr is not None and arr.shape != (1, c):
                raise ValueError(f"{name} must be (1, {c}), got {arr.shape}")
        for name, n in (("bn1", c), ("bn_cls", 1), ("bn_reg", 1)):
            bn = getattr(self, name)
            if bn.scale.shape != (n,) or bn.running_var.shape != (n,):
                raise ValueError(f"{name} must have {n} channels")
            if np.any(bn.running_var <= 0):
                raise ValueError(f"{name} running variance must be positive")

    @property
    def width(self) -> int:
        return self.conv1.shape[0]

    @classmethod
    def init(cls, width: int, rng: np.random.Generator, share_branch_convs: bool = False) -> "WeightGeneratorParams":
        def dense(out_dim, in_dim):
            bound = 1.0 / math.sqrt(in_dim)
            return rng.uniform(-bound, bound, size=(out_dim, in_dim))

        conv1 = dense(width, 2 * width)
        conv2_cls, conv3_cls = dense(width, width), dense(1, width)
        conv2_reg = conv3_reg = None
        if not share_branch_convs:
            conv2_reg, conv3_reg = dense(width, width), dense(1, width)
        return cls(conv1, BatchNorm.identity(width), conv2_cls, conv3_cls, BatchNorm.identity(1),
                   conv2_reg, conv3_reg, BatchNorm.identity(1), share_branch_convs)

    @classmethod
    def zeros(cls, width: int, share_branch_convs: bool = False) -> "WeightGeneratorParams":
        z = np.zeros
        return cls(z((width, 2 * width)), BatchNorm.identity(width), z((width, width)), z((1, width)),
                   BatchNorm.identity(1), None if share_branch_convs else z((width, width)),
                   None if share_branch_convs else z((1, width)), BatchNorm.identity(1), share_branch_convs)

    def branch(self, name: str) -> Tuple[np.ndarray, np.ndarray, BatchNorm]:
        if name == "cls" or self.share_branch_convs:
            conv2, conv3 = self.conv2_cls, self.conv3_cls
        else:
            conv2, conv3 = self.conv2_reg, self.conv3_reg
        return conv2, conv3, self.bn_cls if name == "cls" else self.bn_reg

    # flat views of the trainable tensors (convs and BN affine terms)
    def trainable(self) -> Dict[str, np.ndarray]:
        out = {
            "conv1": self.conv1, "bn1.scale": self.bn1.scale, "bn1.shift": self.bn1.shift,
            "conv2_cls": self.conv2_cls, "conv3_cls": self.conv3_cls,
            "bn_cls.scale": self.bn_cls.scale, "bn_cls.shift": self.bn_cls.shift,
            "bn_reg.scale": self.bn_reg.scale, "bn_reg.shift": self.bn_reg.shift,
        }
        if not self.share_branch_convs:
            out["conv2_reg"] = self.conv2_reg
            out["conv3_reg"] = self.conv3_reg
        return out

    def get_flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.trainable().values()])

    def set_flat(self, flat: np.ndarray) -> None:
        i = 0
        for arr in self.trainable().values():
            n = arr.size
            arr[...] = np.asarray(flat[i:i + n]).reshape(arr.shape)
            i += n
        if i != len(flat):
            raise ValueError(f"flat vector has {len(flat)} entries, expected {i}")

    def flatten_grads(self, grads: Dict[str, np.ndarray]) -> np.ndarray:
        return np.concatenate([grads[k].ravel() for k in self.trainable()])

    def copy(self) -> "WeightGeneratorParams":
        def cp(a):
            return None if a is None else a.copy()

        return WeightGeneratorParams(self.conv1.copy(), self.bn1.copy(), self.conv2_cls.copy(),
                                     self.conv3_cls.copy(), self.bn_cls.copy(), cp(self.conv2_reg),
                                     cp(self.conv3_reg), self.bn_reg.copy(), self.share_branch_convs)


@dataclass
class QueryHiddenPair:
    h_cls: np.ndarray
    h_reg: np.ndarray

    def __post_init__(self) -> None:
        self.h_cls = np.asarray(self.h_cls, dtype=np.float64)
        self.h_reg = np.asarray(self.h_reg, dtype=np.float64)
        if self.h_cls.shape != self.h_reg.shape or self.h_cls.ndim != 1:
            raise ValueError(f"hidden vectors must be equal-length 1-D, got {self.h_cls.shape} and {self.h_reg.shape}")


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def _bn_forward(z: np.ndarray, bn: BatchNorm, training: bool):
    if training:
        mean = z.mean(axis=0)
        var = z.var(axis=0)
    else:
        mean, var = bn.running_mean, bn.running_var
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (z - mean) * inv_std
    return bn.scale * xhat + bn.shift, (xhat, inv_std, mean, var)


def _bn_backward(dy: np.ndarray, bn: BatchNorm, cache, training: bool):
    xhat, inv_std, _, _ = cache
    d_scale = (dy * xhat).sum(axis=0)
    d_shift = dy.sum(axis=0)
    dxhat = dy * bn.scale
    if training:
        n = dy.shape[0]
        dz = inv_std / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
    else:
        dz = dxhat * inv_std
    return dz, d_scale, d_shift


@dataclass
class GeneratorTrace:
    """Intermediate activations of a batched weight-generator pass."""

    training: bool
    h_cls: np.ndarray
    h_reg: np.ndarray
    x: np.ndarray
    bn1_out: np.ndarray
    bn1_cache: tuple
    att: np.ndarray
    branches: Dict[str, dict] = field(default_factory=dict)


def weight_generator_batch(
    h_cls: np.ndarray,
    h_reg: np.ndarray,
    params: WeightGeneratorParams,
    training: bool = False,
) -> Tuple[np.ndarray, np.ndarray, GeneratorTrace]:
    """Per-query weights ``(w_cls, w_reg)`` for a batch of hidden features
    ``(N, C)``. In training mode batch norms use batch statistics (running
    statistics are left untouched; see :func:`update_running_stats`)."""
    h_cls = np.atleast_2d(np.asarray(h_cls, dtype=np.float64))
    h_reg = np.atleast_2d(np.asarray(h_reg, dtype=np.float64))
    c = params.width
    if h_cls.shape != h_reg.shape or h_cls.shape[1] != c:
        raise ValueError(f"hidden features must be (N, {c}), got {h_cls.shape} and {h_reg.shape}")
    x = np.concatenate([h_reg, h_cls], axis=1)
    z1 = x @ params.conv1.T
    bn1_out, bn1_cache = _bn_forward(z1, params.bn1, training)
    att = sigmoid(np.maximum(bn1_out, 0.0))
    trace = GeneratorTrace(training, h_cls, h_reg, x, bn1_out, bn1_cache, att)
    weights = {}
    for name, h in (("cls", h_cls), ("reg", h_reg)):
        conv2, conv3, bn = params.branch(name)
        g = att @ conv2.T
        e = h * g
        z3 = e @ conv3.T
        bn3_out, bn3_cache = _bn_forward(z3, bn, training)
        w = sigmoid(np.maximum(bn3_out, 0.0))[:, 0]
        # the sigmoid rounds to exactly 1.0 for large inputs; keep w < 1
        saturated = w > 1.0 - PROB_EPS
        w = np.where(saturated, 1.0 - PROB_EPS, w)
        trace.branches[name] = {"g": g, "e": e, "bn_out": bn3_out, "bn_cache": bn3_cache, "w": w,
                                "saturated": saturated}
        weights[name] = w
    return weights["cls"], weights["reg"], trace


def weight_generator(pair: QueryHiddenPair, params: WeightGeneratorParams) -> Tuple[float, float]:
    """Inference-mode weights for a single query."""
    w_cls, w_reg, _ = weight_generator_batch(pair.h_cls[None], pair.h_reg[None], params, training=False)
    return float(w_cls[0]), float(w_reg[0])


def weight_generator_backward(
    trace: GeneratorTrace,
    params: WeightGeneratorParams,
    d_w_cls: np.ndarray,
    d_w_reg: np.ndarray,
) -> Dict[str, np.ndarray]:
    """Gradients of a scalar loss w.r.t. every trainable tensor, given
    ``dL/dw_cls`` and ``dL/dw_reg`` per query."""
    grads = {k: np.zeros_like(v) for k, v in params.trainable().items()}
    d_att = np.zeros_like(trace.att)
    for name, d_w in (("cls", d_w_cls), ("reg", d_w_reg)):
        br = trace.branches[name]
        conv2, conv3, bn = params.branch(name)
        w = br["w"][:, None]
        live = (br["bn_out"] > 0.0) & ~br["saturated"][:, None]
        d_pre = np.asarray(d_w, dtype=np.float64)[:, None] * w * (1.0 - w) * live
        d_z3, d_scale, d_shift = _bn_backward(d_pre, bn, br["bn_cache"], trace.training)
        grads[f"bn_{name}.scale"] += d_scale
        grads[f"bn_{name}.shift"] += d_shift
        suffix = "cls" if params.share_branch_convs else name
        grads[f"conv3_{suffix}"] += d_z3.T @ br["e"]
        d_e = d_z3 @ conv3
        h = trace.h_cls if name == "cls" else trace.h_reg
        d_g = d_e * h
        grads[f"conv2_{suffix}"] += d_g.T @ trace.att
        d_att += d_g @ conv2
    d_pre1 = d_att * trace.att * (1.0 - trace.att) * (trace.bn1_out > 0.0)
    d_z1, d_scale, d_shift = _bn_backward(d_pre1, params.bn1, trace.bn1_cache, trace.training)
    grads["bn1.scale"] += d_scale
    grads["bn1.shift"] += d_shift
    grads["conv1"] += d_z1.T @ trace.x
    return grads


def update_running_stats(params: WeightGeneratorParams, trace: GeneratorTrace, momentum: float = 0.9) -> None:
    """Fold a training-mode trace's batch statistics into the running
    statistics: ``running = momentum * running + (1 - momentum) * batch``.

    Mutates ``params``; callers must serialize updates.
    """
    if not trace.training:
        raise ValueError("running statistics can only be updated from a training-mode trace")
    n = trace.x.shape[0]
    pairs = [(params.bn1, trace.bn1_cache), (params.bn_cls, trace.branches["cls"]["bn_cache"]),
             (params.bn_reg, trace.branches["reg"]["bn_cache"])]
    for bn, (_, _, mean, var) in pairs:
        unbiased = var * n / (n - 1) if n > 1 else var
        bn.running_mean[...] = momentum * bn.running_mean + (1.0 - momentum) * mean
        bn.running_var[...] = momentum * bn.running_var + (1.0 - momentum) * unbiased
