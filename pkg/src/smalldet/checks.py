"""Registry of analytic-gradient checks run by ``smalldet gradcheck`` and the
acceptance suite.

Each sampler draws a random point away from the kinks of its function
(L1 corners, hinge boundaries, ReLU zeros, box-edge coincidences) by a
margin far larger than the finite-difference step.
"""
from __future__ import annotations

import time
import zlib
from dataclasses import dataclass
from typing import Any, Callable, Dict, Iterable, List, Optional

import numpy as np

from . import deform_sampling as ds
from . import losses
from .geometry import Box
from .gradcheck import CheckReport, FDSpec, Sampler, check
from .scale_target import ScaleTargetParams, confidence, confidence_grad

DEFAULT_SAMPLES = 1000
FAULT_SCALE = 1.01


@dataclass(frozen=True)
class RegisteredCheck:
    name: str
    f: Callable[[np.ndarray, Any], float]
    grad: Callable[[np.ndarray, Any], np.ndarray]
    sampler: Sampler
    samples: int = DEFAULT_SAMPLES


def _confidence(scale: ScaleTargetParams) -> RegisteredCheck:
    def sampler(rng, spec):
        return np.array([rng.uniform(0.02, 0.98), np.exp(rng.uniform(np.log(0.2), np.log(5.0)))]), None

    return RegisteredCheck(
        "confidence",
        lambda x, _: confidence(x[0], x[1], scale),
        lambda x, _: np.array(confidence_grad(x[0], x[1], scale)),
        sampler,
    )


def _discount() -> RegisteredCheck:
    def sampler(rng, spec):
        return np.array([rng.uniform(0.05, 0.95)]), (rng.uniform(), rng.uniform())

    return RegisteredCheck(
        "discount",
        lambda x, ts: losses.discount(x[0], *ts),
        lambda x, ts: np.array([losses.discount_grad(x[0], *ts)]),
        sampler,
    )


def _vfl(focal: losses.FocalParams) -> RegisteredCheck:
    def sampler(rng, spec):
        n = 6
        flags = rng.random(n) < 0.5
        q = np.where(flags, rng.uniform(0.0, 1.0, n), 0.0)
        return rng.uniform(0.02, 0.98, n), (q, flags)

    def preds(x, ctx):
        q, flags = ctx
        return [(p, qi, bool(fl)) for p, qi, fl in zip(x, q, flags)]

    return RegisteredCheck(
        "vfl_loss",
        lambda x, ctx: losses.vfl_loss(preds(x, ctx), focal),
        lambda x, ctx: losses.vfl_loss_grad(preds(x, ctx), focal),
        sampler,
    )


def _reweighted_cls(focal: losses.FocalParams) -> RegisteredCheck:
    n_pos, n_neg = 4, 4

    def sampler(rng, spec):
        s_pos = rng.uniform(0.02, 0.98, n_pos)
        r_pos = rng.uniform(0.05, 1.0, n_pos)
        s_neg = rng.uniform(0.02, 0.98, n_neg)
        return np.concatenate([s_pos, r_pos, s_neg]), rng.uniform(0.0, 1.0, n_pos)

    def unpack(x, t):
        pos = list(zip(x[:n_pos], t, x[n_pos:2 * n_pos]))
        return pos, x[2 * n_pos:]

    def grad(x, t):
        d_s, d_r, d_neg = losses.reweighted_cls_loss_grad(*unpack(x, t), focal)
        return np.concatenate([d_s, d_r, d_neg])

    return RegisteredCheck(
        "reweighted_cls_loss",
        lambda x, t: losses.reweighted_cls_loss(*unpack(x, t), focal),
        grad,
        sampler,
    )


def _reg() -> RegisteredCheck:
    n = 3
    margin = 1e-2

    def clear(pred: Box, gt: Box) -> bool:
        xs = [pred.x, pred.x2]
        ys = [pred.y, pred.y2]
        gxs = [gt.x, gt.x2]
        gys = [gt.y, gt.y2]
        diffs = [a - b for a in xs for b in gxs] + [a - b for a in ys for b in gys]
        diffs += [pred.center[0] - gt.center[0], pred.center[1] - gt.center[1], pred.w - gt.w, pred.h - gt.h]
        return min(abs(d) for d in diffs) > margin

    def sampler(rng, spec):
        gts, preds = [], []
        while len(gts) < n:
            gt = Box(rng.uniform(0, 40), rng.uniform(0, 40), rng.uniform(4, 30), rng.uniform(4, 30))
            cx, cy = gt.center
            pred = Box.from_cxcywh(cx + rng.uniform(-0.6, 0.6) * gt.w, cy + rng.uniform(-0.6, 0.6) * gt.h,
                                   gt.w * np.exp(rng.uniform(-0.5, 0.5)), gt.h * np.exp(rng.uniform(-0.5, 0.5)))
            if clear(pred, gt):
                gts.append(gt)
                preds.append(pred)
        r = rng.uniform(0.1, 1.0, n)
        x = np.concatenate([np.array([p.as_tuple() for p in preds]).ravel(), r])
        return x, gts

    def pairs(x, gts):
        boxes = x[:4 * n].reshape(n, 4)
        return [(Box(*b), g, r) for b, g, r in zip(boxes, gts, x[4 * n:])]

    def grad(x, gts):
        d_box, d_r = losses.reg_loss_grad(pairs(x, gts))
        return np.concatenate([d_box.ravel(), d_r])

    return RegisteredCheck("reg_loss", lambda x, g: losses.reg_loss(pairs(x, g)), grad, sampler)


_SPR_GEOMETRY = ds.LevelGeometry((64.0, 64.0), ((8, 8), (4, 4)))
_SPR_SHAPE = (2, 2, 2)  # (M, L, K)
_SPR_QUERIES = 2


def _offset() -> RegisteredCheck:
    margin = 1e-3
    shape = (_SPR_QUERIES,) + _SPR_SHAPE + (2,)

    def sampler(rng, spec):
        while True:
            boxes = [Box(rng.uniform(0, 32), rng.uniform(0, 32), rng.uniform(8, 32), rng.uniform(8, 32))
                     for _ in range(_SPR_QUERIES)]
            eta = rng.uniform(1.0, 1.5)
            off = rng.uniform(-4.0, 4.0, shape)
            masks = rng.random(shape[:-1]) < 0.4
            ok = np.abs(off).min() > margin
            for i, b in enumerate(boxes):
                size = np.array([b.w, b.h]) * _SPR_GEOMETRY.scales()
                gap = np.abs(off[i]) - eta * size[None, :, None, :]
                ok = ok and np.abs(gap).min() > margin
            if ok:
                return off.ravel(), (boxes, eta, masks)

    def states(x, ctx):
        boxes, eta, masks = ctx
        off = x.reshape(shape)
        return [ds.SamplingState(off[i], np.full(_SPR_SHAPE, 0.25), masks[i]) for i in range(_SPR_QUERIES)]

    def f(x, ctx):
        return ds.offset_loss(states(x, ctx), ctx[0], ctx[1], _SPR_GEOMETRY)

    def grad(x, ctx):
        return np.concatenate([g.ravel() for g in ds.offset_loss_grad(states(x, ctx), ctx[0], ctx[1], _SPR_GEOMETRY)])

    return RegisteredCheck("offset_loss", f, grad, sampler)


def _attention_clear(weights: np.ndarray, mask: np.ndarray, strict_min: bool, margin: float) -> bool:
    """True when no outside weight sits within ``margin`` of its hinge
    reference and the reference inside point is unambiguous."""
    for q in range(weights.shape[0]):
        for m in range(weights.shape[1]):
            for lv in range(weights.shape[2]):
                a = weights[q, m, lv]
                ins = np.sort(a[mask[q, m, lv]])
                if ins.size >= 2 and np.min(np.diff(ins)) <= margin:
                    return False
                ref = 0.0 if ins.size == 0 else (ins[0] if strict_min else ins[-1])
                outs = a[~mask[q, m, lv]]
                if outs.size and np.min(np.abs(outs - ref)) <= margin:
                    return False
    return True


def _attention(strict_min: bool, through_softmax: bool) -> RegisteredCheck:
    margin = 1e-3
    shape = (_SPR_QUERIES, 2, 2, 3)

    def weights_of(x):
        z = x.reshape(shape)
        if through_softmax:
            return np.stack([ds.softmax_weights(z[i]) for i in range(shape[0])])
        return z

    def sampler(rng, spec):
        while True:
            logits = rng.normal(0.0, 1.5, shape)
            masks = rng.random(shape) < 0.5
            x = logits if through_softmax else np.stack([ds.softmax_weights(lg) for lg in logits])
            # a head with no inside point has a constant loss (its weights sum
            # to 1) under softmax, leaving only FD round-off to compare
            if through_softmax and not masks.any(axis=(2, 3)).all():
                continue
            if _attention_clear(weights_of(x.ravel()), masks, strict_min, margin):
                return x.ravel(), masks

    def states(x, masks):
        a = weights_of(x)
        off = np.zeros(shape + (2,))
        return [ds.SamplingState(off[i], a[i], masks[i]) for i in range(shape[0])]

    def f(x, masks):
        return ds.attention_loss(states(x, masks), strict_min)

    def grad(x, masks):
        sts = states(x, masks)
        g = ds.attention_loss_grad(sts, strict_min)
        if through_softmax:
            g = [ds.softmax_backward(s.weights, gi) for s, gi in zip(sts, g)]
        return np.concatenate([gi.ravel() for gi in g])

    name = "attention_loss" + ("_logits" if through_softmax else "") + ("_strict_min" if strict_min else "")
    return RegisteredCheck(name, f, grad, sampler)


def _weight_generator(share: bool, training: bool, samples: int = 200) -> RegisteredCheck:
    width, batch = 4, 5
    margin = 1e-3

    def sampler(rng, spec):
        while True:
            params = losses.WeightGeneratorParams.init(width, rng, share)
            for bn in (params.bn1, params.bn_cls, params.bn_reg):
                bn.scale[...] = rng.uniform(0.5, 1.5, bn.scale.shape)
                bn.shift[...] = rng.uniform(-0.5, 0.5, bn.shift.shape)
                bn.running_mean[...] = rng.normal(0.0, 0.3, bn.running_mean.shape)
                bn.running_var[...] = rng.uniform(0.5, 2.0, bn.running_var.shape)
            h_cls = rng.normal(size=(batch, width))
            h_reg = rng.normal(size=(batch, width))
            _, _, trace = losses.weight_generator_batch(h_cls, h_reg, params, training)
            pre = [trace.bn1_out] + [b["bn_out"] for b in trace.branches.values()]
            if min(np.abs(p).min() for p in pre) > margin:
                coef = rng.normal(size=(2, batch))
                return params.get_flat(), (params, h_cls, h_reg, coef)

    def f(x, ctx):
        template, h_cls, h_reg, coef = ctx
        params = template.copy()
        params.set_flat(x)
        w_cls, w_reg, _ = losses.weight_generator_batch(h_cls, h_reg, params, training)
        return float(coef[0] @ w_cls + coef[1] @ w_reg)

    def grad(x, ctx):
        template, h_cls, h_reg, coef = ctx
        params = template.copy()
        params.set_flat(x)
        _, _, trace = losses.weight_generator_batch(h_cls, h_reg, params, training)
        return params.flatten_grads(losses.weight_generator_backward(trace, params, coef[0], coef[1]))

    name = "weight_generator_" + ("train" if training else "eval") + ("_shared" if share else "")
    return RegisteredCheck(name, f, grad, sampler, samples)


def build_registry(
    scale: ScaleTargetParams = ScaleTargetParams(),
    focal: losses.FocalParams = losses.FocalParams(),
    strict_min: bool = False,
    share_branch_convs: bool = False,
    fault: Optional[str] = None,
) -> Dict[str, RegisteredCheck]:
    """All registered checks keyed by name. ``fault`` names a check whose
    analytic gradient is deliberately scaled by 1.01 (fault injection)."""
    items = [
        _confidence(scale),
        _discount(),
        _vfl(focal),
        _reweighted_cls(focal),
        _reg(),
        _offset(),
        _attention(strict_min, through_softmax=False),
        _attention(strict_min, through_softmax=True),
        _weight_generator(share_branch_convs, training=True),
        _weight_generator(share_branch_convs, training=False),
    ]
    registry = {c.name: c for c in items}
    if fault is not None:
        if fault not in registry:
            raise KeyError(f"unknown check {fault!r}; known: {sorted(registry)}")
        c = registry[fault]
        registry[fault] = RegisteredCheck(c.name, c.f, lambda x, ctx, g=c.grad: FAULT_SCALE * g(x, ctx),
                                          c.sampler, c.samples)
    return registry


def run_suite(
    registry: Dict[str, RegisteredCheck],
    names: Optional[Iterable[str]] = None,
    samples: Optional[int] = None,
    spec: FDSpec = FDSpec(),
    seed: int = 0,
) -> List[CheckReport]:
    selected = list(registry) if names is None else list(names)
    reports = []
    for name in selected:
        c = registry[name]
        t0 = time.perf_counter()
        rep = check(c.f, c.grad, samples or c.samples, c.sampler, spec, seed=seed + zlib.crc32(name.encode()), name=name)
        rep.seconds = time.perf_counter() - t0
        reports.append(rep)
    return reports
