"""Loss composition over synthetic fixtures and a plain gradient-descent demo."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from . import deform_sampling as ds
from . import losses
from .config import RunConfig
from .geometry import Box
from .scale_target import breakdown
from .synthgen import QueryBatch, generate_query_batch, generate_scene, stream

MIN_BOX_SIZE = 1e-3
COMPONENTS = ("cls", "reg", "offset", "atten", "total")


class TrainingDiverged(ArithmeticError):
    def __init__(self, step: int, values: Dict[str, float]):
        super().__init__(f"non-finite loss at step {step}: {values}")
        self.step = step
        self.values = values


def build_fixtures(cfg: RunConfig, num_scenes: Optional[int] = None, outside_fraction: Optional[float] = None,
                   perturb_spec=None) -> List[QueryBatch]:
    spec = cfg.scene_spec()
    count = cfg.num_scenes if num_scenes is None else num_scenes
    frac = cfg.outside_fraction if outside_fraction is None else outside_fraction
    pspec = cfg.perturb_spec() if perturb_spec is None else perturb_spec
    out = []
    for i in range(count):
        scene = generate_scene(spec, image_id=i)
        out.append(generate_query_batch(scene, cfg.sampling(), seed=cfg.seed + 7919 * i, hidden_dim=cfg.hidden_dim,
                                        outside_fraction=frac, num_negatives=cfg.num_negatives, perturb_spec=pspec))
    return out


@dataclass
class LossBreakdown:
    components: Dict[str, float]
    per_query: List[dict] = field(default_factory=list)


def _sigmoid(z):
    return losses.sigmoid(z)


def _logit(p):
    p = np.clip(np.asarray(p, dtype=np.float64), 1e-4, 1.0 - 1e-4)
    return np.log(p) - np.log1p(-p)


class ToyModel:
    """Trainable state of the demo: per-query score logits and boxes, per-layer
    sampling offsets and attention logits, and a shared weight generator."""

    def __init__(self, cfg: RunConfig, batches: List[QueryBatch]):
        self.cfg = cfg
        self.batches = batches
        self.score_logits = [_logit(b.scores) for b in batches]
        self.neg_logits = [_logit(b.neg_scores) for b in batches]
        self.boxes = [np.array([p.as_tuple() for p in b.pred_boxes]).reshape(-1, 4) for b in batches]
        self.generator = losses.WeightGeneratorParams.init(cfg.hidden_dim, stream(cfg.seed, "weight_generator"),
                                                           cfg.share_branch_convs)
        self.h_cls = np.concatenate([b.h_cls for b in batches]) if batches else np.zeros((0, cfg.hidden_dim))
        self.h_reg = np.concatenate([b.h_reg for b in batches]) if batches else np.zeros((0, cfg.hidden_dim))

    def _pred_boxes(self, bi: int) -> List[Box]:
        return [Box(x, y, max(w, MIN_BOX_SIZE), max(h, MIN_BOX_SIZE)) for x, y, w, h in self.boxes[bi]]

    def forward(self, training: bool = True, with_grads: bool = True, collect: bool = False):
        cfg = self.cfg
        scale, focal = cfg.scale_target(), cfg.focal()
        etas = cfg.eta
        comp = dict.fromkeys(COMPONENTS[:-1], 0.0)
        per_query = []

        # scores and detached targets
        s_list = [_sigmoid(z) for z in self.score_logits]
        sn_list = [_sigmoid(z) for z in self.neg_logits]
        t_all, s_all, chains = [], [], []
        for bi, batch in enumerate(self.batches):
            preds = self._pred_boxes(bi)
            for qi, gt in enumerate(batch.gt_boxes):
                s = float(s_list[bi][qi])
                ch = breakdown(preds[qi], gt, s, scale, cfg.target_mode)
                chains.append(ch)
                t_all.append(ch.t)
                s_all.append(s)
        t_all = np.array(t_all)
        s_all = np.array(s_all)

        n_pos = len(t_all)
        if n_pos:
            w_cls, w_reg, trace = losses.weight_generator_batch(self.h_cls, self.h_reg, self.generator, training)
            gap = np.abs(t_all - s_all)
            r_cls = w_cls ** (1.0 - gap)
            r_reg = w_reg ** (1.0 - gap)
        else:
            w_cls = w_reg = r_cls = r_reg = np.zeros(0)
            trace = None

        grads = {"score": [], "neg": [], "box": [], "offsets": [], "attn": []}
        d_rcls = np.zeros(n_pos)
        d_rreg = np.zeros(n_pos)
        start = 0
        for bi, batch in enumerate(self.batches):
            n = batch.num_positive
            sl = slice(start, start + n)
            start += n
            positives = list(zip(s_list[bi], t_all[sl], r_cls[sl]))
            comp["cls"] += losses.reweighted_cls_loss(positives, sn_list[bi], focal)
            preds = self._pred_boxes(bi)
            pairs = list(zip(preds, batch.gt_boxes, r_reg[sl]))
            comp["reg"] += losses.reg_loss(pairs)

            # rebuild sampling states from the current offsets/logits
            batch.rebuild_states()
            d_off_layers, d_attn_layers = [], []
            for layer, states in enumerate(batch.states):
                comp["offset"] += ds.offset_loss(states, batch.prev_boxes, etas[layer], batch.geometry)
                comp["atten"] += ds.attention_loss(states, cfg.strict_min)
                if with_grads:
                    d_off_layers.append(np.stack(ds.offset_loss_grad(states, batch.prev_boxes, etas[layer],
                                                                     batch.geometry)) if n else np.zeros((0,)))
                    ga = ds.attention_loss_grad(states, cfg.strict_min)
                    d_attn_layers.append(np.stack([ds.softmax_backward(s.weights, g) for s, g in zip(states, ga)])
                                         if n else np.zeros((0,)))

            if with_grads:
                d_s, d_r, d_neg = losses.reweighted_cls_loss_grad(positives, sn_list[bi], focal)
                grads["score"].append(d_s * s_list[bi] * (1.0 - s_list[bi]))
                grads["neg"].append(d_neg * sn_list[bi] * (1.0 - sn_list[bi]))
                d_rcls[sl] = d_r
                d_box, d_rr = losses.reg_loss_grad(pairs)
                grads["box"].append(d_box)
                d_rreg[sl] = d_rr
                grads["offsets"].append(d_off_layers)
                grads["attn"].append(d_attn_layers)

            if collect:
                for qi in range(n):
                    ch = chains[sl.start + qi]
                    per_query.append({"image_id": bi, "query": qi, **ch.as_dict(), "s": float(s_list[bi][qi]),
                                      "w_cls": float(w_cls[sl.start + qi]), "w_reg": float(w_reg[sl.start + qi]),
                                      "r_cls": float(r_cls[sl.start + qi]), "r_reg": float(r_reg[sl.start + qi])})

        comp["total"] = losses.total_loss(comp["cls"], comp["reg"], comp["offset"], comp["atten"])
        if with_grads and n_pos:
            # discount exponent (the gap) is held fixed
            d_wcls = d_rcls * (1.0 - gap) * w_cls ** (-gap)
            d_wreg = d_rreg * (1.0 - gap) * w_reg ** (-gap)
            grads["generator"] = losses.weight_generator_backward(trace, self.generator, d_wcls, d_wreg)
        grads["trace"] = trace
        return LossBreakdown(comp, per_query), grads

    def step(self, lr: float, grads) -> None:
        for bi, batch in enumerate(self.batches):
            self.score_logits[bi] -= lr * grads["score"][bi]
            self.neg_logits[bi] -= lr * grads["neg"][bi]
            self.boxes[bi] -= lr * grads["box"][bi]
            self.boxes[bi][:, 2:] = np.maximum(self.boxes[bi][:, 2:], MIN_BOX_SIZE)
            for layer in range(len(batch.offsets)):
                if batch.num_positive:
                    batch.offsets[layer] -= lr * grads["offsets"][bi][layer]
                    batch.attn_logits[layer] -= lr * grads["attn"][bi][layer]
        if "generator" in grads:
            for name, arr in self.generator.trainable().items():
                arr -= lr * grads["generator"][name]
            if grads["trace"] is not None and grads["trace"].training:
                losses.update_running_stats(self.generator, grads["trace"])


def compute_losses(cfg: RunConfig, batches: List[QueryBatch]) -> LossBreakdown:
    """All four loss components plus per-positive intermediates, with the
    weight generator at its seeded initialization in inference mode."""
    model = ToyModel(cfg, batches)
    result, _ = model.forward(training=False, with_grads=False, collect=True)
    return result


def train_demo(cfg: RunConfig, steps: Optional[int] = None, learning_rate: Optional[float] = None,
               batches: Optional[List[QueryBatch]] = None) -> List[Dict[str, float]]:
    """Plain gradient descent on the total loss; returns one record per step
    (step 0 is the loss before any update)."""
    steps = cfg.steps if steps is None else steps
    lr = cfg.learning_rate if learning_rate is None else learning_rate
    model = ToyModel(cfg, build_fixtures(cfg) if batches is None else batches)
    curve = []
    for step in range(steps + 1):
        result, grads = model.forward(training=True, with_grads=step < steps)
        values = result.components
        if not all(math.isfinite(v) for v in values.values()):
            raise TrainingDiverged(step, values)
        curve.append({"step": step, **values})
        if step < steps:
            model.step(lr, grads)
    return curve
