"""COCO-style box AP with small-object size buckets.

AP is the area under the 101-point interpolated precision/recall curve,
averaged over categories and then over IoU thresholds 0.50:0.05:0.95.
Bucket APs restrict ground truth to an area range and ignore detections
that match out-of-range ground truth, or that are unmatched and themselves
fall outside the range.
"""
from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Hashable, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .geometry import Box, iou

# literal two-decimal thresholds so that an IoU of exactly 0.6 passes 0.60
IOU_THRESHOLDS: Tuple[float, ...] = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
DEFAULT_MAX_DETS = 100


@dataclass(frozen=True)
class GroundTruthRecord:
    image_id: Hashable
    category_id: int
    box: Box


@dataclass(frozen=True)
class DetectionRecord:
    image_id: Hashable
    category_id: int
    box: Box
    score: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"detection score must lie in [0, 1], got {self.score}")


@dataclass(frozen=True)
class SizeBucketScheme:
    name: str
    boundaries: Tuple[Tuple[str, float, float], ...]  # (label, lower exclusive, upper inclusive)

    def labels(self) -> List[str]:
        return [b[0] for b in self.boundaries]


VISDRONE = SizeBucketScheme("visdrone", (("S", 0.0, 32.0 ** 2), ("M", 32.0 ** 2, 96.0 ** 2), ("L", 96.0 ** 2, math.inf)))
SODA_D = SizeBucketScheme("soda_d", (("ES", 0.0, 144.0), ("RS", 144.0, 400.0), ("GS", 400.0, 1024.0), ("N", 1024.0, 2000.0)))
SCHEMES = {"visdrone": VISDRONE, "soda_d": SODA_D, "soda-d": SODA_D}


def get_scheme(name: str) -> SizeBucketScheme:
    try:
        return SCHEMES[name.lower()]
    except KeyError:
        raise ValueError(f"unknown size bucket scheme {name!r}; expected visdrone or soda-d") from None


def assign_bucket(box: Box, scheme: SizeBucketScheme) -> Optional[str]:
    a = box.area
    for label, lo, hi in scheme.boundaries:
        if lo < a <= hi:
            return label
    return None


def match_detections(
    gts: Sequence[Box],
    dets: Sequence[Tuple[Box, float]],
    iou_threshold: float,
) -> List[Tuple[int, Optional[int]]]:
    """Greedy one-to-one matching for a single image and category.

    Returns ``(det_index, gt_index or None)`` in processing order (score
    descending, input order among ties). Each detection takes the unmatched
    GT of highest IoU >= threshold; IoU ties go to the lowest GT index.
    """
    order = sorted(range(len(dets)), key=lambda i: -dets[i][1])
    taken = [False] * len(gts)
    out = []
    for di in order:
        best, best_iou = None, iou_threshold
        for gi, g in enumerate(gts):
            if taken[gi]:
                continue
            v = iou(dets[di][0], g)
            if v >= best_iou and (best is None or v > best_iou):
                best, best_iou = gi, v
        if best is not None:
            taken[best] = True
        out.append((di, best))
    return out


def _evaluate_cell(gts: List[Box], dets: List[Tuple[Box, float]], area_range, thresholds):
    """Match one (image, category) cell at every threshold.

    Mirrors the COCO convention: in-range GTs are matched first, ignored GTs
    only absorb detections that found no in-range partner.
    Returns (scores, matched[T, D], ignored[T, D], num_valid_gt).
    """
    lo, hi = area_range
    gt_ignore = [not (lo < g.area <= hi) for g in gts]
    g_order = sorted(range(len(gts)), key=lambda i: gt_ignore[i])  # stable: valid first
    gts = [gts[i] for i in g_order]
    gt_ignore = [gt_ignore[i] for i in g_order]
    d_order = sorted(range(len(dets)), key=lambda i: -dets[i][1])
    dets = [dets[i] for i in d_order]
    ious = np.array([[iou(d, g) for g in gts] for d, _ in dets]).reshape(len(dets), len(gts))

    t_count, d_count = len(thresholds), len(dets)
    matched = np.zeros((t_count, d_count), dtype=bool)
    ignored = np.zeros((t_count, d_count), dtype=bool)
    for ti, thr in enumerate(thresholds):
        taken = [False] * len(gts)
        for di in range(d_count):
            m, best = -1, thr
            for gi in range(len(gts)):
                if taken[gi]:
                    continue
                if m > -1 and not gt_ignore[m] and gt_ignore[gi]:
                    break
                v = ious[di, gi]
                if v < best or (m > -1 and v == best and gt_ignore[m] == gt_ignore[gi]):
                    continue
                m, best = gi, v
            if m > -1:
                taken[m] = True
                matched[ti, di] = True
                ignored[ti, di] = gt_ignore[m]
            else:
                d_area = dets[di][0].area
                ignored[ti, di] = not (lo < d_area <= hi)
    scores = np.array([s for _, s in dets], dtype=np.float64)
    return scores, matched, ignored, sum(1 for x in gt_ignore if not x)


def _interpolated_ap(tp: np.ndarray, fp: np.ndarray, num_gt: int) -> float:
    tp_sum = np.cumsum(tp, dtype=np.float64)
    fp_sum = np.cumsum(fp, dtype=np.float64)
    recall = tp_sum / num_gt
    precision = tp_sum / np.maximum(tp_sum + fp_sum, np.finfo(np.float64).eps)
    # monotone envelope from the right
    for i in range(len(precision) - 1, 0, -1):
        if precision[i] > precision[i - 1]:
            precision[i - 1] = precision[i]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    q = np.zeros(len(RECALL_POINTS))
    ok = idx < len(precision)
    q[ok] = precision[idx[ok]]
    return float(q.mean())


def _group(records) -> Dict[Tuple[Hashable, int], list]:
    out = defaultdict(list)
    for r in records:
        out[(r.image_id, r.category_id)].append(r)
    return out


def ap_table(
    gts: Sequence[GroundTruthRecord],
    dets: Sequence[DetectionRecord],
    thresholds: Sequence[float] = IOU_THRESHOLDS,
    area_range: Tuple[float, float] = (0.0, math.inf),
    max_dets: int = DEFAULT_MAX_DETS,
) -> Dict[int, np.ndarray]:
    """Per-category AP at each threshold. Categories with no in-range GT are
    omitted."""
    g_cells = _group(gts)
    d_cells = _group(dets)
    categories = sorted({k[1] for k in g_cells} | {k[1] for k in d_cells})
    cells_by_cat = defaultdict(list)
    for key in sorted(set(g_cells) | set(d_cells), key=lambda k: (k[1], str(k[0]))):
        cells_by_cat[key[1]].append(key)
    out = {}
    for cat in categories:
        all_scores, all_matched, all_ignored, n_gt = [], [], [], 0
        for key in cells_by_cat[cat]:
            cell_dets = sorted(d_cells.get(key, []), key=lambda d: -d.score)[:max_dets]
            scores, matched, ignored, n_valid = _evaluate_cell(
                [g.box for g in g_cells.get(key, [])],
                [(d.box, d.score) for d in cell_dets],
                area_range, thresholds)
            all_scores.append(scores)
            all_matched.append(matched)
            all_ignored.append(ignored)
            n_gt += n_valid
        if n_gt == 0:
            continue
        scores = np.concatenate(all_scores)
        order = np.argsort(-scores, kind="mergesort")
        matched = np.concatenate(all_matched, axis=1)[:, order]
        ignored = np.concatenate(all_ignored, axis=1)[:, order]
        per_thr = np.zeros(len(thresholds))
        for ti in range(len(thresholds)):
            keep = ~ignored[ti]
            tp = matched[ti][keep]
            per_thr[ti] = _interpolated_ap(tp, ~tp, n_gt) if tp.size else 0.0
        out[cat] = per_thr
    return out


def _mean_ap(table: Dict[int, np.ndarray], column: Optional[int] = None) -> Optional[float]:
    if not table:
        return None
    stacked = np.stack(list(table.values()))
    if column is not None:
        return float(stacked[:, column].mean())
    return float(stacked.mean(axis=0).mean())


def average_precision(
    gts: Sequence[GroundTruthRecord],
    dets: Sequence[DetectionRecord],
    scheme: Optional[SizeBucketScheme] = None,
    thresholds: Sequence[float] = IOU_THRESHOLDS,
    max_dets: int = DEFAULT_MAX_DETS,
    buckets: Optional[Iterable[str]] = None,
) -> dict:
    """AP report: ``AP``, ``AP50``, ``AP75``, ``AP_<bucket>`` per bucket and
    ``per_category``. Undefined values (no ground truth) are ``None``."""
    thresholds = tuple(thresholds)
    table = ap_table(gts, dets, thresholds, max_dets=max_dets)
    report = {"AP": _mean_ap(table)}
    for key, thr in (("AP50", 0.5), ("AP75", 0.75)):
        report[key] = _mean_ap(table, thresholds.index(thr)) if thr in thresholds else None
    if scheme is not None:
        wanted = set(buckets) if buckets is not None else None
        for label, lo, hi in scheme.boundaries:
            if wanted is not None and label not in wanted:
                continue
            report[f"AP_{label}"] = _mean_ap(ap_table(gts, dets, thresholds, (lo, hi), max_dets))
    report["per_category"] = {str(k): float(v.mean()) for k, v in sorted(table.items())}
    return report


# -- COCO-format files ------------------------------------------------------

class AnnotationError(ValueError):
    """Malformed or inconsistent annotation / detection file."""


def _read_json(path) -> object:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise AnnotationError(f"cannot read {path}: {exc.strerror}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise AnnotationError(f"{path}: invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None


def _parse_bbox(raw, where: str) -> Box:
    if not isinstance(raw, (list, tuple)) or len(raw) != 4:
        raise AnnotationError(f"{where}: bbox must be [x, y, w, h], got {raw!r}")
    try:
        return Box(*(float(v) for v in raw))
    except (TypeError, ValueError) as exc:
        raise AnnotationError(f"{where}: {exc}") from None


def load_coco_gt(path) -> Tuple[List[GroundTruthRecord], Dict[int, str], Dict[Hashable, dict]]:
    """Parse a COCO ``images``/``annotations``/``categories`` file."""
    data = _read_json(path)
    if not isinstance(data, dict):
        raise AnnotationError(f"{path}: top level must be an object")
    for key in ("images", "annotations", "categories"):
        if not isinstance(data.get(key), list):
            raise AnnotationError(f"{path}: missing or non-list '{key}'")
    categories = {}
    for i, c in enumerate(data["categories"]):
        try:
            categories[int(c["id"])] = str(c.get("name", c["id"]))
        except (KeyError, TypeError, ValueError):
            raise AnnotationError(f"{path}: categories[{i}] malformed: {c!r}") from None
    images = {}
    for i, im in enumerate(data["images"]):
        if not isinstance(im, dict) or "id" not in im:
            raise AnnotationError(f"{path}: images[{i}] lacks an id")
        images[im["id"]] = im
    records = []
    for i, ann in enumerate(data["annotations"]):
        where = f"{path}: annotations[{i}]"
        if not isinstance(ann, dict):
            raise AnnotationError(f"{where}: not an object")
        for key in ("image_id", "category_id", "bbox"):
            if key not in ann:
                raise AnnotationError(f"{where}: missing '{key}'")
        if ann["image_id"] not in images:
            raise AnnotationError(f"{where}: unknown image_id {ann['image_id']!r}")
        cat = ann["category_id"]
        if cat not in categories:
            raise AnnotationError(f"{where}: unknown category_id {cat!r}")
        records.append(GroundTruthRecord(ann["image_id"], int(cat), _parse_bbox(ann["bbox"], where)))
    return records, categories, images


def load_coco_dets(path, categories: Optional[Dict[int, str]] = None) -> List[DetectionRecord]:
    data = _read_json(path)
    if not isinstance(data, list):
        raise AnnotationError(f"{path}: detections must be a JSON array")
    out = []
    for i, d in enumerate(data):
        where = f"{path}: detections[{i}]"
        if not isinstance(d, dict):
            raise AnnotationError(f"{where}: not an object")
        for key in ("image_id", "category_id", "bbox", "score"):
            if key not in d:
                raise AnnotationError(f"{where}: missing '{key}'")
        if categories is not None and d["category_id"] not in categories:
            raise AnnotationError(f"{where}: unknown category_id {d['category_id']!r}")
        try:
            out.append(DetectionRecord(d["image_id"], int(d["category_id"]), _parse_bbox(d["bbox"], where),
                                       float(d["score"])))
        except ValueError as exc:
            raise AnnotationError(f"{where}: {exc}") from None
    return out


def gt_to_coco(records: Sequence[GroundTruthRecord], images: Sequence[dict], categories: Dict[int, str]) -> dict:
    anns = []
    for i, r in enumerate(records, start=1):
        anns.append({"id": i, "image_id": r.image_id, "category_id": r.category_id,
                     "bbox": list(r.box.as_tuple()), "area": r.box.area, "iscrowd": 0})
    return {"images": list(images), "annotations": anns,
            "categories": [{"id": k, "name": v} for k, v in sorted(categories.items())]}


def dets_to_coco(records: Sequence[DetectionRecord]) -> list:
    return [{"image_id": r.image_id, "category_id": r.category_id, "bbox": list(r.box.as_tuple()),
             "score": r.score} for r in records]


def format_report(report: dict) -> str:
    rows = [(k, v) for k, v in report.items() if k != "per_category"]
    rows += [(f"cat {k}", v) for k, v in report.get("per_category", {}).items()]
    width = max(len(k) for k, _ in rows)
    lines = []
    for k, v in rows:
        val = "-" if v is None else f"{v:.4f}"
        lines.append(f"{k.ljust(width)}  {val}")
    return "\n".join(lines)
