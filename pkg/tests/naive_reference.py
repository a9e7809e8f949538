"""Straightforward loop implementations used as oracles by the tests."""
import itertools
import math

import numpy as np

from smalldet.geometry import iou


def bilinear(grid, x, y):
    """Interpolate ``grid[row, col, :]`` at level-pixel coordinates (x, y),
    cell (i, j) being centered at (j + 0.5, i + 0.5); out-of-range cells read 0."""
    h, w, c = grid.shape
    out = np.zeros(c)
    cx, cy = x - 0.5, y - 0.5
    j0, i0 = math.floor(cx), math.floor(cy)
    for i in (i0, i0 + 1):
        for j in (j0, j0 + 1):
            if 0 <= i < h and 0 <= j < w:
                weight = (1.0 - abs(cx - j)) * (1.0 - abs(cy - i))
                out = out + weight * grid[i, j]
    return out


def attention_forward(p, levels, offsets, weights, out_proj, value_proj):
    m_heads, n_levels, n_points = weights.shape
    c = levels[0].shape[2]
    result = np.zeros(c)
    for m in range(m_heads):
        head = np.zeros(value_proj.shape[1])
        for li in range(n_levels):
            h, w, _ = levels[li].shape
            for k in range(n_points):
                x = p[0] * w + offsets[m, li, k, 0]
                y = p[1] * h + offsets[m, li, k, 1]
                feat = bilinear(levels[li], x, y)
                head = head + weights[m, li, k] * (value_proj[m] @ feat)
        result = result + out_proj[m] @ head
    return result


def exhaustive_match(gts, dets, thr):
    """Best assignment under the greedy preference order, by enumeration.

    Detections are ranked by score (ties in input order). Among all
    one-to-one partial assignments with IoU >= thr, pick the one that is
    lexicographically best along that ranking, where each detection prefers
    being matched, then higher IoU, then lower GT index.
    """
    order = sorted(range(len(dets)), key=lambda i: -dets[i][1])
    choices = [None] + list(range(len(gts)))
    best_key, best = None, None
    for assign in itertools.product(choices, repeat=len(dets)):
        used = [a for a in assign if a is not None]
        if len(used) != len(set(used)):
            continue
        if any(a is not None and iou(dets[i][0], gts[a]) < thr for i, a in enumerate(assign)):
            continue
        key = []
        for i in order:
            a = assign[i]
            key.append((0, 0.0, 0) if a is None else (1, iou(dets[i][0], gts[a]), -a))
        if best_key is None or key > best_key:
            best_key, best = key, assign
    return [(i, best[i]) for i in order]
