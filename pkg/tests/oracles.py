"""
Independent reference implementations used only by the tests.

Each one is written the slow, obvious way and shares no code with the
package path it checks.
"""
from __future__ import annotations

import itertools
import math

import numpy as np


def reflect_index(i: int, n: int) -> int:
    """Edge-inclusive mirror (… c b a | a b c … ), periodic with period 2n."""
    i %= 2 * n
    return i if i < n else 2 * n - 1 - i


def direct_convolve(plane: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """out[i, j] = sum_{u, v} k[u, v] * x[i + a - u, j + a - v], mirrored borders.

    Loops over the four indices (kernel offsets outer, pixel grid inner as a
    gathered slab) so that a 64x64 plane with a 101x101 kernel stays fast.
    """
    h, w = plane.shape
    kh, kw = kernel.shape
    ay, ax = kh // 2, kw // 2
    rows = np.array([[reflect_index(i + ay - u, h) for i in range(h)] for u in range(kh)])
    cols = np.array([[reflect_index(j + ax - v, w) for j in range(w)] for v in range(kw)])
    out = np.zeros((h, w))
    for u in range(kh):
        gathered_rows = plane[rows[u]]
        for v in range(kw):
            out += kernel[u, v] * gathered_rows[:, cols[v]]
    return out


def direct_convolve_pixel(plane: np.ndarray, kernel: np.ndarray, i: int, j: int) -> float:
    h, w = plane.shape
    kh, kw = kernel.shape
    ay, ax = kh // 2, kw // 2
    total = 0.0
    for u in range(kh):
        for v in range(kw):
            total += kernel[u, v] * plane[reflect_index(i + ay - u, h), reflect_index(j + ax - v, w)]
    return total


def box_iou(a, b) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    if inter == 0:
        return 0.0
    ua = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / ua


def conf_order(dets) -> list[int]:
    order = list(range(len(dets)))
    # insertion sort, descending confidence, stable
    for k in range(1, len(order)):
        j = k
        while j > 0 and dets[order[j - 1]].confidence < dets[order[j]].confidence:
            order[j - 1], order[j] = order[j], order[j - 1]
            j -= 1
    return order


def brute_nms(dets, thresh: float) -> list[int]:
    """Kept indices: a box survives iff no surviving higher-priority same-class box overlaps it > thresh."""
    order = conf_order(dets)
    kept: list[int] = []
    for i in order:
        ok = True
        for k in kept:
            same = dets[k].class_id == dets[i].class_id and dets[k].image_id == dets[i].image_id
            if same and box_iou(dets[k].box, dets[i].box) > thresh:
                ok = False
        if ok:
            kept.append(i)
    return sorted(kept)


def enumerate_matching(dets, gts, thresh: float) -> list[bool]:
    """TP flags of the lexicographically best one-to-one assignment.

    Every partial injective assignment of detections to eligible ground
    truths is enumerated; assignments are compared on the IoU sequence taken
    in confidence order (unmatched = -1), highest first.
    """
    order = conf_order(dets)
    options = []
    for i in order:
        cands = [None]
        for j, g in enumerate(gts):
            if g.image_id == dets[i].image_id and g.class_id == dets[i].class_id:
                if box_iou(dets[i].box, g.box) >= thresh:
                    cands.append(j)
        options.append(cands)
    best_key, best = None, None
    for combo in itertools.product(*options):
        used = [j for j in combo if j is not None]
        if len(used) != len(set(used)):
            continue
        key = tuple(-1.0 if j is None else box_iou(dets[i].box, gts[j].box) for i, j in zip(order, combo))
        if best_key is None or key > best_key:
            best_key, best = key, combo
    flags = [False] * len(dets)
    for i, j in zip(order, best):
        flags[i] = j is not None
    return flags


def brute_ap(dets, gts, thresh: float) -> float:
    flags = enumerate_matching(dets, gts, thresh)
    order = conf_order(dets)
    prec, rec = [], []
    tp = 0
    for k, i in enumerate(order, 1):
        tp += flags[i]
        prec.append(tp / k)
        rec.append(tp / len(gts))
    total = 0.0
    for r100 in range(101):
        r = r100 / 100
        best = 0.0
        for p, q in zip(prec, rec):
            if q >= r and p > best:
                best = p
        total += best
    return total / 101


def brute_evaluate(dets, gts, min_conf=0.1, nms_iou=0.2):
    """P, R, F1, AP per threshold and the mean AP for single-class data."""
    dets = [d for d in dets if d.confidence >= min_conf]
    dets = [dets[i] for i in brute_nms(dets, nms_iou)]
    flags = enumerate_matching(dets, gts, 0.5)
    tp = sum(flags)
    fp = len(dets) - tp
    fn = len(gts) - tp
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    aps = [brute_ap(dets, gts, round(0.5 + 0.05 * k, 2)) for k in range(10)] if gts else []
    return {"P": p, "R": r, "F1": f1, "AP": aps, "mAP": math.fsum(aps) / len(aps) if aps else 0.0}


def two_pass_stats(x: np.ndarray):
    n = len(x)
    mean = [math.fsum(x[:, b]) / n for b in range(x.shape[1])]
    var = [math.fsum((x[:, b] - mean[b]) ** 2) / (n - 1) for b in range(x.shape[1])]
    return np.array(mean), np.sqrt(np.array(var))


def layerwise_forward(weights, biases, shift, scale, x):
    """Straight-line evaluation of one input vector, no vectorization across layers."""
    a = [(x[i] - shift[i]) / scale[i] for i in range(len(x))]
    for layer, (W, b) in enumerate(zip(weights, biases)):
        z = [b[o] + sum(a[i] * W[i][o] for i in range(len(a))) for o in range(len(b))]
        a = [max(v, 0.0) for v in z] if layer < len(weights) - 1 else z
    m = max(a)
    e = [math.exp(v - m) for v in a]
    s = sum(e)
    return np.array([v / s for v in e])
