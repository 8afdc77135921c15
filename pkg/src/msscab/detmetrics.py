"""
Detection evaluation: confidence filter, greedy NMS, one-to-one matching,
precision/recall/F1 and 101-point interpolated AP over the IoU grid
0.50, 0.55, ..., 0.95.
"""
from __future__ import annotations

import csv
import io
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

CONF_THRESHOLD = 0.1
NMS_THRESHOLD = 0.2
IOU_GRID: tuple[float, ...] = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
# i/100 exactly, so recalls such as 3/10 compare equal to their grid point
RECALL_POINTS = np.arange(101) / 100.0


@dataclass(frozen=True)
class Detection:
    image_id: str
    class_id: int
    box: tuple[float, float, float, float]
    confidence: float

    def __post_init__(self):
        x1, y1, x2, y2 = self.box
        if not (x1 < x2 and y1 < y2):
            raise ValueError(f"box {self.box} must satisfy x1 < x2 and y1 < y2")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")
        object.__setattr__(self, "box", tuple(float(v) for v in self.box))


@dataclass(frozen=True)
class GroundTruthBox:
    image_id: str
    class_id: int
    box: tuple[float, float, float, float]

    def __post_init__(self):
        x1, y1, x2, y2 = self.box
        if not (x1 < x2 and y1 < y2):
            raise ValueError(f"box {self.box} must satisfy x1 < x2 and y1 < y2")
        object.__setattr__(self, "box", tuple(float(v) for v in self.box))


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return float(inter / union)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(inter > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def filter_confidence(dets: Iterable[Detection], min_conf: float = CONF_THRESHOLD) -> list[Detection]:
    return [d for d in dets if d.confidence >= min_conf]


def _confidence_order(dets: Sequence[Detection]) -> list[int]:
    # stable: equal confidences keep input order
    return sorted(range(len(dets)), key=lambda i: -dets[i].confidence)


def nms(dets: Sequence[Detection], iou_thresh: float = NMS_THRESHOLD) -> list[Detection]:
    """Greedy per-class suppression of boxes overlapping a kept box by IoU > threshold.

    Kept detections are returned in input order.
    """
    dets = list(dets)
    keep = np.zeros(len(dets), dtype=bool)
    by_class: dict[tuple[str, int], list[int]] = defaultdict(list)
    for i in _confidence_order(dets):
        by_class[(dets[i].image_id, dets[i].class_id)].append(i)
    for idx in by_class.values():
        boxes = np.array([dets[i].box for i in idx])
        overlap = iou_matrix(boxes, boxes)
        alive = np.ones(len(idx), dtype=bool)
        for j in range(len(idx)):
            if not alive[j]:
                continue
            keep[idx[j]] = True
            alive[j + 1 :] &= overlap[j, j + 1 :] <= iou_thresh
    return [d for d, k in zip(dets, keep) if k]


@dataclass
class MatchResult:
    det_tp: np.ndarray
    gt_matched: np.ndarray
    det_gt: np.ndarray = field(default=None)

    @property
    def tp(self) -> int:
        return int(self.det_tp.sum())

    @property
    def fp(self) -> int:
        return int((~self.det_tp).sum())

    @property
    def fn(self) -> int:
        return int((~self.gt_matched).sum())


def match(dets: Sequence[Detection], gts: Sequence[GroundTruthBox], iou_thresh: float) -> MatchResult:
    """Greedy one-to-one matching in descending confidence.

    Each detection takes the still-unmatched ground truth of its image and
    class with the highest IoU, provided that IoU >= ``iou_thresh``.
    """
    det_tp = np.zeros(len(dets), dtype=bool)
    det_gt = np.full(len(dets), -1)
    gt_matched = np.zeros(len(gts), dtype=bool)
    gt_groups: dict[tuple[str, int], list[int]] = defaultdict(list)
    for j, g in enumerate(gts):
        gt_groups[(g.image_id, g.class_id)].append(j)
    group_boxes = {k: np.array([gts[j].box for j in v]) for k, v in gt_groups.items()}
    for i in _confidence_order(dets):
        d = dets[i]
        key = (d.image_id, d.class_id)
        cand = gt_groups.get(key)
        if not cand:
            continue
        ious = iou_matrix(np.array(d.box), group_boxes[key])[0]
        ious[gt_matched[cand]] = -1.0
        best = int(np.argmax(ious))
        if ious[best] >= iou_thresh:
            det_tp[i] = True
            det_gt[i] = cand[best]
            gt_matched[cand[best]] = True
    return MatchResult(det_tp, gt_matched, det_gt)


def pr_curve(dets: Sequence[Detection], gts: Sequence[GroundTruthBox], iou_thresh: float):
    """Precision and recall after each confidence-ranked detection."""
    m = match(dets, gts, iou_thresh)
    order = _confidence_order(dets)
    tp = np.cumsum(m.det_tp[order])
    ranks = np.arange(1, len(order) + 1)
    n_gt = len(gts)
    precision = tp / ranks if len(order) else np.zeros(0)
    recall = tp / n_gt if n_gt else np.zeros(len(order))
    return precision, recall


def interpolated_ap(precision: np.ndarray, recall: np.ndarray) -> float:
    """Mean over 101 recall points of the best precision at recall >= r."""
    if len(precision) == 0:
        return 0.0
    # suffix maxima: envelope[k] = max precision over ranks >= k
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    # recall is non-decreasing, so the first rank reaching r carries the envelope
    pos = np.searchsorted(recall, RECALL_POINTS, side="left")
    vals = np.where(pos < len(recall), envelope[np.minimum(pos, len(recall) - 1)], 0.0)
    return float(vals.mean())


def average_precision(
    dets: Sequence[Detection], gts: Sequence[GroundTruthBox], iou_thresh: float, class_id: int | None = None
) -> float | None:
    """Single-class AP; ``None`` when the class has no ground truth."""
    if class_id is not None:
        dets = [d for d in dets if d.class_id == class_id]
        gts = [g for g in gts if g.class_id == class_id]
    if not gts:
        return None
    return interpolated_ap(*pr_curve(dets, gts, iou_thresh))


def _ratio(num: float, den: float) -> tuple[float, bool]:
    return (num / den, False) if den > 0 else (0.0, True)


def prf(tp: int, fp: int, fn: int) -> dict:
    p, p_flag = _ratio(tp, tp + fp)
    r, r_flag = _ratio(tp, tp + fn)
    f1, f_flag = _ratio(2 * p * r, p + r)
    flags = [name for name, bad in (("precision", p_flag), ("recall", r_flag), ("f1", f_flag)) if bad]
    return {"precision": p, "recall": r, "f1": f1, "tp": tp, "fp": fp, "fn": fn, "zero_denominator": flags}


@dataclass
class EvalReport:
    precision: float
    recall: float
    f1: float
    map50: float
    map50_95: float
    tp: int
    fp: int
    fn: int
    ap_grid: dict[str, float | None]
    per_class: dict[str, dict]
    thresholds: dict[str, float]
    zero_denominator: list[str] = field(default_factory=list)
    pr_curve: dict[str, list[float]] = field(default_factory=dict)
    name: str = ""

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "P": self.precision,
            "R": self.recall,
            "F1": self.f1,
            "mAP@0.5": self.map50,
            "mAP@0.5:0.95": self.map50_95,
            "TP": self.tp,
            "FP": self.fp,
            "FN": self.fn,
            "AP": self.ap_grid,
            "per_class": self.per_class,
            "thresholds": self.thresholds,
            "zero_denominator": self.zero_denominator,
            "pr_curve": self.pr_curve,
        }

    @classmethod
    def from_json(cls, d: dict) -> "EvalReport":
        return cls(
            precision=float(d["P"]),
            recall=float(d["R"]),
            f1=float(d["F1"]),
            map50=float(d["mAP@0.5"]),
            map50_95=float(d["mAP@0.5:0.95"]),
            tp=int(d.get("TP", 0)),
            fp=int(d.get("FP", 0)),
            fn=int(d.get("FN", 0)),
            ap_grid=dict(d.get("AP", {})),
            per_class=dict(d.get("per_class", {})),
            thresholds=dict(d.get("thresholds", {})),
            zero_denominator=list(d.get("zero_denominator", [])),
            pr_curve=dict(d.get("pr_curve", {})),
            name=d.get("name", ""),
        )

    def validate(self) -> None:
        for key in ("precision", "recall", "f1", "map50", "map50_95"):
            v = getattr(self, key)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{key}={v} outside [0, 1]")
        aps = [v for v in self.ap_grid.values() if v is not None]
        if len(aps) == len(IOU_GRID) and abs(np.mean(aps) - self.map50_95) > 1e-12:
            raise ValueError("mAP@0.5:0.95 is not the mean of the per-threshold APs")

    def csv_row(self) -> list:
        return [self.name, self.precision, self.recall, self.f1, self.map50, self.map50_95]


CSV_HEADER = ["image_set", "P", "R", "F1", "mAP@0.5", "mAP@..0.95"]


def reports_to_csv(reports: Iterable[EvalReport]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for r in reports:
        writer.writerow([r.name] + [f"{v:.6f}" for v in r.csv_row()[1:]])
    return buf.getvalue()


def report_from_table_row(name: str, p: float, r: float, map50: float, map50_95: float) -> EvalReport:
    """Report built from published P, R and mAP values; F1 is recomputed as 2PR/(P+R)."""
    f1, _ = _ratio(2 * p * r, p + r)
    rep = EvalReport(p, r, f1, map50, map50_95, 0, 0, 0, {}, {}, {}, name=name)
    rep.validate()
    return rep


def evaluate(
    dets: Sequence[Detection],
    gts: Sequence[GroundTruthBox],
    min_conf: float = CONF_THRESHOLD,
    nms_iou: float = NMS_THRESHOLD,
    match_iou: float = 0.5,
    iou_grid: Sequence[float] = IOU_GRID,
    name: str = "",
) -> EvalReport:
    """Filter, suppress, then score at ``match_iou`` and across ``iou_grid``.

    Aggregate P/R/F1 pool the counts of all classes. AP per threshold is the
    mean over classes that have ground truth; a threshold with no such class
    is reported as ``None`` and skipped in the means.
    """
    kept = nms(filter_confidence(dets, min_conf), nms_iou)
    classes = sorted({g.class_id for g in gts} | {d.class_id for d in kept})
    m = match(kept, gts, match_iou)
    summary = prf(m.tp, m.fp, m.fn)

    per_class: dict[str, dict] = {}
    class_ap: dict[int, dict[float, float | None]] = {}
    for c in classes:
        cd = [d for d in kept if d.class_id == c]
        cg = [g for g in gts if g.class_id == c]
        mc = match(cd, cg, match_iou)
        class_ap[c] = {t: average_precision(cd, cg, t) for t in iou_grid}
        per_class[str(c)] = dict(prf(mc.tp, mc.fp, mc.fn), AP={f"{t:.2f}": v for t, v in class_ap[c].items()})

    ap_grid: dict[str, float | None] = {}
    for t in iou_grid:
        vals = [class_ap[c][t] for c in classes if class_ap[c][t] is not None]
        ap_grid[f"{t:.2f}"] = float(np.mean(vals)) if vals else None
    defined = [v for v in ap_grid.values() if v is not None]
    map50 = ap_grid.get(f"{match_iou:.2f}")
    flags = list(summary["zero_denominator"])
    if not defined:
        flags.append("ap_undefined")
    precision, recall = pr_curve(kept, gts, match_iou)
    rep = EvalReport(
        precision=summary["precision"],
        recall=summary["recall"],
        f1=summary["f1"],
        map50=float(map50) if map50 is not None else 0.0,
        map50_95=float(np.mean(defined)) if defined else 0.0,
        tp=m.tp,
        fp=m.fp,
        fn=m.fn,
        ap_grid=ap_grid,
        per_class=per_class,
        thresholds={"confidence": min_conf, "nms_iou": nms_iou, "match_iou": match_iou},
        zero_denominator=flags,
        pr_curve={"precision": precision.tolist(), "recall": recall.tolist()},
        name=name,
    )
    rep.validate()
    return rep


# ---------------------------------------------------------------------------
# text formats
# ---------------------------------------------------------------------------
def parse_predictions(text: str) -> list[Detection]:
    """Lines of ``image_id class conf x1 y1 x2 y2`` (pixels)."""
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 7:
            raise ValueError(f"line {lineno}: expected 7 fields, got {len(parts)}")
        try:
            out.append(Detection(parts[0], int(parts[1]), tuple(float(v) for v in parts[3:]), float(parts[2])))
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
    return out


def format_predictions(dets: Iterable[Detection]) -> str:
    return "".join(
        f"{d.image_id} {d.class_id} {d.confidence:.6f} {d.box[0]:.3f} {d.box[1]:.3f} {d.box[2]:.3f} {d.box[3]:.3f}\n"
        for d in dets
    )


def ground_truth_from_annotations(image_id: str, boxes, width: int, height: int) -> list[GroundTruthBox]:
    return [GroundTruthBox(image_id, b.class_id, b.to_pixels(width, height)) for b in boxes]
