"""Decoding, suppression, and precision/recall/mAP evaluation.

Everything here is plain numpy over immutable inputs. All orderings are
total and content-based (score desc, then class id, then box coordinates),
so results are reproducible bit-for-bit and invariant to image/detection
permutation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .blocks import HeadOutput
from .errors import ParseError
from .tensor import _sigmoid, _softplus

IOU_THRESHOLDS = np.arange(0.50, 0.96, 0.05).round(2)


@dataclass(frozen=True)
class Detection:
    box: tuple[float, float, float, float]  # x1, y1, x2, y2 pixels
    class_id: int
    score: float


def _det_key(d: Detection):
    return (-d.score, d.class_id, d.box)


def iou(a, b) -> float:
    """Intersection over union of two xyxy boxes; 0 when the union is empty."""
    ix1, iy1 = max(a[0], b[0]), max(a[1], b[1])
    ix2, iy2 = min(a[2], b[2]), min(a[3], b[3])
    inter = max(0.0, ix2 - ix1) * max(0.0, iy2 - iy1)
    area_a = max(0.0, a[2] - a[0]) * max(0.0, a[3] - a[1])
    area_b = max(0.0, b[2] - b[0]) * max(0.0, b[3] - b[1])
    union = area_a + area_b - inter
    return inter / union if union > 0 else 0.0


# ---------------------------------------------------------------------------
# decoding raw head maps

def decode(raw: HeadOutput, conf_thresh: float) -> list[list[Detection]]:
    """Turn raw per-scale maps into per-image detection lists.

    Per cell and class: score = sigmoid(logit), kept when >= conf_thresh; the
    box comes from softplus-activated l/t/r/b distances in stride units around
    the cell center, clipped to the image bounds.
    """
    n = raw.maps[0].shape[0]
    out: list[list[Detection]] = [[] for _ in range(n)]
    for fmap, stride in zip(raw.maps, raw.strides):
        data = fmap.data
        _, ch, gh, gw = data.shape
        size = gh * stride
        ltrb = _softplus(data[:, :4]) * stride
        scores = _sigmoid(data[:, 4:])
        cy, cx = np.mgrid[0:gh, 0:gw]
        cxp = (cx + 0.5) * stride
        cyp = (cy + 0.5) * stride
        x1 = np.clip(cxp - ltrb[:, 0], 0.0, size)
        y1 = np.clip(cyp - ltrb[:, 1], 0.0, size)
        x2 = np.clip(cxp + ltrb[:, 2], 0.0, size)
        y2 = np.clip(cyp + ltrb[:, 3], 0.0, size)
        keep = scores >= conf_thresh
        for b, c, iy, ix in zip(*np.nonzero(keep)):
            out[b].append(Detection(
                box=(float(x1[b, iy, ix]), float(y1[b, iy, ix]),
                     float(x2[b, iy, ix]), float(y2[b, iy, ix])),
                class_id=int(c),
                score=float(scores[b, c, iy, ix])))
    return out


# ---------------------------------------------------------------------------
# suppression and matching

def nms(dets: list[Detection], iou_thresh: float) -> list[Detection]:
    """Class-wise greedy suppression in descending-score order.

    A detection survives iff its IoU with every already-kept detection of the
    same class is < iou_thresh. Output keeps the sorted processing order.
    """
    kept: list[Detection] = []
    for d in sorted(dets, key=_det_key):
        if all(k.class_id != d.class_id or iou(k.box, d.box) < iou_thresh
               for k in kept):
            kept.append(d)
    return kept


def match_detections(dets: list[Detection], gts, iou_thresh: float
                     ) -> tuple[list[bool], list[int]]:
    """Greedy TP/FP assignment for one image.

    dets must be sorted by descending score. Each detection matches the
    highest-IoU not-yet-matched ground truth of its own class with
    IoU >= iou_thresh (ties to the lower GT index); each GT matches once.
    Returns (tp flags, matched gt index or -1, both aligned with dets).
    """
    used = [False] * len(gts)
    flags: list[bool] = []
    matched: list[int] = []
    for d in dets:
        best, best_iou = -1, -1.0
        for gi, g in enumerate(gts):
            if used[gi] or g.class_id != d.class_id:
                continue
            v = iou(d.box, g.box)
            if v >= iou_thresh and v > best_iou:
                best, best_iou = gi, v
        if best >= 0:
            used[best] = True
            flags.append(True)
            matched.append(best)
        else:
            flags.append(False)
            matched.append(-1)
    return flags, matched


def average_precision(flags, scores, num_gt: int) -> float | None:
    """101-point interpolated AP from TP flags and scores of one class.

    Entries are ordered by (score desc, TP before FP); precision is made
    monotone non-increasing before sampling recalls {0, 0.01, ..., 1}.
    Returns 0.0 when num_gt == 0 but detections exist, None (class skipped)
    when there is neither.
    """
    if num_gt == 0:
        return 0.0 if len(flags) else None
    if not len(flags):
        return 0.0
    order = sorted(range(len(flags)), key=lambda i: (-scores[i], not flags[i]))
    tp = np.cumsum([1 if flags[i] else 0 for i in order])
    fp = np.cumsum([0 if flags[i] else 1 for i in order])
    recall = tp / num_gt
    precision = tp / np.maximum(tp + fp, 1)
    # envelope: best precision at any recall >= r
    for i in range(len(precision) - 2, -1, -1):
        precision[i] = max(precision[i], precision[i + 1])
    grid = np.linspace(0.0, 1.0, 101)
    idx = np.searchsorted(recall, grid, side="left")
    vals = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
    return float(vals.mean())


# ---------------------------------------------------------------------------
# full evaluation

@dataclass
class EvalReport:
    num_classes: int
    thresholds: np.ndarray
    ap: np.ndarray            # (num_classes, len(thresholds)); NaN = skipped
    gt_counts: np.ndarray
    precision: float
    recall: float
    map50: float
    map5095: float
    flagged_empty: bool = False
    class_names: list[str] = field(default_factory=list)

    def class_ap50(self, c: int) -> float:
        return float(self.ap[c, 0])


def evaluate(dets_per_image: list[list[Detection]],
             gts_per_image: list,
             num_classes: int,
             operating_conf: float = 0.25,
             class_names: list[str] | None = None) -> EvalReport:
    """Compute AP per class per IoU threshold 0.50:0.05:0.95 plus aggregate
    precision/recall at the operating confidence (IoU-0.5 matching).

    Classes with no ground truth and no detections anywhere are skipped (not
    averaged); with detections but no ground truth they score 0.
    """
    if len(dets_per_image) != len(gts_per_image):
        raise ValueError("detections and ground truths must align per image")
    nimg = len(dets_per_image)
    gt_counts = np.zeros(num_classes, dtype=int)
    for gts in gts_per_image:
        for g in gts:
            gt_counts[g.class_id] += 1

    ap = np.full((num_classes, len(IOU_THRESHOLDS)), np.nan)
    for c in range(num_classes):
        # pooled (score, tp) per threshold; matching is per image
        pooled: list[list[tuple[float, bool, tuple]]] = [[] for _ in IOU_THRESHOLDS]
        any_det = False
        for i in range(nimg):
            dets_c = sorted((d for d in dets_per_image[i] if d.class_id == c),
                            key=_det_key)
            gts_c = [g for g in gts_per_image[i] if g.class_id == c]
            if dets_c:
                any_det = True
            for ti, t in enumerate(IOU_THRESHOLDS):
                flags, _ = match_detections(dets_c, gts_c, float(t))
                pooled[ti].extend((d.score, f, d.box)
                                  for d, f in zip(dets_c, flags))
        if gt_counts[c] == 0 and not any_det:
            continue  # skipped class, stays NaN
        for ti in range(len(IOU_THRESHOLDS)):
            entries = pooled[ti]
            val = average_precision([f for _, f, _ in entries],
                                    [s for s, _, _ in entries],
                                    int(gt_counts[c]))
            ap[c, ti] = 0.0 if val is None else val

    valid = ~np.isnan(ap[:, 0])
    flagged = not valid.any()
    map50 = float(ap[valid, 0].mean()) if valid.any() else 0.0
    map5095 = float(ap[valid].mean()) if valid.any() else 0.0

    # operating-point precision/recall, micro-aggregated, IoU 0.5
    tp_total = 0
    det_total = 0
    for i in range(nimg):
        dets = sorted((d for d in dets_per_image[i] if d.score >= operating_conf),
                      key=_det_key)
        flags, _ = match_detections(dets, gts_per_image[i], 0.5)
        tp_total += sum(flags)
        det_total += len(dets)
    gt_total = int(gt_counts.sum())
    precision = tp_total / det_total if det_total else 0.0
    recall = tp_total / gt_total if gt_total else 0.0

    return EvalReport(
        num_classes=num_classes,
        thresholds=IOU_THRESHOLDS.copy(),
        ap=ap,
        gt_counts=gt_counts,
        precision=precision,
        recall=recall,
        map50=map50,
        map5095=map5095,
        flagged_empty=flagged,
        class_names=list(class_names or []),
    )


# ---------------------------------------------------------------------------
# prediction pipeline and report serialization

@dataclass
class PostprocessSettings:
    score_floor: float = 0.01    # decode threshold feeding the PR curve
    operating_conf: float = 0.25  # P/R operating point
    nms_iou: float = 0.45
    max_candidates: int = 300    # per image, pre-NMS
    max_det: int = 300           # per image, post-NMS


def postprocess(raw: HeadOutput, settings: PostprocessSettings
                ) -> list[list[Detection]]:
    """decode -> per-image top-k -> class-wise NMS -> detection cap."""
    out = []
    for cands in decode(raw, settings.score_floor):
        cands = sorted(cands, key=_det_key)[: settings.max_candidates]
        out.append(nms(cands, settings.nms_iou)[: settings.max_det])
    return out


def softplus_inverse(y: float) -> float:
    """Raw logit that softplus maps to y (> 0); test/tooling helper."""
    return math.log(math.expm1(y))


def save_detections(path: str | Path, dets: list[Detection]) -> None:
    """One line per detection: x1,y1,x2,y2,score,class_id."""
    with open(path, "w") as fh:
        for d in dets:
            fh.write(f"{d.box[0]:.4f},{d.box[1]:.4f},{d.box[2]:.4f},"
                     f"{d.box[3]:.4f},{d.score:.6f},{d.class_id}\n")


def load_detections(path: str | Path) -> list[Detection]:
    dets = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != 6:
            raise ParseError(f"{path}:{lineno}: expected 6 fields, got {len(parts)}")
        try:
            x1, y1, x2, y2, score = (float(v) for v in parts[:5])
            cid = int(parts[5])
        except ValueError:
            raise ParseError(f"{path}:{lineno}: non-numeric field")
        dets.append(Detection(box=(x1, y1, x2, y2), class_id=cid, score=score))
    return dets


def report_csv(report: EvalReport) -> str:
    lines = ["class_id,class_name,num_gt,ap50,ap5095"]
    for c in range(report.num_classes):
        name = report.class_names[c] if c < len(report.class_names) else str(c)
        if np.isnan(report.ap[c, 0]):
            ap50, ap5095 = "skipped", "skipped"
        else:
            ap50 = f"{report.ap[c, 0]:.6f}"
            ap5095 = f"{np.nanmean(report.ap[c]):.6f}"
        lines.append(f"{c},{name},{report.gt_counts[c]},{ap50},{ap5095}")
    lines.append(f"all,,{int(report.gt_counts.sum())},"
                 f"{report.map50:.6f},{report.map5095:.6f}")
    return "\n".join(lines) + "\n"


TABLE_HEADER = f"{'Methods':<16} {'P':>8} {'R':>8} {'mAP@0.5':>9} {'mAP@0.5:0.95':>13}"


def report_table(rows: list[tuple[str, float, float, float, float]],
                 mark_best: bool = False) -> str:
    """Plain-text metric table; optionally stars the best value per column."""
    out = [TABLE_HEADER]
    best = [max(r[i] for r in rows) if rows else 0.0 for i in range(1, 5)]
    for name, p, r, m50, m5095 in rows:
        cells = []
        for i, v in enumerate((p, r, m50, m5095)):
            s = f"{v:.3f}"
            if mark_best and len(rows) > 1 and v == best[i]:
                s += "*"
            cells.append(s)
        out.append(f"{name:<16} {cells[0]:>8} {cells[1]:>8} "
                    f"{cells[2]:>9} {cells[3]:>13}")
    return "\n".join(out) + "\n"
