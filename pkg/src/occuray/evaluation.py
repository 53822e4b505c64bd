"""COCO-style box and mask mAP.

Protocol (pinned so results are reproducible):

* detections of one image and category are ranked by descending score, ties by
  ascending detection id, and truncated to ``max_dets`` (100);
* each detection greedily takes the still-unmatched non-crowd GT with the
  highest IoU >= threshold (ties: lowest annotation id); failing that, any
  crowd GT with IoU >= threshold absorbs it and it is ignored; otherwise it is
  a false positive;
* crowd IoU is intersection over the detection's area, as in COCO;
* AP is the 101-point interpolated area under the precision envelope, and the
  headline numbers average categories that have at least one non-crowd GT.
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from . import masks
from .coco import AnnotationRecord, Dataset, ImageRecord

__all__ = [
    "IOU_THRESHOLDS",
    "METRICS",
    "DetectionResult",
    "EvalReport",
    "EvaluationError",
    "load_detections",
    "box_iou_matrix",
    "mask_iou_matrix",
    "greedy_match",
    "match_detections",
    "average_precision",
    "evaluate",
    "format_report",
]

# integer percent so threshold comparisons stay exact when printed/keyed
_THRESHOLD_PCT = tuple(range(50, 100, 5))
IOU_THRESHOLDS = tuple(p / 100 for p in _THRESHOLD_PCT)
RECALL_STEPS = 100
METRICS = ("ap_b", "ap_b50", "ap_b75", "ap_m", "ap_m50", "ap_m75")

TP, FP, IGNORE = 1, 0, -1


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class DetectionResult:
    id: int
    image_id: int
    category_id: int
    score: float
    bbox: tuple[float, float, float, float]
    mask: Optional[dict] = None

    def __post_init__(self):
        if not 0 <= self.score <= 1:
            raise EvaluationError(f"detection {self.id}: score {self.score} not in [0, 1]")


def load_detections(obj) -> list[DetectionResult]:
    """Parse a COCO results list. Detection ids default to list positions."""
    if not isinstance(obj, list):
        raise EvaluationError("detections must be a JSON array")
    out = []
    for i, d in enumerate(obj):
        try:
            out.append(
                DetectionResult(
                    id=int(d.get("id", i)),
                    image_id=int(d["image_id"]),
                    category_id=int(d["category_id"]),
                    score=float(d["score"]),
                    bbox=tuple(float(v) for v in d["bbox"]),
                    mask=d.get("segmentation"),
                )
            )
        except (KeyError, TypeError) as exc:
            raise EvaluationError(f"detection {d.get('id', i) if isinstance(d, dict) else i}: {exc}") from None
    return out


# ---------------------------------------------------------------------------
# IoU


def box_iou_matrix(dets: np.ndarray, gts: np.ndarray, crowd: Sequence[bool]) -> np.ndarray:
    """IoU between ``(D, 4)`` and ``(G, 4)`` xywh boxes."""
    dets = np.asarray(dets, dtype=np.float64).reshape(-1, 4)
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
    if not len(dets) or not len(gts):
        return np.zeros((len(dets), len(gts)))
    dx0, dy0 = dets[:, 0:1], dets[:, 1:2]
    dx1, dy1 = dx0 + dets[:, 2:3], dy0 + dets[:, 3:4]
    gx0, gy0 = gts[:, 0], gts[:, 1]
    gx1, gy1 = gx0 + gts[:, 2], gy0 + gts[:, 3]
    iw = np.clip(np.minimum(dx1, gx1) - np.maximum(dx0, gx0), 0, None)
    ih = np.clip(np.minimum(dy1, gy1) - np.maximum(dy0, gy0), 0, None)
    inter = iw * ih
    da = dets[:, 2:3] * dets[:, 3:4]
    ga = gts[:, 2] * gts[:, 3]
    denom = np.where(np.asarray(crowd, dtype=bool)[None, :], da, da + ga - inter)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(denom > 0, inter / denom, 0.0)


def mask_iou_matrix(dets: Sequence[np.ndarray], gts: Sequence[np.ndarray], crowd: Sequence[bool]) -> np.ndarray:
    if not len(dets) or not len(gts):
        return np.zeros((len(dets), len(gts)))
    d = np.stack([np.asarray(m, dtype=bool).ravel() for m in dets]).astype(np.float64)
    g = np.stack([np.asarray(m, dtype=bool).ravel() for m in gts]).astype(np.float64)
    inter = d @ g.T
    da = d.sum(1)[:, None]
    ga = g.sum(1)[None, :]
    denom = np.where(np.asarray(crowd, dtype=bool)[None, :], da, da + ga - inter)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(denom > 0, inter / denom, 0.0)


# ---------------------------------------------------------------------------
# matching and AP


def greedy_match(ious: np.ndarray, crowd: Sequence[bool], threshold: float) -> tuple[list[int], int]:
    """Label already-ranked detections against GTs given their IoU matrix.

    Returns per-detection labels (``TP``, ``FP`` or ``IGNORE``) and the number
    of non-crowd GTs left unmatched.
    """
    ious = np.asarray(ious, dtype=np.float64)
    crowd = [bool(c) for c in crowd]
    matched = [False] * len(crowd)
    labels = []
    for row in ious:
        best, best_iou = -1, threshold
        for g, v in enumerate(row):
            if crowd[g] or matched[g]:
                continue
            if v >= best_iou and (best < 0 or v > best_iou):
                best, best_iou = g, v
        if best >= 0:
            matched[best] = True
            labels.append(TP)
        elif any(c and v >= threshold for c, v in zip(crowd, row)):
            labels.append(IGNORE)
        else:
            labels.append(FP)
    unmatched = sum(1 for c, m in zip(crowd, matched) if not c and not m)
    return labels, unmatched


def _rank(dets: Sequence[DetectionResult]) -> list[DetectionResult]:
    return sorted(dets, key=lambda d: (-d.score, d.id))


def _gt_canvas_mask(ann: AnnotationRecord, image: ImageRecord) -> np.ndarray:
    if ann.segmentation is None:
        raise EvaluationError(f"annotation {ann.id} has no segmentation")
    return masks.segmentation_to_mask(ann.segmentation, image.height, image.width)


def _det_canvas_mask(det: DetectionResult, image: ImageRecord) -> np.ndarray:
    if det.mask is None:
        raise EvaluationError(f"detection {det.id} has no mask")
    return masks.segmentation_to_mask(det.mask, image.height, image.width)


def _sorted_gts(gts: Sequence[AnnotationRecord]) -> list[AnnotationRecord]:
    return sorted(gts, key=lambda a: a.id)


def match_detections(
    dets: Sequence[DetectionResult],
    gts: Sequence[AnnotationRecord],
    iou_threshold: float,
    kind: str = "bbox",
    image: Optional[ImageRecord] = None,
) -> tuple[list[int], int]:
    """Match the detections of one image and category. ``image`` is needed for masks.

    Labels are returned in ranked order (descending score, ascending id).
    """
    dets = _rank(dets)
    gts = _sorted_gts(gts)
    ious = _iou(dets, gts, kind, image)
    return greedy_match(ious, [a.iscrowd for a in gts], iou_threshold)


def _iou(dets, gts, kind, image) -> np.ndarray:
    crowd = [a.iscrowd for a in gts]
    if kind == "bbox":
        return box_iou_matrix([d.bbox for d in dets], [a.bbox for a in gts], crowd)
    if kind == "mask":
        if image is None:
            raise EvaluationError("mask matching needs the image record")
        return mask_iou_matrix(
            [_det_canvas_mask(d, image) for d in dets],
            [_gt_canvas_mask(a, image) for a in gts],
            crowd,
        )
    raise EvaluationError(f"unknown kind {kind!r}")


def _precision_at_recall(labels: Sequence[int], num_gt: int) -> list[float]:
    """Interpolated precision at recall k/100 for k = 0..100."""
    tp = fp = 0
    prec, tps = [], []
    for lab in labels:
        if lab == TP:
            tp += 1
        elif lab == FP:
            fp += 1
        else:
            continue
        prec.append(tp / (tp + fp))
        tps.append(tp)
    for i in range(len(prec) - 2, -1, -1):
        prec[i] = max(prec[i], prec[i + 1])
    out = []
    j = 0
    for k in range(RECALL_STEPS + 1):
        # first rank whose recall tp/num_gt reaches k/100, compared exactly
        while j < len(tps) and 100 * tps[j] < k * num_gt:
            j += 1
        out.append(prec[j] if j < len(tps) else 0.0)
    return out


def average_precision(labels: Sequence[int], num_gt: int) -> Optional[float]:
    """101-point interpolated AP of a ranked ``TP``/``FP`` list.

    ``None`` (undefined) when there is neither a GT nor a detection; 0.0 when
    there are detections but no GT.
    """
    labels = [lab for lab in labels if lab != IGNORE]
    if num_gt == 0:
        return 0.0 if labels else None
    q = _precision_at_recall(labels, num_gt)
    return math.fsum(q) / len(q)


# ---------------------------------------------------------------------------
# dataset evaluation


@dataclass
class EvalReport:
    metrics: dict[str, Optional[float]]
    per_category: dict[int, dict[str, Optional[float]]] = field(default_factory=dict)
    subsets: dict[str, "EvalReport"] = field(default_factory=dict)

    def __getattr__(self, name):
        if name in METRICS:
            return self.metrics.get(name)
        raise AttributeError(name)

    def to_dict(self) -> dict:
        d = {
            "metrics": dict(self.metrics),
            "per_category": {str(k): dict(v) for k, v in sorted(self.per_category.items())},
        }
        if self.subsets:
            d["subsets"] = {k: v.to_dict() for k, v in self.subsets.items()}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


# One (image, category) cell: per threshold, labels of the ranked, truncated
# detections paired with (score, id) for global ranking; plus GT count.
_Cell = tuple[int, int, list[tuple[float, int]], dict[int, list[int]], int]


def _evaluate_image(args) -> dict[str, list[_Cell]]:
    image, gts, dets, kinds, max_dets = args
    out: dict[str, list[_Cell]] = {k: [] for k in kinds}
    cats = sorted({a.category_id for a in gts} | {d.category_id for d in dets})
    gt_mask_cache: dict[int, np.ndarray] = {}
    for cat in cats:
        cg = _sorted_gts([a for a in gts if a.category_id == cat])
        cd = _rank([d for d in dets if d.category_id == cat])[:max_dets]
        num_gt = sum(1 for a in cg if not a.iscrowd)
        crowd = [a.iscrowd for a in cg]
        for kind in kinds:
            if kind == "bbox":
                ious = box_iou_matrix([d.bbox for d in cd], [a.bbox for a in cg], crowd)
            else:
                dm = [_det_canvas_mask(d, image) for d in cd]
                for a in cg:
                    if a.id not in gt_mask_cache:
                        gt_mask_cache[a.id] = _gt_canvas_mask(a, image)
                ious = mask_iou_matrix(dm, [gt_mask_cache[a.id] for a in cg], crowd)
            labels = {pct: greedy_match(ious, crowd, pct / 100)[0] for pct in _THRESHOLD_PCT}
            out[kind].append((image.id, cat, [(d.score, d.id) for d in cd], labels, num_gt))
    return out


def _accumulate(cells: Iterable[_Cell], categories: Sequence[int]) -> tuple[dict, dict]:
    """Precision grids per (category, threshold) -> per-category and overall APs."""
    by_cat: dict[int, list[_Cell]] = {}
    for cell in cells:
        by_cat.setdefault(cell[1], []).append(cell)
    grids: dict[int, dict[int, list[float]]] = {}
    for cat in categories:
        cc = by_cat.get(cat, [])
        num_gt = sum(c[4] for c in cc)
        if num_gt == 0:
            continue
        grids[cat] = {}
        for pct in _THRESHOLD_PCT:
            ranked = []
            for _, _, keys, labels, _ in cc:
                ranked += [(-s, i, lab) for (s, i), lab in zip(keys, labels[pct])]
            ranked.sort()
            grids[cat][pct] = _precision_at_recall([r[2] for r in ranked if r[2] != IGNORE], num_gt)
    return grids, by_cat


def _summaries(grids: dict[int, dict[int, list[float]]]) -> dict[str, Optional[float]]:
    def mean(pcts):
        q = [v for g in grids.values() for p in pcts for v in g[p]]
        return math.fsum(q) / len(q) if q else None

    return {"ap": mean(_THRESHOLD_PCT), "ap50": mean((50,)), "ap75": mean((75,))}


def _report(cells: dict[str, list[_Cell]], categories: Sequence[int], kinds: Sequence[str]) -> EvalReport:
    metrics: dict[str, Optional[float]] = {m: None for m in METRICS}
    per_category: dict[int, dict[str, Optional[float]]] = {}
    for kind in kinds:
        suffix = "b" if kind == "bbox" else "m"
        grids, _ = _accumulate(cells[kind], categories)
        s = _summaries(grids)
        metrics[f"ap_{suffix}"], metrics[f"ap_{suffix}50"], metrics[f"ap_{suffix}75"] = s["ap"], s["ap50"], s["ap75"]
        for cat in categories:
            row = per_category.setdefault(cat, {m: None for m in METRICS})
            if cat in grids:
                cs = _summaries({cat: grids[cat]})
                row[f"ap_{suffix}"], row[f"ap_{suffix}50"], row[f"ap_{suffix}75"] = cs["ap"], cs["ap50"], cs["ap75"]
    return EvalReport(metrics, per_category)


def evaluate(
    ds: Dataset,
    dets: Sequence[DetectionResult],
    split: Optional[Mapping[str, Iterable[int]]] = None,
    kinds: Sequence[str] = ("bbox", "mask"),
    max_dets: int = 100,
    jobs: int = 1,
) -> EvalReport:
    """Evaluate detections against ``ds``.

    ``split`` maps subset names to image ids (a split manifest); each subset
    gets its own report with categories averaged within the subset.
    """
    for k in kinds:
        if k not in ("bbox", "mask"):
            raise EvaluationError(f"unknown kind {k!r}")
    images = ds.image_index()
    cat_ids = {c.id for c in ds.categories}
    for d in dets:
        if d.image_id not in images:
            raise EvaluationError(f"detection {d.id}: unknown image {d.image_id}")
        if d.category_id not in cat_ids:
            raise EvaluationError(f"detection {d.id}: unknown category {d.category_id}")
        if "mask" in kinds and d.mask is None:
            raise EvaluationError(f"detection {d.id} has no mask")

    gts_by_image = ds.annotations_by_image()
    dets_by_image: dict[int, list[DetectionResult]] = {}
    for d in dets:
        dets_by_image.setdefault(d.image_id, []).append(d)
    work = [
        (images[i], gts_by_image.get(i, []), dets_by_image.get(i, []), tuple(kinds), max_dets)
        for i in sorted(images)
        if gts_by_image.get(i) or dets_by_image.get(i)
    ]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_evaluate_image, work, chunksize=max(1, len(work) // (4 * jobs))))
    else:
        results = [_evaluate_image(w) for w in work]

    cells: dict[str, list[_Cell]] = {k: [c for r in results for c in r[k]] for k in kinds}
    categories = sorted(cat_ids)
    report = _report(cells, categories, kinds)
    if split:
        for name, ids in split.items():
            keep = set(ids)
            sub = {k: [c for c in v if c[0] in keep] for k, v in cells.items()}
            report.subsets[name] = _report(sub, categories, kinds)
    return report


def _fmt(v: Optional[float]) -> str:
    return "-" if v is None else f"{100 * v:.1f}"


def format_report(report: EvalReport) -> str:
    """Text tables: overall/subset metrics, then box/mask AP per subset."""
    heads = ["AP_b", "AP_b50", "AP_b75", "AP_m", "AP_m50", "AP_m75"]
    rows = [("all", report)] + list(report.subsets.items())
    name_w = max(len("Set"), *(len(n) for n, _ in rows))
    lines = [f"{'Set':<{name_w}}  " + "  ".join(f"{h:>6}" for h in heads)]
    for name, r in rows:
        lines.append(f"{name:<{name_w}}  " + "  ".join(f"{_fmt(r.metrics[m]):>6}" for m in METRICS))
    if report.subsets:
        names = list(report.subsets)
        w = max(6, *(len(n) for n in names))
        lines.append("")
        lines.append(" " * 5 + f"{'AP_b':^{(w + 2) * len(names)}}" + f"{'AP_m':^{(w + 2) * len(names)}}")
        lines.append(" " * 5 + "".join(f"{n:>{w}}  " for n in names) * 2)
        vals = [_fmt(report.subsets[n].metrics["ap_b"]) for n in names]
        vals += [_fmt(report.subsets[n].metrics["ap_m"]) for n in names]
        lines.append(" " * 5 + "".join(f"{v:>{w}}  " for v in vals))
    return "\n".join(line.rstrip() for line in lines)
