"""Occlusion annotation of COCO datasets and the per-split statistics table.

For every image the annotator

1. marks an annotation A as an occludee candidate of B when at least
   ``coverage_threshold`` of A's mask pixels fall inside B's bounding box,
2. keeps the occluders whose masks really intersect A's mask, and
3. stores the union of those occluders' masks, clipped to A's mask (or to A's
   bounding box in ``clip_mode="bbox"``), as A's occlusion record.

Crowd and zero-area annotations take no part in any of the steps.
"""
from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from typing import Iterable, Optional, Sequence

import numpy as np

from . import __version__, masks
from .coco import (
    AnnotationRecord,
    Dataset,
    DatasetValidationError,
    ImageRecord,
    OcclusionMeta,
    OcclusionRecord,
    validate_dataset,
)

__all__ = [
    "AnnotatorConfig",
    "DatasetStats",
    "find_occludee_candidates",
    "resolve_occlusions",
    "annotate_image",
    "annotate_dataset",
    "compute_statistics",
    "format_statistics",
]

log = logging.getLogger(__name__)

CLIP_MODES = ("bbox", "mask")


@dataclass(frozen=True)
class AnnotatorConfig:
    coverage_threshold: float = 0.05
    clip_mode: str = "mask"
    min_occlusion_area: int = 1

    def __post_init__(self):
        if not 0 < self.coverage_threshold <= 1:
            raise ValueError(f"coverage_threshold must be in (0, 1], got {self.coverage_threshold}")
        if self.clip_mode not in CLIP_MODES:
            raise ValueError(f"clip_mode must be one of {CLIP_MODES}, got {self.clip_mode!r}")
        if self.min_occlusion_area < 1:
            raise ValueError("min_occlusion_area must be >= 1")


@dataclass(frozen=True)
class DatasetStats:
    images_total: int
    images_annotated: int
    images_multi: int
    images_occluded: int
    annos_total: int
    annos_extra: int

    def as_tuple(self) -> tuple[int, ...]:
        return (
            self.images_total,
            self.images_annotated,
            self.images_multi,
            self.images_occluded,
            self.annos_total,
            self.annos_extra,
        )

    def to_dict(self) -> dict:
        return asdict(self)


# An instance as the annotator sees it: id, bbox and full-canvas mask.
Instance = tuple[int, Sequence[float], np.ndarray]


def _instances(image: ImageRecord, anns: Iterable[AnnotationRecord]) -> list[Instance]:
    out = []
    for ann in anns:
        if ann.iscrowd or ann.segmentation is None:
            continue
        m = masks.segmentation_to_mask(ann.segmentation, image.height, image.width)
        if m.any():
            out.append((ann.id, ann.bbox, m))
    return out


def find_occludee_candidates(
    instances: Sequence[Instance], cfg: AnnotatorConfig
) -> list[tuple[int, list[int]]]:
    """Pairs ``(occludee_id, [occluder_id, ...])``, each occluder tested on its own box."""
    out = []
    for a_id, _, a_mask in instances:
        occluders = [
            b_id
            for b_id, b_box, _ in instances
            if b_id != a_id and masks.coverage_fraction(a_mask, b_box) >= cfg.coverage_threshold
        ]
        if occluders:
            out.append((a_id, occluders))
    return out


def resolve_occlusions(
    instances: Sequence[Instance],
    candidates: Sequence[tuple[int, Sequence[int]]],
    cfg: AnnotatorConfig,
) -> list[tuple[int, OcclusionRecord]]:
    by_id = {i: (box, m) for i, box, m in instances}
    out = []
    for a_id, cand in candidates:
        a_box, a_mask = by_id[a_id]
        h, w = a_mask.shape
        clip = a_mask if cfg.clip_mode == "mask" else masks.box_mask(a_box, h, w)
        verified = []
        occ = np.zeros_like(a_mask)
        for b_id in cand:
            b_mask = by_id[b_id][1]
            if not np.any(b_mask & a_mask):
                continue
            verified.append(b_id)
            occ |= b_mask & clip
        n = masks.area(occ)
        if not verified or n < cfg.min_occlusion_area:
            continue
        out.append(
            (a_id, OcclusionRecord(tuple(sorted(verified)), masks.encode_coco(occ), n))
        )
    return out


def annotate_image(
    image: ImageRecord, anns: Sequence[AnnotationRecord], cfg: AnnotatorConfig
) -> dict[int, OcclusionRecord]:
    instances = _instances(image, anns)
    if len(instances) < 2:
        return {}
    candidates = find_occludee_candidates(instances, cfg)
    return dict(resolve_occlusions(instances, candidates, cfg))


def _annotate_job(args) -> dict[int, OcclusionRecord]:
    return annotate_image(*args)


def annotate_dataset(ds: Dataset, cfg: AnnotatorConfig = AnnotatorConfig(), jobs: int = 1) -> Dataset:
    """Return ``ds`` with every annotation's occlusion field recomputed.

    Existing occlusion records are discarded first, so the result does not
    depend on whether ``ds`` was annotated before.
    """
    errors = [v for v in validate_dataset(ds, check_area=False) if v.severity == "error"]
    if errors:
        raise DatasetValidationError(errors)

    by_image = ds.annotations_by_image()
    work = [(im, by_image.get(im.id, []), cfg) for im in sorted(ds.images, key=lambda im: im.id)]
    work = [w for w in work if len(w[1]) >= 2]
    log.info("annotating %d multi-instance images with %d job(s)", len(work), jobs)
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_annotate_job, work, chunksize=max(1, len(work) // (4 * jobs))))
    else:
        results = [_annotate_job(w) for w in work]

    records: dict[int, OcclusionRecord] = {}
    for r in results:
        records.update(r)
    anns = tuple(
        replace(a, occlusion=records.get(a.id)) if (a.occlusion is not None or a.id in records) else a
        for a in ds.annotations
    )
    meta = OcclusionMeta(cfg.coverage_threshold, cfg.clip_mode, __version__)
    return replace(ds, annotations=anns, occlusion_meta=meta)


def compute_statistics(ds: Dataset) -> DatasetStats:
    per_image = {im.id: [0, 0] for im in ds.images}
    for ann in ds.annotations:
        counts = per_image.setdefault(ann.image_id, [0, 0])
        counts[0] += 1
        counts[1] += ann.occlusion is not None
    return DatasetStats(
        images_total=len(ds.images),
        images_annotated=sum(1 for n, _ in per_image.values() if n >= 1),
        images_multi=sum(1 for n, _ in per_image.values() if n >= 2),
        images_occluded=sum(1 for _, k in per_image.values() if k >= 1),
        annos_total=len(ds.annotations),
        annos_extra=sum(1 for a in ds.annotations if a.occlusion is not None),
    )


def format_statistics(stats: DatasetStats, title: Optional[str] = None) -> str:
    """Aligned text table using the row names of the published statistics table."""
    rows = [
        ("Images", "Total", stats.images_total),
        ("", "Anno", stats.images_annotated),
        ("", "Multi", stats.images_multi),
        ("", "Occlu", stats.images_occluded),
        ("Annos", "Total", stats.annos_total),
        ("", "Extra", stats.annos_extra),
    ]
    width = max(len(str(v)) for *_, v in rows)
    header = f"{'Type':<7}{'Count':<7}{(title or 'Value'):>{max(width, len(title or 'Value'))}}"
    col = max(width, len(title or "Value"))
    lines = [header]
    lines += [f"{t:<7}{c:<7}{v:>{col}}" for t, c, v in rows]
    return "\n".join(lines)


def statistics_json(stats: DatasetStats) -> str:
    return json.dumps(stats.to_dict(), indent=2)
