"""COCO instance-segmentation datasets with the per-annotation occlusion extension.

An occlusion-annotated ("-A") file is a plain COCO file where some annotations
carry an extra object::

    "occlusion": {"occluder_ids": [int], "segmentation": {"size": [h, w], "counts": str}, "area": int}

plus a top-level ``"occlusion_info"`` block describing how it was generated.
Unknown keys on every record are kept and written back unchanged.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace
from typing import Any, Optional, Union

from . import masks

__all__ = [
    "Dataset",
    "ImageRecord",
    "CategoryRecord",
    "AnnotationRecord",
    "OcclusionRecord",
    "OcclusionMeta",
    "Violation",
    "DatasetParseError",
    "DatasetSchemaError",
    "DatasetValidationError",
    "parse_dataset",
    "loads_dataset",
    "dataset_from_dict",
    "dataset_to_dict",
    "dumps_dataset",
    "write_dataset",
    "validate_dataset",
    "strip_occlusions",
]

PathLike = Union[str, os.PathLike]


class DatasetParseError(ValueError):
    """Malformed JSON. ``offset`` is the byte offset of the failure."""

    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (at byte {offset})")
        self.offset = offset


class DatasetSchemaError(ValueError):
    def __init__(self, kind: str, record_id: Any, msg: str):
        super().__init__(f"{kind} {record_id}: {msg}")
        self.kind = kind
        self.record_id = record_id


class DatasetValidationError(ValueError):
    def __init__(self, violations: list["Violation"]):
        lines = "\n".join(f"  {v}" for v in violations[:20])
        more = f"\n  ... {len(violations) - 20} more" if len(violations) > 20 else ""
        super().__init__(f"{len(violations)} validation error(s):\n{lines}{more}")
        self.violations = violations


@dataclass(frozen=True)
class ImageRecord:
    id: int
    width: int
    height: int
    file_name: str = ""
    extra: dict = field(default_factory=dict, compare=True, repr=False)


@dataclass(frozen=True)
class CategoryRecord:
    id: int
    name: str
    extra: dict = field(default_factory=dict, repr=False)


@dataclass(frozen=True)
class OcclusionRecord:
    occluder_ids: tuple[int, ...]
    segmentation: dict
    area: int


@dataclass(frozen=True)
class AnnotationRecord:
    id: int
    image_id: int
    category_id: int
    bbox: tuple[float, float, float, float]
    segmentation: Any = None
    area: float = 0
    iscrowd: int = 0
    occlusion: Optional[OcclusionRecord] = None
    extra: dict = field(default_factory=dict, repr=False)


@dataclass(frozen=True)
class OcclusionMeta:
    coverage_threshold: float
    clip_mode: str
    tool_version: str


@dataclass(frozen=True)
class Dataset:
    images: tuple[ImageRecord, ...] = ()
    annotations: tuple[AnnotationRecord, ...] = ()
    categories: tuple[CategoryRecord, ...] = ()
    occlusion_meta: Optional[OcclusionMeta] = None
    extra: dict = field(default_factory=dict, repr=False)

    def image_index(self) -> dict[int, ImageRecord]:
        return {im.id: im for im in self.images}

    def annotations_by_image(self) -> dict[int, list[AnnotationRecord]]:
        out: dict[int, list[AnnotationRecord]] = {im.id: [] for im in self.images}
        for ann in self.annotations:
            out.setdefault(ann.image_id, []).append(ann)
        return out

    def replace(self, **changes) -> "Dataset":
        return replace(self, **changes)


@dataclass(frozen=True)
class Violation:
    record: str
    record_id: Any
    rule: str
    message: str = field(compare=False)
    severity: str = field(default="error", compare=False)

    def __str__(self) -> str:
        return f"[{self.severity}] {self.record} {self.record_id}: {self.rule}: {self.message}"


# ---------------------------------------------------------------------------
# parsing

_IMAGE_KEYS = {"id", "width", "height", "file_name"}
_CATEGORY_KEYS = {"id", "name"}
_ANN_KEYS = {"id", "image_id", "category_id", "bbox", "segmentation", "area", "iscrowd", "occlusion"}
_TOP_KEYS = {"images", "annotations", "categories", "occlusion_info"}


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _require(obj: dict, keys, kind: str, rid) -> None:
    missing = [k for k in keys if k not in obj]
    if missing:
        raise DatasetSchemaError(kind, rid, f"missing field(s) {', '.join(missing)}")


def _parse_image(obj) -> ImageRecord:
    if not isinstance(obj, dict):
        raise DatasetSchemaError("image", None, "record is not an object")
    rid = obj.get("id")
    _require(obj, ("id", "width", "height"), "image", rid)
    for k in ("id", "width", "height"):
        if not _is_int(obj[k]):
            raise DatasetSchemaError("image", rid, f"{k} must be an integer")
    return ImageRecord(
        id=obj["id"],
        width=obj["width"],
        height=obj["height"],
        file_name=obj.get("file_name", ""),
        extra={k: v for k, v in obj.items() if k not in _IMAGE_KEYS},
    )


def _parse_category(obj) -> CategoryRecord:
    if not isinstance(obj, dict):
        raise DatasetSchemaError("category", None, "record is not an object")
    rid = obj.get("id")
    _require(obj, ("id",), "category", rid)
    if not _is_int(rid):
        raise DatasetSchemaError("category", rid, "id must be an integer")
    return CategoryRecord(
        id=rid,
        name=str(obj.get("name", "")),
        extra={k: v for k, v in obj.items() if k not in _CATEGORY_KEYS},
    )


def _parse_rle(obj, rid) -> dict:
    if not isinstance(obj, dict) or "size" not in obj or "counts" not in obj:
        raise DatasetSchemaError("annotation", rid, "RLE needs size and counts")
    size = obj["size"]
    if not (isinstance(size, list) and len(size) == 2 and all(_is_int(s) for s in size)):
        raise DatasetSchemaError("annotation", rid, "RLE size must be [h, w]")
    counts = obj["counts"]
    if not (isinstance(counts, str) or (isinstance(counts, list) and all(_is_int(c) for c in counts))):
        raise DatasetSchemaError("annotation", rid, "RLE counts must be a string or integer list")
    return obj


def _parse_occlusion(obj, rid) -> OcclusionRecord:
    if not isinstance(obj, dict):
        raise DatasetSchemaError("annotation", rid, "occlusion must be an object")
    _require(obj, ("occluder_ids", "segmentation", "area"), "annotation", rid)
    ids = obj["occluder_ids"]
    if not (isinstance(ids, list) and all(_is_int(i) for i in ids)):
        raise DatasetSchemaError("annotation", rid, "occlusion.occluder_ids must be an integer list")
    if not _is_num(obj["area"]):
        raise DatasetSchemaError("annotation", rid, "occlusion.area must be a number")
    return OcclusionRecord(
        occluder_ids=tuple(ids),
        segmentation=_parse_rle(obj["segmentation"], rid),
        area=obj["area"],
    )


def _parse_annotation(obj) -> AnnotationRecord:
    if not isinstance(obj, dict):
        raise DatasetSchemaError("annotation", None, "record is not an object")
    rid = obj.get("id")
    _require(obj, ("id", "image_id", "category_id", "bbox"), "annotation", rid)
    for k in ("id", "image_id", "category_id"):
        if not _is_int(obj[k]):
            raise DatasetSchemaError("annotation", rid, f"{k} must be an integer")
    bbox = obj["bbox"]
    if not (isinstance(bbox, list) and len(bbox) == 4 and all(_is_num(v) for v in bbox)):
        raise DatasetSchemaError("annotation", rid, "bbox must be 4 numbers")
    seg = obj.get("segmentation")
    if isinstance(seg, dict):
        _parse_rle(seg, rid)
    elif seg is not None and not (
        isinstance(seg, list) and all(isinstance(p, list) and all(_is_num(v) for v in p) for p in seg)
    ):
        raise DatasetSchemaError("annotation", rid, "segmentation must be polygons or RLE")
    area = obj.get("area", 0)
    if not _is_num(area):
        raise DatasetSchemaError("annotation", rid, "area must be a number")
    iscrowd = obj.get("iscrowd", 0)
    if iscrowd not in (0, 1) or isinstance(iscrowd, float):
        raise DatasetSchemaError("annotation", rid, "iscrowd must be 0 or 1")
    occ = obj.get("occlusion")
    return AnnotationRecord(
        id=obj["id"],
        image_id=obj["image_id"],
        category_id=obj["category_id"],
        bbox=tuple(bbox),
        segmentation=seg,
        area=area,
        iscrowd=int(iscrowd),
        occlusion=None if occ is None else _parse_occlusion(occ, rid),
        extra={k: v for k, v in obj.items() if k not in _ANN_KEYS},
    )


def dataset_from_dict(data: dict) -> Dataset:
    if not isinstance(data, dict):
        raise DatasetSchemaError("dataset", None, "top level must be an object")
    for key in ("images", "annotations", "categories"):
        if not isinstance(data.get(key, []), list):
            raise DatasetSchemaError("dataset", None, f"{key} must be an array")
    meta = None
    info = data.get("occlusion_info")
    if info is not None:
        if not isinstance(info, dict):
            raise DatasetSchemaError("dataset", None, "occlusion_info must be an object")
        _require(info, ("coverage_threshold", "clip_mode"), "dataset", "occlusion_info")
        meta = OcclusionMeta(
            coverage_threshold=info["coverage_threshold"],
            clip_mode=info["clip_mode"],
            tool_version=info.get("tool_version", ""),
        )
    return Dataset(
        images=tuple(_parse_image(o) for o in data.get("images", [])),
        annotations=tuple(_parse_annotation(o) for o in data.get("annotations", [])),
        categories=tuple(_parse_category(o) for o in data.get("categories", [])),
        occlusion_meta=meta,
        extra={k: v for k, v in data.items() if k not in _TOP_KEYS},
    )


def loads_dataset(raw: Union[str, bytes]) -> Dataset:
    text = raw.decode("utf-8") if isinstance(raw, bytes) else raw
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        offset = len(text[: exc.pos].encode("utf-8"))
        raise DatasetParseError(exc.msg, offset) from None
    return dataset_from_dict(data)


def parse_dataset(path: PathLike) -> Dataset:
    with open(path, "rb") as f:
        return loads_dataset(f.read())


# ---------------------------------------------------------------------------
# serialization


def _image_to_dict(im: ImageRecord) -> dict:
    d = {"id": im.id, "width": im.width, "height": im.height, "file_name": im.file_name}
    d.update(im.extra)
    return d


def _annotation_to_dict(ann: AnnotationRecord) -> dict:
    d = {
        "id": ann.id,
        "image_id": ann.image_id,
        "category_id": ann.category_id,
        "bbox": list(ann.bbox),
        "area": ann.area,
        "iscrowd": ann.iscrowd,
    }
    if ann.segmentation is not None:
        d["segmentation"] = ann.segmentation
    d.update(ann.extra)
    if ann.occlusion is not None:
        d["occlusion"] = {
            "occluder_ids": list(ann.occlusion.occluder_ids),
            "segmentation": ann.occlusion.segmentation,
            "area": ann.occlusion.area,
        }
    return d


def dataset_to_dict(ds: Dataset) -> dict:
    d = dict(ds.extra)
    d["images"] = [_image_to_dict(im) for im in ds.images]
    d["annotations"] = [_annotation_to_dict(a) for a in ds.annotations]
    d["categories"] = [{"id": c.id, "name": c.name, **c.extra} for c in ds.categories]
    if ds.occlusion_meta is not None:
        m = ds.occlusion_meta
        d["occlusion_info"] = {
            "coverage_threshold": m.coverage_threshold,
            "clip_mode": m.clip_mode,
            "tool_version": m.tool_version,
        }
    return d


def dumps_dataset(ds: Dataset) -> str:
    return json.dumps(dataset_to_dict(ds), separators=(",", ":"), ensure_ascii=False)


def write_dataset(ds: Dataset, path: PathLike, validate: bool = True) -> None:
    """Write ``ds`` as JSON. Refuses datasets with error-level violations."""
    if validate:
        errors = [v for v in validate_dataset(ds) if v.severity == "error"]
        if errors:
            raise DatasetValidationError(errors)
    text = dumps_dataset(ds)
    with open(path, "w", encoding="utf-8") as f:
        f.write(text)
        f.write("\n")


def strip_occlusions(ds: Dataset) -> Dataset:
    """Plain COCO view of an occlusion-annotated dataset."""
    anns = tuple(replace(a, occlusion=None) if a.occlusion else a for a in ds.annotations)
    return replace(ds, annotations=anns, occlusion_meta=None)


# ---------------------------------------------------------------------------
# validation


def _duplicates(ids) -> set:
    seen, dup = set(), set()
    for i in ids:
        (dup if i in seen else seen).add(i)
    return dup


def validate_dataset(ds: Dataset, check_area: bool = True) -> list[Violation]:
    """Check the dataset invariants.

    Returns every violation, sorted. Area mismatches are reported with
    severity ``"warning"``; everything else is an ``"error"``.
    """
    out: list[Violation] = []
    for kind, coll in (("image", ds.images), ("category", ds.categories), ("annotation", ds.annotations)):
        for rid in _duplicates(r.id for r in coll):
            out.append(Violation(kind, rid, "duplicate-id", f"{kind} id {rid} is not unique"))

    images = ds.image_index()
    cat_ids = {c.id for c in ds.categories}
    ann_image = {a.id: a.image_id for a in ds.annotations}

    for im in ds.images:
        if im.width <= 0 or im.height <= 0:
            out.append(Violation("image", im.id, "image-size", f"invalid size {im.width}x{im.height}"))

    for ann in ds.annotations:
        im = images.get(ann.image_id)
        if im is None:
            out.append(Violation("annotation", ann.id, "dangling-image", f"image_id {ann.image_id} not found"))
        if ann.category_id not in cat_ids:
            out.append(
                Violation("annotation", ann.id, "dangling-category", f"category_id {ann.category_id} not found")
            )
        x, y, w, h = ann.bbox
        if not all(math.isfinite(v) for v in ann.bbox):
            out.append(Violation("annotation", ann.id, "bbox-finite", f"bbox {list(ann.bbox)} not finite"))
        elif w < 0 or h < 0:
            out.append(Violation("annotation", ann.id, "bbox-size", f"negative bbox size {w}x{h}"))

        valid_canvas = im is not None and im.width > 0 and im.height > 0
        if check_area and valid_canvas and ann.segmentation is not None:
            try:
                pixels = masks.area(masks.segmentation_to_mask(ann.segmentation, im.height, im.width))
            except (masks.MaskError, ValueError) as exc:
                out.append(Violation("annotation", ann.id, "segmentation", str(exc)))
            else:
                if round(ann.area) != pixels:
                    out.append(
                        Violation(
                            "annotation", ann.id, "area-mismatch",
                            f"area {ann.area} but mask has {pixels} pixels", "warning",
                        )
                    )

        occ = ann.occlusion
        if occ is None:
            continue
        if not occ.occluder_ids:
            out.append(Violation("annotation", ann.id, "occlusion-empty-occluders", "occluder_ids is empty"))
        if ann.id in occ.occluder_ids:
            out.append(Violation("annotation", ann.id, "self-occlusion", "occluder_ids contains the annotation itself"))
        for oid in occ.occluder_ids:
            if oid == ann.id:
                continue
            if oid not in ann_image:
                out.append(Violation("annotation", ann.id, "occlusion-dangling-occluder", f"occluder {oid} not found"))
            elif ann_image[oid] != ann.image_id:
                out.append(
                    Violation("annotation", ann.id, "occlusion-cross-image", f"occluder {oid} is on another image")
                )
        if occ.area <= 0:
            out.append(Violation("annotation", ann.id, "occlusion-area", f"occlusion area {occ.area} must be > 0"))
        if valid_canvas:
            size = list(occ.segmentation.get("size", []))
            if size != [im.height, im.width]:
                out.append(
                    Violation(
                        "annotation", ann.id, "occlusion-size",
                        f"occlusion RLE size {size} does not match image [{im.height}, {im.width}]",
                    )
                )
            elif check_area:
                try:
                    pixels = masks.area(masks.decode_coco(occ.segmentation))
                except (masks.MaskError, ValueError) as exc:
                    out.append(Violation("annotation", ann.id, "occlusion-segmentation", str(exc)))
                else:
                    if pixels != occ.area:
                        out.append(
                            Violation(
                                "annotation", ann.id, "occlusion-area-mismatch",
                                f"occlusion area {occ.area} but mask has {pixels} pixels", "warning",
                            )
                        )
    if ds.occlusion_meta is not None:
        m = ds.occlusion_meta
        if m.clip_mode not in ("bbox", "mask"):
            out.append(Violation("dataset", "occlusion_info", "clip-mode", f"unknown clip_mode {m.clip_mode!r}"))
        if not (_is_num(m.coverage_threshold) and 0 < m.coverage_threshold <= 1):
            out.append(
                Violation("dataset", "occlusion_info", "coverage-threshold", f"threshold {m.coverage_threshold} not in (0, 1]")
            )
    return sorted(out, key=lambda v: (v.record, str(v.record_id), v.rule, v.message))
