"""Train / validation / occlusion split of an occlusion-annotated dataset.

Images without annotations are dropped. The validation subset only receives
images without any occlusion record and the occlusion subset only images with
at least one; whatever is left goes to train.

Sampling is reproducible across implementations: both pools are sorted by
image id and shuffled (Fisher-Yates, ``i = n-1 .. 1``) with one splitmix64
stream keyed by the seed, occluded pool first. Bounded draws use rejection
sampling on the 64-bit output.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Iterator, Literal

from .coco import Dataset

__all__ = [
    "SplitConfig",
    "ImageTag",
    "SplitResult",
    "SplitMix64",
    "classify_images",
    "ablation_split",
    "subset_dataset",
]

_MASK64 = (1 << 64) - 1


class SplitMix64:
    def __init__(self, seed: int):
        self.state = seed & _MASK64

    def next(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & _MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)

    def below(self, n: int) -> int:
        """Uniform integer in ``[0, n)``."""
        if n <= 0:
            raise ValueError("n must be positive")
        limit = ((1 << 64) // n) * n
        while True:
            x = self.next()
            if x < limit:
                return x % n

    def shuffle(self, items: list) -> None:
        for i in range(len(items) - 1, 0, -1):
            j = self.below(i + 1)
            items[i], items[j] = items[j], items[i]

    def __iter__(self) -> Iterator[int]:
        while True:
            yield self.next()


@dataclass(frozen=True)
class SplitConfig:
    proportions: tuple[float, float, float] = (0.78, 0.12, 0.10)
    seed: int = 0

    def __post_init__(self):
        if len(self.proportions) != 3:
            raise ValueError("proportions must be (train, val, occ)")
        if any(not 0 <= p <= 1 for p in self.proportions):
            raise ValueError(f"proportions must lie in [0, 1]: {self.proportions}")
        if abs(sum(self.proportions) - 1) > 1e-9:
            raise ValueError(f"proportions must sum to 1: {self.proportions}")


@dataclass(frozen=True)
class ImageTag:
    kind: Literal["empty", "single", "multi"]
    occluded: bool

    def to_dict(self) -> dict:
        return {"kind": self.kind, "occluded": self.occluded}


@dataclass(frozen=True)
class SplitResult:
    train_ids: tuple[int, ...]
    val_ids: tuple[int, ...]
    occ_ids: tuple[int, ...]
    manifest: dict[int, ImageTag] = field(default_factory=dict)
    warnings: tuple[str, ...] = ()

    def subsets(self) -> dict[str, tuple[int, ...]]:
        return {"train": self.train_ids, "val": self.val_ids, "occ": self.occ_ids}

    def to_dict(self) -> dict:
        return {
            "train": list(self.train_ids),
            "val": list(self.val_ids),
            "occ": list(self.occ_ids),
            "warnings": list(self.warnings),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def classify_images(ds: Dataset) -> dict[int, ImageTag]:
    counts = {im.id: [0, False] for im in ds.images}
    for ann in ds.annotations:
        c = counts.get(ann.image_id)
        if c is None:
            continue
        c[0] += 1
        c[1] = c[1] or ann.occlusion is not None
    tags = {}
    for image_id, (n, occluded) in sorted(counts.items()):
        kind = "empty" if n == 0 else "single" if n == 1 else "multi"
        tags[image_id] = ImageTag(kind, occluded)
    return tags


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def ablation_split(ds: Dataset, cfg: SplitConfig = SplitConfig()) -> SplitResult:
    tags = classify_images(ds)
    retained = [i for i, t in tags.items() if t.kind != "empty"]
    occ_pool = sorted(i for i in retained if tags[i].occluded)
    clean_pool = sorted(i for i in retained if not tags[i].occluded)
    n = len(retained)
    _, p_val, p_occ = cfg.proportions
    want_occ, want_val = _round_half_up(p_occ * n), _round_half_up(p_val * n)

    warnings = []
    n_occ = min(want_occ, len(occ_pool))
    if n_occ < want_occ:
        warnings.append(
            f"occlusion subset wants {want_occ} images but only {len(occ_pool)} are occluded; "
            f"remaining {want_occ - n_occ} go to train"
        )
    n_val = min(want_val, len(clean_pool))
    if n_val < want_val:
        warnings.append(
            f"validation subset wants {want_val} images but only {len(clean_pool)} are non-occluded; "
            f"remaining {want_val - n_val} go to train"
        )

    rng = SplitMix64(cfg.seed)
    rng.shuffle(occ_pool)
    rng.shuffle(clean_pool)
    occ_ids = sorted(occ_pool[:n_occ])
    val_ids = sorted(clean_pool[:n_val])
    train_ids = sorted(occ_pool[n_occ:] + clean_pool[n_val:])
    return SplitResult(tuple(train_ids), tuple(val_ids), tuple(occ_ids), tags, tuple(warnings))


def subset_dataset(ds: Dataset, image_ids) -> Dataset:
    keep = set(image_ids)
    return replace(
        ds,
        images=tuple(im for im in ds.images if im.id in keep),
        annotations=tuple(a for a in ds.annotations if a.image_id in keep),
    )
