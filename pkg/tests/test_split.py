from __future__ import annotations

import numpy as np
import pytest

from conftest import load_json
from generators import random_dataset
from occuray import coco
from occuray.annotate import annotate_dataset
from occuray.split import SplitConfig, SplitMix64, ablation_split, classify_images, subset_dataset


def synthetic(n_annotated: int, n_occluded: int, n_empty: int = 0, seed: int = 0) -> coco.Dataset:
    """Images 1..n with one or two annotations each; the first ``n_occluded`` (after shuffling) carry a record."""
    rng = np.random.default_rng(seed)
    ids = list(range(1, n_annotated + n_empty + 1))
    order = rng.permutation(n_annotated)
    occluded = {ids[i] for i in order[:n_occluded]}
    images, anns = [], []
    for i in ids:
        images.append(coco.ImageRecord(i, 8, 8, f"{i}.png"))
        if i > n_annotated:
            continue
        occ = None
        if i in occluded:
            occ = coco.OcclusionRecord((10 * i + 1,), {"size": [8, 8], "counts": "0880"}, 1)
        anns.append(coco.AnnotationRecord(10 * i, i, 1, (0, 0, 1, 1), None, 1, 0, occ))
        if i in occluded or rng.random() < 0.3:
            anns.append(coco.AnnotationRecord(10 * i + 1, i, 1, (0, 0, 1, 1), None, 1, 0, None))
    return coco.Dataset(tuple(images), tuple(anns), (coco.CategoryRecord(1, "a"),))


def check_invariants(ds: coco.Dataset, res) -> None:
    tags = classify_images(ds)
    retained = {i for i, t in tags.items() if t.kind != "empty"}
    parts = [set(res.train_ids), set(res.val_ids), set(res.occ_ids)]
    assert sum(len(p) for p in parts) == len(retained)
    assert set().union(*parts) == retained
    assert all(tags[i].occluded for i in res.occ_ids)
    assert not any(tags[i].occluded for i in res.val_ids)
    for ids in (res.train_ids, res.val_ids, res.occ_ids):
        assert list(ids) == sorted(ids)


def test_default_sizes():
    res = ablation_split(synthetic(100, 20))
    assert (len(res.train_ids), len(res.val_ids), len(res.occ_ids)) == (78, 12, 10)
    assert res.warnings == ()


def test_pool_limited_occlusion_subset():
    res = ablation_split(synthetic(100, 5))
    assert (len(res.train_ids), len(res.val_ids), len(res.occ_ids)) == (83, 12, 5)
    assert len(res.warnings) == 1 and "occlusion subset" in res.warnings[0]


def test_empty_images_dropped():
    ds = synthetic(100, 20, n_empty=17)
    res = ablation_split(ds)
    assert (len(res.train_ids), len(res.val_ids), len(res.occ_ids)) == (78, 12, 10)
    assert not set(range(101, 118)) & set(res.train_ids + res.val_ids + res.occ_ids)


def test_rounding_half_up():
    # 25 images: val 0.12*25 = 3.0 -> 3, occ 0.10*25 = 2.5 rounds up to 3
    res = ablation_split(synthetic(25, 10))
    assert (len(res.val_ids), len(res.occ_ids)) == (3, 3)


def test_validation_pool_exhausted():
    res = ablation_split(synthetic(10, 10))
    assert len(res.val_ids) == 0
    assert len(res.occ_ids) == 1
    assert any("validation subset" in w for w in res.warnings)


def test_same_seed_identical():
    ds = synthetic(100, 20)
    a = ablation_split(ds, SplitConfig(seed=5))
    b = ablation_split(ds, SplitConfig(seed=5))
    assert a == b
    assert a.to_json() == b.to_json()


def test_seeds_permute_membership_not_sizes():
    ds = synthetic(100, 20)
    a = ablation_split(ds, SplitConfig(seed=1))
    b = ablation_split(ds, SplitConfig(seed=2))
    assert a.val_ids != b.val_ids
    assert [len(x) for x in a.subsets().values()] == [len(x) for x in b.subsets().values()]


def test_invariants_random():
    rng = np.random.default_rng(0)
    for k in range(200):
        n = int(rng.integers(1, 60))
        ds = synthetic(n, int(rng.integers(0, n + 1)), int(rng.integers(0, 5)), seed=k)
        props = rng.dirichlet([1, 1, 1])
        props[0] = 1 - props[1] - props[2]
        cfg = SplitConfig(tuple(float(p) for p in props), seed=int(rng.integers(0, 2**63)))
        check_invariants(ds, ablation_split(ds, cfg))


def test_invariants_on_annotated_random_datasets():
    for seed in range(20):
        ds = annotate_dataset(coco.dataset_from_dict(random_dataset(seed, max_images=8)))
        check_invariants(ds, ablation_split(ds, SplitConfig(seed=seed)))


def test_classify_two_squares():
    ds = coco.dataset_from_dict(load_json("two_squares.json"))
    tags = classify_images(ds)
    assert tags[1].kind == "multi" and tags[1].occluded
    assert tags[2].kind == "single" and not tags[2].occluded


def test_classify_basic():
    ds = synthetic(2, 0, n_empty=1)
    tags = classify_images(ds)
    assert tags[3].kind == "empty"


def test_manifest_json_shape():
    res = ablation_split(synthetic(100, 5))
    d = res.to_dict()
    assert list(d) == ["train", "val", "occ", "warnings"]
    assert len(d["warnings"]) == 1


def test_subset_dataset_keeps_annotations():
    ds = synthetic(20, 4)
    res = ablation_split(ds)
    sub = subset_dataset(ds, res.occ_ids)
    assert {im.id for im in sub.images} == set(res.occ_ids)
    assert all(a.image_id in set(res.occ_ids) for a in sub.annotations)


def test_config_validation():
    with pytest.raises(ValueError):
        SplitConfig((0.5, 0.5, 0.5))
    with pytest.raises(ValueError):
        SplitConfig((1.2, -0.1, -0.1))


def test_splitmix_reference_values():
    # published splitmix64 outputs for seed 1234567
    rng = SplitMix64(1234567)
    assert [rng.next() for _ in range(3)] == [6457827717110365317, 3203168211198807973, 9817491932198370423]


def test_bounded_draws_in_range():
    rng = SplitMix64(9)
    assert all(0 <= rng.below(7) < 7 for _ in range(1000))
    with pytest.raises(ValueError):
        rng.below(0)
