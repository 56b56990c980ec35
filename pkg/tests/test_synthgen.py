from __future__ import annotations

import json
from itertools import combinations
from typing import TYPE_CHECKING

import numpy as np
import pytest
from pydantic import ValidationError

from kifsod import (
    AnnotatedImage,
    Augmentation,
    BatchMode,
    ConfigurationError,
    DataError,
    DatasetSpec,
    FewShotSet,
    build_fewshot_set,
    generate_dataset,
    load_dataset,
    load_fewshot,
    load_pool,
    match_iou,
    sample_batch,
    save_dataset,
    save_fewshot,
)
from kifsod._synthgen import CLASS_TABLE

if TYPE_CHECKING:
    from pathlib import Path


def _image(image_id: int, boxes: tuple, labels: tuple, size: int = 32) -> AnnotatedImage:
    return AnnotatedImage(
        image_id=image_id,
        pixels=np.full((size, size, 3), 0.5),
        boxes=boxes,
        labels=labels,
    )


def test_class_table() -> None:
    spec = DatasetSpec()
    assert spec.num_classes == 12
    assert spec.split.all_ids == tuple(range(12))
    names = spec.class_names()
    assert names[0] == "red circle"
    # blue circle and blue square are base classes, the other blue shapes are not
    blue = {i for i, c in enumerate(CLASS_TABLE) if c.color == "blue"}
    assert blue & set(spec.base_class_ids) == {
        i for i in blue if CLASS_TABLE[i].shape in ("circle", "square")
    }
    for i in spec.novel_class_ids:
        assert CLASS_TABLE[i].color == "blue" or CLASS_TABLE[i].shape == "star"


@pytest.mark.parametrize(
    "kwargs",
    [
        {"base_class_ids": (0, 1, 2, 3, 4, 5, 6, 7, 8), "novel_class_ids": (8, 9, 10, 11)},
        {"base_class_ids": (0, 1, 2, 3, 4, 5, 6), "novel_class_ids": (8, 9, 10, 11)},
        {"object_size": (16, 200)},
        {"objects_per_image": (3, 1)},
        {"image_size": 8},
    ],
)
def test_dataset_spec_validation(kwargs: dict) -> None:
    with pytest.raises(ValidationError):
        DatasetSpec(**kwargs)


def test_generate_dataset_contract() -> None:
    spec = DatasetSpec(seed=7)
    images = generate_dataset(spec, 100, spec.base_class_ids)
    assert len(images) == 100
    assert [im.image_id for im in images] == list(range(100))
    for image in images:
        assert image.pixels.shape == (128, 128, 3)
        assert image.pixels.dtype == np.float32
        assert 0.0 <= image.pixels.min() and image.pixels.max() <= 1.0
        assert set(image.labels) <= set(spec.base_class_ids)
        assert len(image.labels) <= 4
        for x0, y0, x1, y1 in image.boxes:
            assert x1 - x0 == y1 - y0
            assert 16 <= x1 - x0 <= 48
        for a, b in combinations(image.boxes, 2):
            assert match_iou(a, b) <= spec.max_gt_overlap_iou


def test_generate_dataset_deterministic(small_spec: DatasetSpec) -> None:
    first = generate_dataset(small_spec, 12, small_spec.novel_class_ids)
    second = generate_dataset(small_spec, 12, small_spec.novel_class_ids)
    threaded = generate_dataset(small_spec, 12, small_spec.novel_class_ids, workers=4)
    assert first == second == threaded
    assert all(np.array_equal(a.pixels, b.pixels) for a, b in zip(first, threaded))

    other = generate_dataset(small_spec.replace(seed=4), 12, small_spec.novel_class_ids)
    assert first != other


def test_generated_pixels_are_read_only(small_spec: DatasetSpec) -> None:
    (image,) = generate_dataset(small_spec, 1, (0,))
    with pytest.raises(ValueError):
        image.pixels[0, 0, 0] = 1.0


@pytest.mark.parametrize(
    "num_images, class_filter",
    [(0, (0, 1)), (5, ()), (5, (0, 12))],
)
def test_generate_dataset_errors(
    small_spec: DatasetSpec, num_images: int, class_filter: tuple
) -> None:
    with pytest.raises(ConfigurationError):
        generate_dataset(small_spec, num_images, class_filter)


def test_annotated_image_validation() -> None:
    with pytest.raises(ValidationError, match="outside"):
        _image(0, ((0, 0, 40, 10),), (1,))
    with pytest.raises(ValidationError, match="labels"):
        _image(0, ((0, 0, 10, 10),), (1, 2))
    with pytest.raises(ValidationError, match="H x W x 3"):
        AnnotatedImage(pixels=np.zeros((4, 4)))


def test_fewshot_counts(fewshot: FewShotSet) -> None:
    assert fewshot.k == 1
    assert set(fewshot.class_ids) == set(range(12))
    assert all(n == 1 for n in fewshot.per_class_instance_count.values())
    # recount independently from the annotations
    labels = [label for image in fewshot.images for label in image.labels]
    assert sorted(labels) == list(range(12))
    assert len(fewshot.instances()) == 12
    ids = [image.image_id for image in fewshot.images]
    assert len(ids) == len(set(ids))


def test_fewshot_keeps_pixels_and_selected_annotations(
    fewshot: FewShotSet,
    novel_images: list[AnnotatedImage],
    base_images: list[AnnotatedImage],
) -> None:
    pool = {image.image_id: image for image in novel_images + base_images}
    for image in fewshot.images:
        host = pool[image.image_id]
        assert np.array_equal(image.pixels, host.pixels)
        assert set(zip(image.boxes, image.labels)) <= set(zip(host.boxes, host.labels))


def test_fewshot_deterministic(
    novel_images: list[AnnotatedImage], base_images: list[AnnotatedImage]
) -> None:
    a = build_fewshot_set(novel_images, base_images, 1, seed=5)
    b = build_fewshot_set(novel_images, base_images, 1, seed=5)
    assert a == b


def test_fewshot_underfull_class_warns() -> None:
    pool = [_image(0, ((0, 0, 8, 8), (10, 10, 20, 20)), (8, 8))]
    with pytest.warns(UserWarning, match="only 2 instances"):
        fewshot = build_fewshot_set(pool, [], 3, seed=0)
    assert fewshot.per_class_instance_count == {8: 2}
    assert fewshot.images[0].num_instances == 2


def test_fewshot_missing_class() -> None:
    pool = [_image(0, ((0, 0, 8, 8),), (8,))]
    with pytest.raises(DataError, match="class 9"):
        build_fewshot_set(pool, [], 1, seed=0, class_ids=(8, 9))
    with pytest.raises(ConfigurationError):
        build_fewshot_set(pool, [], 0, seed=0)


def test_fewshot_set_validation() -> None:
    image = _image(0, ((0, 0, 8, 8),), (8,))
    with pytest.raises(ValidationError, match="does not match"):
        FewShotSet(images=(image,), per_class_instance_count={8: 2}, k=2)
    two = _image(0, ((0, 0, 8, 8), (10, 10, 20, 20)), (8, 8))
    with pytest.raises(ValidationError, match="more than K"):
        FewShotSet(images=(two,), per_class_instance_count={8: 2}, k=1)


def test_sample_batch_modes() -> None:
    image = _image(0, ((0, 0, 8, 8), (10, 10, 20, 20), (22, 0, 30, 8)), (8, 9, 10))
    fewshot = FewShotSet(
        images=(image,), per_class_instance_count={8: 1, 9: 1, 10: 1}, k=1
    )
    batch = sample_batch(fewshot, BatchMode.IMAGE_LEVEL, 4, seed=0)
    assert len(batch) == 4
    assert all(b.num_instances == 3 for b in batch)

    batch = sample_batch(fewshot, "instance_level", 4, seed=0)
    assert len(batch) == 4
    assert all(b.num_instances == 1 for b in batch)
    assert all(np.array_equal(b.pixels, image.pixels) for b in batch)

    # without replacement when there are enough candidates
    batch = sample_batch(fewshot, "instance_level", 3, seed=1)
    assert sorted(b.labels[0] for b in batch) == [8, 9, 10]

    assert sample_batch(fewshot, "instance_level", 4, seed=2) == sample_batch(
        fewshot, "instance_level", 4, seed=2
    )
    with pytest.raises(ConfigurationError):
        sample_batch(fewshot, "image_level", 0, seed=0)


def test_batch_modes_over_many_episodes(
    novel_images: list[AnnotatedImage], base_images: list[AnnotatedImage]
) -> None:
    for seed in range(1000):
        episode = build_fewshot_set(novel_images, base_images, 1, seed)
        hosts = {im.image_id: im for im in episode.images}
        for b in sample_batch(episode, "image_level", 4, seed):
            assert b == hosts[b.image_id]
        for b in sample_batch(episode, "instance_level", 4, seed):
            host = hosts[b.image_id]
            assert b.num_instances == 1
            assert (b.boxes[0], b.labels[0]) in set(zip(host.boxes, host.labels))


def test_dataset_round_trip(tmp_path: Path, small_spec: DatasetSpec) -> None:
    images = generate_dataset(small_spec, 6, small_spec.base_class_ids)
    save_dataset(tmp_path / "pool", small_spec, images, "base_train")
    manifest, loaded = load_dataset(tmp_path / "pool")
    assert loaded == images
    assert manifest.spec == small_spec
    assert manifest.split == "base_train"

    raw = json.loads((tmp_path / "pool" / "manifest.json").read_text())
    assert {"image_size", "classes", "base_ids", "novel_ids", "records"} <= set(raw)
    assert set(raw["records"][0]) >= {"file", "boxes", "labels"}
    assert raw["classes"][0] == "red circle"

    # the pool directory itself is also a benchmark root of one pool
    _, pool = load_pool(tmp_path / "pool", "base_train")
    assert pool == images
    with pytest.raises(DataError, match="no pool"):
        load_pool(tmp_path / "pool", "test")
    with pytest.raises(DataError):
        load_dataset(tmp_path / "missing")


def test_fewshot_round_trip(
    tmp_path: Path, small_spec: DatasetSpec, fewshot: FewShotSet
) -> None:
    save_fewshot(tmp_path / "episode", small_spec, fewshot)
    manifest, loaded = load_fewshot(tmp_path / "episode")
    assert loaded == fewshot
    assert manifest.k == 1
    assert manifest.split == "episode"

    save_dataset(tmp_path / "plain", small_spec, list(fewshot.images), "test")
    with pytest.raises(DataError, match="not a few-shot episode"):
        load_fewshot(tmp_path / "plain")


def test_augmentation() -> None:
    assert Augmentation.identity().is_identity
    assert not Augmentation().is_identity
    rng = np.random.default_rng(0)
    draws = [Augmentation().draw(rng) for _ in range(200)]
    assert all(0.8 <= scale <= 1.2 for scale, _ in draws)
    assert {flip for _, flip in draws} == {True, False}
    assert Augmentation.identity().draw(rng) == (1.0, False)
    with pytest.raises(ValidationError):
        Augmentation(scale_range=(1.2, 0.8))
