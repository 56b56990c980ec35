from __future__ import annotations

import warnings

import pytest

from kifsod import (
    AnnotatedImage,
    DatasetSpec,
    Detector,
    FewShotSet,
    build_fewshot_set,
    extend_classifier,
    generate_dataset,
)

NOVEL = (8, 9, 10, 11)


@pytest.fixture(scope="session")
def small_spec() -> DatasetSpec:
    return DatasetSpec(image_size=64, object_size=(12, 24), objects_per_image=(1, 3), seed=3)


@pytest.fixture(scope="session")
def base_images(small_spec: DatasetSpec) -> list[AnnotatedImage]:
    return generate_dataset(small_spec, 40, small_spec.base_class_ids)


@pytest.fixture(scope="session")
def novel_images(small_spec: DatasetSpec) -> list[AnnotatedImage]:
    return generate_dataset(small_spec, 20, small_spec.novel_class_ids, start_index=100)


@pytest.fixture(scope="session")
def fewshot(
    novel_images: list[AnnotatedImage], base_images: list[AnnotatedImage]
) -> FewShotSet:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return build_fewshot_set(novel_images, base_images, 1, seed=0)


@pytest.fixture
def detector() -> Detector:
    return Detector(range(8), image_size=64, seed=0)


@pytest.fixture
def extended(detector: Detector) -> Detector:
    return extend_classifier(detector, NOVEL, seed=1)

