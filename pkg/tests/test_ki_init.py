from __future__ import annotations

import csv
from typing import TYPE_CHECKING

import numpy as np
import pytest
import torch
from pydantic import ValidationError

from kifsod import (
    CentroidSet,
    ClassifierKind,
    ConfigurationError,
    DataError,
    DegenerateGeometryError,
    Detector,
    FewShotSet,
    InitMode,
    ShapeError,
    aggregate_centroids,
    describe_architecture,
    dump_embeddings,
    estimate_alr_ratio,
    hypersphere_stats,
    inherit_centroids,
    install_centroids,
    make_novel_centroids,
    read_embeddings,
)
from kifsod._detector import classifier_rows, init_novel_rows

if TYPE_CHECKING:
    from pathlib import Path

NOVEL = (8, 9, 10, 11)


def test_aggregate_identity_and_mean() -> None:
    z = np.array([0.3, -1.2, 4.0])
    assert np.array_equal(aggregate_centroids([(8, z)], 1, 1)[8], z)

    out = aggregate_centroids([(8, np.array([1.0, 0.0])), (8, np.array([0.0, 1.0]))], 2, 1)
    assert np.array_equal(out[8], [0.5, 0.5])


def test_aggregate_matches_independent_mean() -> None:
    rng = np.random.default_rng(0)
    vectors = rng.normal(size=(20, 16))
    out = aggregate_centroids([(9, v) for v in vectors], 10, 2)
    expected = np.zeros(16)
    for v in vectors[::-1]:
        expected += v
    expected /= 20
    np.testing.assert_allclose(out[9], expected, rtol=0, atol=1e-12)


def test_aggregate_underfull_class() -> None:
    # a class with fewer than K shots is averaged over what it has
    features = [(8, np.ones(2)), (8, np.ones(2) * 3), (9, np.ones(2))]
    out = aggregate_centroids(features, 3, 1)
    assert np.array_equal(out[8], [2.0, 2.0])
    assert np.array_equal(out[9], [1.0, 1.0])


@pytest.mark.parametrize(
    "features, k, views",
    [
        ([], 1, 1),
        ([(8, np.ones(2))] * 3, 2, 2),
        ([(8, np.ones(2))] * 6, 2, 2),
    ],
)
def test_aggregate_errors(features: list, k: int, views: int) -> None:
    with pytest.raises(DataError):
        aggregate_centroids(features, k, views)


def _direction(rng: np.random.Generator, dim: int = 8) -> np.ndarray:
    v = rng.normal(size=dim)
    return v / np.linalg.norm(v)


def test_ratio_constant_lengths() -> None:
    rng = np.random.default_rng(1)
    features = [(c, 4 * _direction(rng)) for c in range(3)]
    centroids = {c: 2 * _direction(rng) for c in range(3)}
    assert estimate_alr_ratio(features, centroids) == pytest.approx(2.0, abs=1e-12)


def test_ratio_two_classes() -> None:
    features = [(0, np.array([3.0, 0.0])), (1, np.array([0.0, 5.0]))]
    centroids = {0: np.array([1.0, 0.0]), 1: np.array([0.0, 3.0])}
    assert estimate_alr_ratio(features, centroids) == 2.0


@pytest.mark.parametrize("scale", [0.5, 1.0, 4.0])
def test_ratio_recovers_constructed_scale(scale: float) -> None:
    rng = np.random.default_rng(2)
    centroids = {c: rng.normal(size=16) * (c + 1) for c in range(8)}
    # several views per class whose mean is exactly scale * centroid
    features = []
    for c, v in centroids.items():
        noise = rng.normal(size=16)
        features += [(c, scale * v + noise), (c, scale * v - noise)]
    assert estimate_alr_ratio(features, centroids) == pytest.approx(scale, abs=1e-9)


def test_ratio_errors() -> None:
    centroids = {0: np.array([1.0, 0.0])}
    with pytest.raises(DegenerateGeometryError):
        estimate_alr_ratio([(0, np.zeros(2))], centroids)
    with pytest.raises(DegenerateGeometryError):
        estimate_alr_ratio([(0, np.ones(2))], {0: np.zeros(2)})
    with pytest.raises(DataError, match="no base features"):
        estimate_alr_ratio([(0, np.ones(2))], {0: np.ones(2), 1: np.ones(2)})
    with pytest.raises(DataError):
        estimate_alr_ratio([(0, np.ones(2))], {})


def test_make_novel_centroids() -> None:
    raw = {8: np.array([3.0, 4.0])}
    unit = make_novel_centroids(raw, "l2norm")
    np.testing.assert_allclose(unit.vector(8), [0.6, 0.8])
    assert unit.ratio is None

    alr = make_novel_centroids(raw, InitMode.ALR, ratio=2.0)
    assert np.array_equal(alr.vector(8), [1.5, 2.0])
    assert alr.ratio == 2.0
    assert alr.raw_aggregates == {8: (3.0, 4.0)}

    rng = np.random.default_rng(3)
    raw = {c: rng.normal(size=32) for c in NOVEL}
    a = make_novel_centroids(raw, "l2norm")
    b = make_novel_centroids(raw, "alr", ratio=7.3)
    for c in NOVEL:
        u, v = a.vector(c), b.vector(c)
        cos = u @ v / (np.linalg.norm(u) * np.linalg.norm(v))
        assert cos == pytest.approx(1.0, abs=1e-9)
        assert np.linalg.norm(u) == pytest.approx(1.0, abs=1e-6)
        assert np.array_equal(b.vector(c), raw[c] / 7.3)


def test_make_novel_centroids_errors() -> None:
    with pytest.raises(DegenerateGeometryError, match="class 9"):
        make_novel_centroids({8: np.ones(2), 9: np.zeros(2)}, "l2norm")
    with pytest.raises(ConfigurationError):
        make_novel_centroids({8: np.ones(2)}, "alr")
    with pytest.raises(ConfigurationError):
        make_novel_centroids({8: np.ones(2)}, "random")


def test_centroid_set_validation(tmp_path: Path) -> None:
    with pytest.raises(ValidationError, match="unit length"):
        CentroidSet(mode="l2norm", centroids={8: (3.0, 4.0)})
    with pytest.raises(ValidationError, match="aggregate / ratio"):
        CentroidSet(
            mode="alr", ratio=2.0, centroids={8: (1.0, 1.0)}, raw_aggregates={8: (3.0, 4.0)}
        )
    with pytest.raises(ValidationError, match="requires a ratio"):
        CentroidSet(mode="alr", centroids={8: (1.0, 1.0)}, raw_aggregates={8: (1.0, 1.0)})
    assert CentroidSet(mode="random").class_ids == ()

    rng = np.random.default_rng(4)
    alr = make_novel_centroids({c: rng.normal(size=8) for c in NOVEL}, "alr", ratio=1.7)
    path = alr.save(tmp_path / "centroids.json")
    assert CentroidSet.from_file(path) == alr


def _centroids(dim: int = 64, mode: str = "l2norm") -> CentroidSet:
    rng = np.random.default_rng(5)
    return make_novel_centroids({c: rng.normal(size=dim) for c in NOVEL}, mode)


def test_install_centroids(extended: Detector) -> None:
    centroids = _centroids()
    installed = install_centroids(extended, centroids)
    assert installed is not extended

    before, after = extended.classifier, installed.classifier
    base_rows = [extended.row_of(c) for c in extended.base_ids]
    bg = extended.background_row
    assert torch.equal(before.weight[base_rows], after.weight[base_rows])
    assert torch.equal(before.bias[base_rows], after.bias[base_rows])
    assert torch.equal(before.weight[bg], after.weight[bg])
    for c in NOVEL:
        row = installed.row_of(c)
        expected = torch.tensor(centroids.centroids[c], dtype=torch.float32)
        assert torch.equal(after.weight[row], expected)
        assert after.bias[row] == 0.0
    for name in ("backbone", "proposal", "roi_head", "regressor"):
        a, b = extended.component(name).state_dict(), installed.component(name).state_dict()
        assert all(torch.equal(a[k], b[k]) for k in a)

    # base logits do not depend on the novel rows
    emb = torch.randn(5, extended.embed_dim, generator=torch.Generator().manual_seed(0))
    with torch.no_grad():
        assert torch.equal(
            extended.classify(emb)[:, base_rows], installed.classify(emb)[:, base_rows]
        )
    assert describe_architecture(installed) == describe_architecture(extended)


def test_install_modes(extended: Detector) -> None:
    imprinted = install_centroids(extended, _centroids(mode="imprinted"))
    assert imprinted.classifier_kind is ClassifierKind.COSINE
    assert extended.classifier_kind is ClassifierKind.LINEAR

    random = install_centroids(extended, CentroidSet(mode="random"), seed=3)
    rows = [random.row_of(c) for c in NOVEL]
    assert torch.equal(random.classifier.weight[rows], init_novel_rows(4, 64, 3))
    assert torch.all(random.classifier.bias[rows] == 0)


def test_install_errors(detector: Detector, extended: Detector) -> None:
    with pytest.raises(ConfigurationError, match="extend"):
        install_centroids(detector, _centroids())
    with pytest.raises(ShapeError):
        install_centroids(extended, _centroids(dim=2))
    rng = np.random.default_rng(6)
    partial = make_novel_centroids({8: rng.normal(size=64)}, "l2norm")
    with pytest.raises(DataError):
        install_centroids(extended, partial)


def test_inherit_centroids(detector: Detector, fewshot: FewShotSet) -> None:
    alr = inherit_centroids(detector, fewshot, "alr", views=2, seed=0, novel_ids=NOVEL)
    assert alr.mode is InitMode.ALR
    assert alr.class_ids == NOVEL
    assert alr.ratio is not None and alr.ratio > 0
    assert alr.views == 2
    assert alr.dim == detector.embed_dim

    # the few-shot classes unknown to the detector are the novel ones
    unit = inherit_centroids(detector, fewshot, "l2norm", views=2, seed=0)
    assert unit.class_ids == NOVEL
    for c in NOVEL:
        assert np.linalg.norm(unit.vector(c)) == pytest.approx(1.0, abs=1e-6)
        np.testing.assert_allclose(unit.vector(c) * np.linalg.norm(alr.vector(c)), alr.vector(c), atol=1e-9)

    again = inherit_centroids(detector, fewshot, "alr", views=2, seed=0, novel_ids=NOVEL)
    assert again == alr

    assert inherit_centroids(detector, fewshot, "random").centroids == {}


def test_inherit_then_install(detector: Detector, fewshot: FewShotSet) -> None:
    from kifsod import extend_classifier

    extended = extend_classifier(detector, NOVEL)
    centroids = inherit_centroids(extended, fewshot, "alr", views=1)
    installed = install_centroids(extended, centroids)
    rows = classifier_rows(installed, NOVEL)
    for c in NOVEL:
        np.testing.assert_allclose(rows[c], centroids.vector(c), rtol=1e-6, atol=1e-7)


def test_hypersphere_stats() -> None:
    rng = np.random.default_rng(7)
    features = [(c, _direction(rng)) for c in range(4)]
    centroids = {c: _direction(rng) for c in range(4)}
    stats = hypersphere_stats(features, centroids)
    assert stats.feature_length_mean == pytest.approx(1.0)
    assert stats.feature_length_std == pytest.approx(0.0, abs=1e-12)
    assert stats.centroid_length_mean == pytest.approx(1.0)

    stats = hypersphere_stats(features, {0: np.array([1.0, 0.0]), 1: np.array([0.0, 3.0])})
    assert stats.centroid_length_mean == 2.0
    assert stats.centroid_length_std == 1.0
    with pytest.raises(DataError):
        hypersphere_stats([], centroids)


def test_dump_embeddings(tmp_path: Path) -> None:
    rng = np.random.default_rng(8)
    features = [(c % 4, rng.normal(size=6)) for c in range(8)]
    centroids = {8: rng.normal(size=6), 9: rng.normal(size=6)}
    path = dump_embeddings(features, centroids, tmp_path / "emb" / "embeddings.csv")

    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["class_id", "is_centroid", "v0", "v1", "v2", "v3", "v4", "v5"]
    assert len(rows) == 11

    parsed = read_embeddings(path)
    assert [c for c, _, _ in parsed] == [0, 1, 2, 3, 0, 1, 2, 3, 8, 9]
    assert [flag for _, flag, _ in parsed] == [False] * 8 + [True] * 2
    originals = [v for _, v in features] + list(centroids.values())
    for (_, _, v), z in zip(parsed, originals):
        assert np.linalg.norm(v) == pytest.approx(1.0, abs=1e-5)
        np.testing.assert_allclose(v, z / np.linalg.norm(z), atol=1e-6)


def test_dump_embeddings_errors(tmp_path: Path) -> None:
    with pytest.raises(DataError):
        dump_embeddings([], {}, tmp_path / "e.csv")
    with pytest.raises(ShapeError):
        dump_embeddings([(0, np.ones(2)), (1, np.ones(3))], {}, tmp_path / "e.csv")
    with pytest.raises(DegenerateGeometryError):
        dump_embeddings([(0, np.zeros(2))], {}, tmp_path / "e.csv")
    (tmp_path / "bad.csv").write_text("a,b\n")
    with pytest.raises(DataError):
        read_embeddings(tmp_path / "bad.csv")
