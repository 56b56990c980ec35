from __future__ import annotations

import copy
import csv
import logging
from collections import defaultdict
from pathlib import Path
from typing import TYPE_CHECKING, Optional, Union

import numpy as np
import torch
from pydantic import Field, model_validator
from typing_extensions import Self

from kifsod._base_model import KifsodModel
from kifsod._detector import (
    Detector,
    classifier_rows,
    extract_instance_features,
    init_novel_rows,
)
from kifsod._errors import (
    ConfigurationError,
    DataError,
    DegenerateGeometryError,
    ShapeError,
)
from kifsod._utils import ClassifierKind, InitMode

if TYPE_CHECKING:
    from collections.abc import Iterable, Mapping, Sequence

    from kifsod._synthgen import Augmentation, FewShotSet

    Feature = tuple[int, np.ndarray]

__all__ = [
    "CentroidSet",
    "LengthStats",
    "aggregate_centroids",
    "dump_embeddings",
    "estimate_alr_ratio",
    "hypersphere_stats",
    "inherit_centroids",
    "install_centroids",
    "make_novel_centroids",
    "read_embeddings",
]

logger = logging.getLogger(__name__)


class CentroidSet(KifsodModel):
    """Novel classifier rows predicted from few-shot features.

    Attributes
    ----------
    mode : InitMode
        How `centroids` were derived from `raw_aggregates`.
    ratio : float | None
        The estimated feature/centroid length ratio (alr mode only).
    centroids : dict[int, tuple[float, ...]]
        Novel class id -> classifier row to install.  Empty in random mode.
    raw_aggregates : dict[int, tuple[float, ...]]
        Novel class id -> mean feature vector.
    views : int | None
        Augmented views per instance the aggregates were computed from.
    seed : int | None
        Seed of the augmentation draws.
    """

    mode: InitMode
    ratio: Optional[float] = Field(None, gt=0)
    centroids: dict[int, tuple[float, ...]] = Field(default_factory=dict)
    raw_aggregates: dict[int, tuple[float, ...]] = Field(default_factory=dict)
    views: Optional[int] = None
    seed: Optional[int] = None

    @model_validator(mode="after")
    def _validate_mode(self) -> Self:
        if self.mode is InitMode.RANDOM:
            return self
        if not self.centroids:
            raise ValueError(f"mode {self.mode!s} requires centroids")
        if self.mode is InitMode.ALR:
            if self.ratio is None:
                raise ValueError("mode alr requires a ratio")
            for c, v in self.centroids.items():
                if c not in self.raw_aggregates:
                    raise ValueError(f"missing raw aggregate of class {c}")
                if not np.array_equal(np.asarray(self.raw_aggregates[c]) / self.ratio, v):
                    raise ValueError(f"centroid of class {c} is not its aggregate / ratio")
        else:
            for c, v in self.centroids.items():
                if abs(np.linalg.norm(v) - 1.0) > 1e-6:
                    raise ValueError(f"centroid of class {c} is not unit length")
        return self

    @property
    def class_ids(self) -> tuple[int, ...]:
        return tuple(sorted(self.centroids))

    @property
    def dim(self) -> Optional[int]:
        for v in self.centroids.values():
            return len(v)
        return None

    def vector(self, class_id: int) -> np.ndarray:
        return np.asarray(self.centroids[class_id], dtype=np.float64)


class LengthStats(KifsodModel):
    """Euclidean length statistics of aggregated features and classifier rows."""

    feature_length_mean: float = Field(..., ge=0)
    feature_length_std: float = Field(..., ge=0)
    centroid_length_mean: float = Field(..., ge=0)
    centroid_length_std: float = Field(..., ge=0)

    @property
    def feature_cv(self) -> float:
        """Coefficient of variation of the aggregated feature lengths."""
        if self.feature_length_mean == 0:
            return float("inf")
        return self.feature_length_std / self.feature_length_mean


def _group(features: Iterable[Feature]) -> dict[int, list[np.ndarray]]:
    groups: dict[int, list[np.ndarray]] = defaultdict(list)
    for c, z in features:
        groups[int(c)].append(np.asarray(z, dtype=np.float64))
    return groups


def _class_means(features: Iterable[Feature]) -> dict[int, np.ndarray]:
    return {c: np.mean(np.stack(zs), axis=0) for c, zs in _group(features).items()}


def aggregate_centroids(
    features: Sequence[Feature], k: int, views: int
) -> dict[int, np.ndarray]:
    """Average each class's `shots x views` feature vectors.

    A class with fewer than `k` shots is averaged over the vectors it has.

    Parameters
    ----------
    features : Sequence[tuple[int, np.ndarray]]
        `(class id, vector)` pairs.
    k : int
        Shots per class.
    views : int
        Augmented views per shot.
    """
    if not features:
        raise DataError("cannot aggregate an empty feature list")
    groups = _group(features)
    for c, zs in groups.items():
        if len(zs) % views or len(zs) > k * views:
            raise DataError(
                f"class {c} has {len(zs)} vectors, expected a multiple of R={views} "
                f"no larger than K*R={k * views}"
            )
    return {c: np.mean(np.stack(zs), axis=0) for c, zs in sorted(groups.items())}


def estimate_alr_ratio(
    base_features: Sequence[Feature],
    base_centroids: Mapping[int, np.ndarray],
) -> float:
    """Ratio of the mean aggregated base-feature length to the mean base-row length.

    Each base class's features are first averaged into one vector; the numerator
    is the mean of those vectors' lengths over the base classes, the denominator
    the mean length of the classes' classifier rows.  The background row is not
    part of `base_centroids`.
    """
    if not base_centroids:
        raise DataError("no base centroids given")
    means = _class_means(base_features)
    if missing := sorted(set(base_centroids) - set(means)):
        raise DataError(f"no base features for classes {missing}")
    classes = sorted(base_centroids)
    feature_length = float(np.mean([np.linalg.norm(means[c]) for c in classes]))
    centroid_length = float(
        np.mean([np.linalg.norm(np.asarray(base_centroids[c])) for c in classes])
    )
    if feature_length == 0.0:
        raise DegenerateGeometryError("aggregated base features have zero length")
    if centroid_length == 0.0:
        raise DegenerateGeometryError("base classifier rows have zero length")
    return feature_length / centroid_length


def make_novel_centroids(
    raw: Mapping[int, np.ndarray],
    mode: Union[InitMode, str],
    ratio: Optional[float] = None,
) -> CentroidSet:
    """Turn aggregated novel features into classifier rows.

    `l2norm` (and `imprinted`) divide each aggregate by its length; `alr` divides
    it by `ratio`.  Both keep the aggregate's direction.
    """
    mode = InitMode(mode)
    if mode is InitMode.RANDOM:
        raise ConfigurationError("random initialization needs no centroids")
    if mode is InitMode.ALR and (ratio is None or ratio <= 0):
        raise ConfigurationError(f"mode alr requires a ratio > 0, got {ratio}")
    centroids = {}
    for c, v in raw.items():
        v = np.asarray(v, dtype=np.float64)
        norm = float(np.linalg.norm(v))
        if norm == 0.0:
            raise DegenerateGeometryError(f"aggregated feature of class {c} has zero length")
        centroids[int(c)] = tuple((v / ratio) if mode is InitMode.ALR else (v / norm))
    return CentroidSet(
        mode=mode,
        ratio=ratio if mode is InitMode.ALR else None,
        centroids=centroids,
        raw_aggregates={int(c): tuple(np.asarray(v, dtype=np.float64)) for c, v in raw.items()},
    )


def install_centroids(
    detector: Detector, centroids: CentroidSet, *, seed: int = 0
) -> Detector:
    """Return a copy of `detector` whose novel classifier rows are `centroids`.

    Novel biases are set to zero; every other weight is copied unchanged.  In
    random mode the novel rows are redrawn from `seed`; in imprinted mode the
    classifier switches to the cosine kind.
    """
    if not detector.novel_ids:
        raise ConfigurationError("the classifier has no novel rows; extend it first")
    new = copy.deepcopy(detector)
    weight, bias = new.classifier.weight, new.classifier.bias
    rows = [new.row_of(c) for c in new.novel_ids]
    with torch.no_grad():
        if centroids.mode is InitMode.RANDOM:
            values = init_novel_rows(len(rows), new.embed_dim, seed, dtype=weight.dtype)
        else:
            if set(centroids.centroids) != set(new.novel_ids):
                raise DataError(
                    f"centroids cover {sorted(centroids.centroids)}, "
                    f"the detector's novel classes are {sorted(new.novel_ids)}"
                )
            if centroids.dim != new.embed_dim:
                raise ShapeError(
                    f"centroid dimension {centroids.dim} differs from the "
                    f"embedding dimension {new.embed_dim}"
                )
            values = torch.tensor(
                [centroids.centroids[c] for c in new.novel_ids], dtype=weight.dtype
            )
        weight[rows] = values
        bias[rows] = 0.0
    if centroids.mode is InitMode.IMPRINTED:
        new.classifier_kind = ClassifierKind.COSINE
    logger.info("installed %s rows for classes %s", centroids.mode, new.novel_ids)
    return new


def inherit_centroids(
    detector: Detector,
    fewshot: FewShotSet,
    mode: Union[InitMode, str],
    *,
    views: int = 10,
    seed: int = 0,
    novel_ids: Optional[Iterable[int]] = None,
    augmentation: Optional[Augmentation] = None,
) -> CentroidSet:
    """Predict novel classifier rows from the few-shot set without training.

    Every instance of `fewshot` is embedded under `views` augmented views.  Novel
    instances give the aggregates; with mode `alr`, base instances and the base
    classifier rows give the length ratio.

    Parameters
    ----------
    detector : Detector
        The pretrained (optionally already extended) detector.
    fewshot : FewShotSet
        The K-shot set.
    mode : InitMode | str
        `random`, `l2norm`, `alr` or `imprinted`.
    views : int
        Augmented views R per instance. By default, 10.
    seed : int
        Seed of the augmentation draws.
    novel_ids : Iterable[int] | None
        By default, the detector's novel classes, or else every class of the
        set the detector does not know.
    augmentation : Augmentation | None
        By default, `Augmentation()` (the pretraining augmentation).
    """
    mode = InitMode(mode)
    if mode is InitMode.RANDOM:
        return CentroidSet(mode=mode, seed=seed)
    if novel_ids is not None:
        novel = set(novel_ids)
    elif detector.novel_ids:
        novel = set(detector.novel_ids)
    else:
        novel = set(fewshot.class_ids) - set(detector.class_ids)
    if not novel:
        raise DataError("the few-shot set holds no novel class")

    features: list[Feature] = []
    for image in fewshot.images:
        features.extend(
            extract_instance_features(
                detector, image, views, seed, augmentation=augmentation
            )
        )
    novel_features = [(c, z) for c, z in features if c in novel]
    raw = aggregate_centroids(novel_features, fewshot.k, views)
    if missing := sorted(novel - set(raw)):
        raise DataError(f"no few-shot instances of novel classes {missing}")

    ratio = None
    if mode is InitMode.ALR:
        base = [c for c in detector.class_ids if c not in novel]
        base_features = [(c, z) for c, z in features if c in base]
        ratio = estimate_alr_ratio(base_features, classifier_rows(detector, base))
        logger.info("estimated length ratio %.6f", ratio)
    return make_novel_centroids(raw, mode, ratio).replace(views=views, seed=seed)


def hypersphere_stats(
    features: Sequence[Feature], centroids: Mapping[int, np.ndarray]
) -> LengthStats:
    """Mean and population std of aggregated feature and classifier-row lengths."""
    if not features or not centroids:
        raise DataError("hypersphere statistics need features and centroids")
    feature_lengths = [np.linalg.norm(v) for v in _class_means(features).values()]
    centroid_lengths = [np.linalg.norm(np.asarray(v)) for v in centroids.values()]
    return LengthStats(
        feature_length_mean=float(np.mean(feature_lengths)),
        feature_length_std=float(np.std(feature_lengths)),
        centroid_length_mean=float(np.mean(centroid_lengths)),
        centroid_length_std=float(np.std(centroid_lengths)),
    )


def _unit(v: np.ndarray, what: str) -> np.ndarray:
    norm = float(np.linalg.norm(v))
    if norm == 0.0:
        raise DegenerateGeometryError(f"cannot normalize the zero vector of {what}")
    return v / norm


def dump_embeddings(
    features: Sequence[Feature],
    centroids: Mapping[int, np.ndarray],
    path: Union[str, Path],
) -> Path:
    """Write L2-normalized features and centroids as CSV for external projection.

    Header `class_id,is_centroid,v0,...,v{d-1}`; values with 6 decimals.
    """
    rows = [(int(c), 0, np.asarray(z, dtype=np.float64)) for c, z in features]
    rows += [(int(c), 1, np.asarray(v, dtype=np.float64)) for c, v in centroids.items()]
    if not rows:
        raise DataError("nothing to dump")
    dim = rows[0][2].shape[0]
    if any(v.shape != (dim,) for _, _, v in rows):
        raise ShapeError("all dumped vectors must share one dimension")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class_id", "is_centroid", *(f"v{i}" for i in range(dim))])
        for c, flag, v in rows:
            unit = _unit(v, f"class {c}")
            writer.writerow([c, flag, *(f"{x:.6f}" for x in unit)])
    return path


def read_embeddings(path: Union[str, Path]) -> list[tuple[int, bool, np.ndarray]]:
    """Parse a dump written by `dump_embeddings`."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"embedding dump {path} does not exist")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[:2] != ["class_id", "is_centroid"]:
            raise DataError(f"{path} is not an embedding dump")
        return [
            (int(row[0]), row[1] == "1", np.asarray(row[2:], dtype=np.float64))
            for row in reader
        ]
