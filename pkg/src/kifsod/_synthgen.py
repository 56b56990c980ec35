from __future__ import annotations

import logging
import warnings
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import TYPE_CHECKING, Any, NamedTuple, Optional, Union

import numpy as np
from PIL import Image, ImageDraw
from pydantic import Field, field_validator, model_validator
from typing_extensions import Self

from kifsod._base_model import FrozenModel, KifsodModel
from kifsod._errors import ConfigurationError, DataError
from kifsod._evalkit import match_iou
from kifsod._utils import BatchMode, derive_seed

if TYPE_CHECKING:
    from collections.abc import Iterable, Sequence
    from typing import Final

    Box = tuple[float, float, float, float]

logger = logging.getLogger(__name__)

# ----------------------------- class table -----------------------------------


class ShapeClass(NamedTuple):
    """Shape and color of one benchmark class."""

    shape: str
    color: str

    def __str__(self) -> str:
        return f"{self.color} {self.shape}"


COLORS: Final[dict[str, tuple[float, float, float]]] = {
    "red": (0.86, 0.16, 0.14),
    "green": (0.16, 0.72, 0.22),
    "blue": (0.14, 0.30, 0.88),
}

# base ids come first so that classifier rows line up with class ids
CLASS_TABLE: Final[tuple[ShapeClass, ...]] = (
    ShapeClass("circle", "red"),
    ShapeClass("square", "red"),
    ShapeClass("triangle", "red"),
    ShapeClass("circle", "green"),
    ShapeClass("square", "green"),
    ShapeClass("triangle", "green"),
    ShapeClass("circle", "blue"),
    ShapeClass("square", "blue"),
    ShapeClass("triangle", "blue"),
    ShapeClass("star", "blue"),
    ShapeClass("star", "red"),
    ShapeClass("star", "green"),
)
DEFAULT_BASE_IDS: Final[tuple[int, ...]] = tuple(range(8))
DEFAULT_NOVEL_IDS: Final[tuple[int, ...]] = (8, 9, 10, 11)

_SUPERSAMPLE = 4


class ClassSplit(FrozenModel):
    """Disjoint base and novel class id sets.

    Attributes
    ----------
    base_ids : tuple[int, ...]
        Classes with abundant annotations, used for base pretraining.
    novel_ids : tuple[int, ...]
        Classes only seen through the few-shot set.
    """

    base_ids: tuple[int, ...] = DEFAULT_BASE_IDS
    novel_ids: tuple[int, ...] = DEFAULT_NOVEL_IDS

    @field_validator("base_ids", "novel_ids", mode="after")
    def _sort_ids(cls, v: tuple[int, ...]) -> tuple[int, ...]:
        if len(set(v)) != len(v):
            raise ValueError(f"duplicate class ids: {v}")
        return tuple(sorted(v))

    @model_validator(mode="after")
    def _validate_disjoint(self) -> Self:
        if overlap := set(self.base_ids) & set(self.novel_ids):
            raise ValueError(f"base and novel classes overlap: {sorted(overlap)}")
        return self

    @property
    def all_ids(self) -> tuple[int, ...]:
        return tuple(sorted(self.base_ids + self.novel_ids))


class DatasetSpec(KifsodModel):
    """Parameters of the synthetic shapes benchmark.

    Attributes
    ----------
    image_size : int
        Side of the square canvas in pixels. By default, 128.
    num_classes : int
        Number of shape/color classes. By default, 12.
    base_class_ids : tuple[int, ...]
        Base classes. By default, ids 0..7.
    novel_class_ids : tuple[int, ...]
        Novel classes. By default, ids 8..11.
    objects_per_image : tuple[int, int]
        Inclusive range of objects drawn per image. By default, (1, 4).
    object_size : tuple[int, int]
        Inclusive range of object side lengths in pixels. By default, (16, 48).
    max_gt_overlap_iou : float
        Maximum pairwise IoU between ground-truth boxes of one image. By default, 0.3.
    background_noise_std : float
        Standard deviation of the gray background noise (intensity fraction).
    color_jitter : float
        Maximum per-channel offset applied to a class color.
    max_placement_attempts : int
        Placement retries before an object is dropped. By default, 100.
    seed : int
        Master seed of the benchmark.
    """

    image_size: int = Field(128, ge=16)
    num_classes: int = Field(len(CLASS_TABLE), ge=2, le=len(CLASS_TABLE))
    base_class_ids: tuple[int, ...] = DEFAULT_BASE_IDS
    novel_class_ids: tuple[int, ...] = DEFAULT_NOVEL_IDS
    objects_per_image: tuple[int, int] = (1, 4)
    object_size: tuple[int, int] = (16, 48)
    max_gt_overlap_iou: float = Field(0.3, ge=0.0, le=1.0)
    background_noise_std: float = Field(0.05, ge=0.0)
    color_jitter: float = Field(0.06, ge=0.0, le=0.5)
    max_placement_attempts: int = Field(100, gt=0)
    seed: int = 0

    @model_validator(mode="after")
    def _validate_spec(self) -> Self:
        base, novel = set(self.base_class_ids), set(self.novel_class_ids)
        if base & novel:
            raise ValueError(
                f"base and novel classes must not overlap: {sorted(base & novel)}"
            )
        if base | novel != set(range(self.num_classes)):
            raise ValueError(
                "base and novel classes must cover exactly 0.."
                f"{self.num_classes - 1}, got {sorted(base | novel)}"
            )
        lo, hi = self.objects_per_image
        if not 1 <= lo <= hi:
            raise ValueError(f"invalid objects_per_image range: {(lo, hi)}")
        smin, smax = self.object_size
        if not 1 <= smin <= smax <= self.image_size:
            raise ValueError(
                f"object_size {(smin, smax)} must lie within 1..{self.image_size}"
            )
        return self

    @property
    def split(self) -> ClassSplit:
        return ClassSplit(base_ids=self.base_class_ids, novel_ids=self.novel_class_ids)

    def class_names(self) -> list[str]:
        return [str(CLASS_TABLE[i]) for i in range(self.num_classes)]


class AnnotatedImage(FrozenModel):
    """An RGB raster with its ground-truth boxes.

    Attributes
    ----------
    image_id : int
        Identifier, unique within a benchmark.
    pixels : np.ndarray
        H x W x 3 float32 intensities in [0, 1].  Read-only.
    boxes : tuple[tuple[float, float, float, float], ...]
        `(x_min, y_min, x_max, y_max)` in pixels.
    labels : tuple[int, ...]
        Class id of each box.
    """

    image_id: int = 0
    pixels: Any = Field(..., repr=False)
    boxes: tuple[tuple[float, float, float, float], ...] = ()
    labels: tuple[int, ...] = ()

    @field_validator("pixels", mode="before")
    def _cast_pixels(cls, v: Any) -> np.ndarray:
        arr = np.array(v, dtype=np.float32, copy=True)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ValueError(f"pixels must be H x W x 3, got shape {arr.shape}")
        arr.flags.writeable = False
        return arr

    @model_validator(mode="after")
    def _validate_boxes(self) -> Self:
        if len(self.boxes) != len(self.labels):
            raise ValueError(
                f"{len(self.boxes)} boxes but {len(self.labels)} labels"
            )
        h, w = self.pixels.shape[:2]
        for x0, y0, x1, y1 in self.boxes:
            if not (0 <= x0 < x1 <= w and 0 <= y0 < y1 <= h):
                raise ValueError(
                    f"box {(x0, y0, x1, y1)} is empty or outside the {w}x{h} image"
                )
        return self

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, AnnotatedImage):
            return False
        return (
            self.image_id == other.image_id
            and self.boxes == other.boxes
            and self.labels == other.labels
            and np.array_equal(self.pixels, other.pixels)
        )

    __hash__ = None  # type: ignore [assignment]

    @property
    def size(self) -> tuple[int, int]:
        """(height, width) in pixels."""
        return self.pixels.shape[0], self.pixels.shape[1]

    @property
    def num_instances(self) -> int:
        return len(self.labels)

    def with_annotations(self, indices: Iterable[int]) -> AnnotatedImage:
        """Return a copy keeping only the annotations at `indices` (pixels kept)."""
        keep = list(indices)
        return self.model_copy(
            update={
                "boxes": tuple(self.boxes[i] for i in keep),
                "labels": tuple(self.labels[i] for i in keep),
            }
        )


class FewShotSet(FrozenModel):
    """A class-balanced K-shot set of base and novel instances.

    Attributes
    ----------
    images : tuple[AnnotatedImage, ...]
        Host images, each carrying only its selected annotations.
    per_class_instance_count : dict[int, int]
        Selected instances per class, `min(K, available)`.
    k : int
        Requested shots per class.
    seed : int
        Seed the selection was drawn with.
    """

    images: tuple[AnnotatedImage, ...]
    per_class_instance_count: dict[int, int]
    k: int = Field(..., ge=1, alias="K")
    seed: int = 0

    @model_validator(mode="after")
    def _validate_counts(self) -> Self:
        recount: dict[int, int] = defaultdict(int)
        for image in self.images:
            for label in image.labels:
                recount[label] += 1
        if dict(recount) != {
            c: n for c, n in self.per_class_instance_count.items() if n
        }:
            raise ValueError(
                "per_class_instance_count does not match the annotations: "
                f"{dict(recount)} != {self.per_class_instance_count}"
            )
        if any(n > self.k for n in recount.values()):
            raise ValueError(f"more than K={self.k} instances selected for a class")
        return self

    def instances(self) -> list[tuple[int, int]]:
        """All `(image index, annotation index)` pairs of the set."""
        return [
            (i, j) for i, image in enumerate(self.images) for j in range(len(image.labels))
        ]

    @property
    def class_ids(self) -> tuple[int, ...]:
        return tuple(sorted(self.per_class_instance_count))


# ----------------------------- generation ------------------------------------


def _shape_mask(shape: str, side: int) -> np.ndarray:
    """Return an anti-aliased `side x side` coverage mask in [0, 1]."""
    big = side * _SUPERSAMPLE
    canvas = Image.new("L", (big, big), 0)
    draw = ImageDraw.Draw(canvas)
    if shape == "circle":
        draw.ellipse((0, 0, big - 1, big - 1), fill=255)
    elif shape == "square":
        draw.rectangle((0, 0, big - 1, big - 1), fill=255)
    elif shape == "triangle":
        draw.polygon([(big / 2, 0), (big - 1, big - 1), (0, big - 1)], fill=255)
    elif shape == "star":
        c, outer = big / 2, big / 2
        inner = outer * 0.45
        angles = np.pi / 2 + np.arange(10) * np.pi / 5
        radii = np.where(np.arange(10) % 2 == 0, outer, inner)
        points = [
            (c + r * np.cos(a), c - r * np.sin(a)) for r, a in zip(radii, angles)
        ]
        draw.polygon(points, fill=255)
    else:  # pragma: no cover
        raise ValueError(f"unknown shape {shape!r}")
    small = canvas.resize((side, side), Image.Resampling.BOX)
    return np.asarray(small, dtype=np.float32) / 255.0


def _render_image(
    spec: DatasetSpec, image_id: int, class_filter: tuple[int, ...]
) -> AnnotatedImage:
    rng = np.random.default_rng(derive_seed(spec.seed, image_id, *class_filter))
    size = spec.image_size
    pixels = 0.5 + rng.normal(0.0, spec.background_noise_std, (size, size, 3))

    boxes: list[Box] = []
    labels: list[int] = []
    lo, hi = spec.objects_per_image
    smin, smax = spec.object_size
    for _ in range(int(rng.integers(lo, hi + 1))):
        label = class_filter[int(rng.integers(len(class_filter)))]
        for _attempt in range(spec.max_placement_attempts):
            side = int(rng.integers(smin, smax + 1))
            x0 = int(rng.integers(0, size - side + 1))
            y0 = int(rng.integers(0, size - side + 1))
            box = (float(x0), float(y0), float(x0 + side), float(y0 + side))
            if all(match_iou(box, b) <= spec.max_gt_overlap_iou for b in boxes):
                break
        else:
            logger.debug("dropping object of image %d after failed placement", image_id)
            continue

        cls = CLASS_TABLE[label]
        color = np.asarray(COLORS[cls.color]) + rng.uniform(
            -spec.color_jitter, spec.color_jitter, 3
        )
        alpha = _shape_mask(cls.shape, side)[..., None]
        region = pixels[y0 : y0 + side, x0 : x0 + side]
        pixels[y0 : y0 + side, x0 : x0 + side] = region * (1 - alpha) + color * alpha
        boxes.append(box)
        labels.append(label)

    # quantized to 8 bit so that the PNG round trip is exact
    pixels = np.round(np.clip(pixels, 0.0, 1.0) * 255.0) / 255.0
    return AnnotatedImage(
        image_id=image_id, pixels=pixels, boxes=tuple(boxes), labels=tuple(labels)
    )


def generate_dataset(
    spec: DatasetSpec,
    num_images: int,
    class_filter: Iterable[int],
    *,
    start_index: int = 0,
    workers: Optional[int] = None,
) -> list[AnnotatedImage]:
    """Generate `num_images` synthetic images containing only `class_filter` classes.

    Each image is a deterministic function of `(spec.seed, image index,
    class_filter)`, so concurrent generation (`workers > 1`) returns exactly the
    images of sequential generation.

    Parameters
    ----------
    spec : DatasetSpec
        Benchmark parameters.
    num_images : int
        Number of images to generate (>= 1).
    class_filter : Iterable[int]
        Classes allowed to appear.
    start_index : int
        Id of the first image.  Disjoint pools use disjoint id ranges.
    workers : int | None
        Number of threads used for rendering.  By default, sequential.
    """
    if num_images < 1:
        raise ConfigurationError(f"num_images must be >= 1, got {num_images}")
    filter_ids = tuple(sorted(set(class_filter)))
    if not filter_ids:
        raise ConfigurationError("class_filter must not be empty")
    if unknown := set(filter_ids) - set(range(spec.num_classes)):
        raise ConfigurationError(f"unknown class ids in class_filter: {sorted(unknown)}")

    ids = range(start_index, start_index + num_images)
    if workers is not None and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            images = list(pool.map(lambda i: _render_image(spec, i, filter_ids), ids))
    else:
        images = [_render_image(spec, i, filter_ids) for i in ids]
    logger.debug("generated %d images for classes %s", len(images), filter_ids)
    return images


def build_fewshot_set(
    novel_pool: Sequence[AnnotatedImage],
    base_pool: Sequence[AnnotatedImage],
    k: int,
    seed: int,
    *,
    class_ids: Optional[Iterable[int]] = None,
) -> FewShotSet:
    """Select `min(K, available)` instances per class from the two pools.

    Shots are counted per instance.  Host images keep all of their pixels but
    only the selected annotations, and appear once even when several of their
    instances are selected.

    Parameters
    ----------
    novel_pool, base_pool : Sequence[AnnotatedImage]
        Candidate images; every labelled instance of either pool is a candidate.
    k : int
        Shots per class (>= 1).
    seed : int
        Selection seed.
    class_ids : Iterable[int] | None
        Classes that must be represented.  By default, every class found in the
        pools.
    """
    if k < 1:
        raise ConfigurationError(f"K must be >= 1, got {k}")

    pools = (novel_pool, base_pool)
    candidates: dict[int, list[tuple[int, int, int]]] = defaultdict(list)
    for p, pool in enumerate(pools):
        for i, image in enumerate(pool):
            for j, label in enumerate(image.labels):
                candidates[label].append((p, i, j))

    wanted = sorted(set(class_ids)) if class_ids is not None else sorted(candidates)
    selected: dict[tuple[int, int], list[int]] = defaultdict(list)
    counts: dict[int, int] = {}
    for c in wanted:
        available = candidates.get(c, [])
        if not available:
            raise DataError(f"class {c} has no available instances")
        if len(available) < k:
            warnings.warn(
                f"class {c} has only {len(available)} instances (< K={k}); "
                "using all of them",
                stacklevel=2,
            )
        rng = np.random.default_rng(derive_seed(seed, c))
        order = rng.permutation(len(available))[: min(k, len(available))]
        for idx in sorted(order):
            p, i, j = available[idx]
            selected[(p, i)].append(j)
        counts[c] = min(k, len(available))

    images = tuple(
        pools[p][i].with_annotations(sorted(selected[(p, i)]))
        for p, i in sorted(selected)
    )
    logger.info("few-shot set: K=%d, %d images, counts=%s", k, len(images), counts)
    return FewShotSet(
        images=images, per_class_instance_count=counts, k=k, seed=seed
    )


def sample_batch(
    fewshot: FewShotSet,
    mode: Union[BatchMode, str],
    batch_size: int,
    seed: int,
) -> list[AnnotatedImage]:
    """Draw a training batch from `fewshot`.

    With `image_level`, whole images are drawn and keep every annotation they
    carry in the set.  With `instance_level`, instances are drawn and each
    returned image keeps only that one annotation; the other objects stay in the
    pixels and are treated as background downstream.  Sampling is with
    replacement only when `batch_size` exceeds the number of candidates.
    """
    if batch_size < 1:
        raise ConfigurationError(f"batch_size must be >= 1, got {batch_size}")
    mode = BatchMode(mode)
    rng = np.random.default_rng(seed)
    if mode is BatchMode.IMAGE_LEVEL:
        n = len(fewshot.images)
        if n == 0:
            raise DataError("cannot sample from an empty few-shot set")
        idx = rng.choice(n, size=batch_size, replace=batch_size > n)
        return [fewshot.images[int(i)] for i in idx]

    pairs = fewshot.instances()
    if not pairs:
        raise DataError("cannot sample from a few-shot set without annotations")
    idx = rng.choice(len(pairs), size=batch_size, replace=batch_size > len(pairs))
    return [
        fewshot.images[pairs[int(n)][0]].with_annotations([pairs[int(n)][1]])
        for n in idx
    ]


# ----------------------------- persistence ------------------------------------


class RecordEntry(FrozenModel):
    file: str
    image_id: int = 0
    boxes: tuple[tuple[float, float, float, float], ...] = ()
    labels: tuple[int, ...] = ()


class DatasetManifest(KifsodModel):
    """Contents of a `manifest.json` describing one image pool (or an episode).

    Attributes
    ----------
    image_size : int
        Canvas side in pixels.
    classes : tuple[str, ...]
        Class names indexed by class id.
    base_ids, novel_ids : tuple[int, ...]
        The class split.
    spec : DatasetSpec
        Full generator parameters.
    split : str
        Pool name (e.g. `"base_train"`) or `"episode"`.
    records : tuple[RecordEntry, ...]
        One entry per image file.
    pools : dict[str, str]
        For a benchmark root: pool name -> relative directory.
    k, seed, per_class_instance_count
        Few-shot episode provenance, if this manifest describes an episode.
    """

    image_size: int
    classes: tuple[str, ...]
    base_ids: tuple[int, ...]
    novel_ids: tuple[int, ...]
    spec: DatasetSpec
    split: str
    records: tuple[RecordEntry, ...] = ()
    pools: dict[str, str] = Field(default_factory=dict)
    k: Optional[int] = None
    seed: Optional[int] = None
    per_class_instance_count: Optional[dict[int, int]] = None

    @classmethod
    def for_spec(cls, spec: DatasetSpec, split: str, **kwargs: Any) -> DatasetManifest:
        return cls(
            image_size=spec.image_size,
            classes=tuple(spec.class_names()),
            base_ids=spec.base_class_ids,
            novel_ids=spec.novel_class_ids,
            spec=spec,
            split=split,
            **kwargs,
        )


MANIFEST = "manifest.json"


def _write_images(path: Path, images: Sequence[AnnotatedImage]) -> list[RecordEntry]:
    records = []
    for image in images:
        name = f"{image.image_id:06d}.png"
        raster = np.round(np.asarray(image.pixels) * 255.0).astype(np.uint8)
        Image.fromarray(raster).save(path / name)
        records.append(
            RecordEntry(
                file=name, image_id=image.image_id, boxes=image.boxes, labels=image.labels
            )
        )
    return records


def save_dataset(
    path: Union[str, Path],
    spec: DatasetSpec,
    images: Sequence[AnnotatedImage],
    split: str,
) -> Path:
    """Write `images` as lossless PNG files plus a `manifest.json` under `path`."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    records = _write_images(path, images)
    return DatasetManifest.for_spec(spec, split, records=tuple(records)).save(
        path / MANIFEST
    )


def load_dataset(path: Union[str, Path]) -> tuple[DatasetManifest, list[AnnotatedImage]]:
    """Read a pool (or episode) directory written by `save_dataset`/`save_fewshot`."""
    path = Path(path)
    if not (path / MANIFEST).is_file():
        raise DataError(f"no {MANIFEST} found in {path}")
    manifest = DatasetManifest.from_file(path / MANIFEST)
    images = []
    for rec in manifest.records:
        file = path / rec.file
        if not file.is_file():
            raise DataError(f"missing image file {file}")
        with Image.open(file) as im:
            pixels = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
        images.append(
            AnnotatedImage(
                image_id=rec.image_id, pixels=pixels, boxes=rec.boxes, labels=rec.labels
            )
        )
    return manifest, images


def save_fewshot(path: Union[str, Path], spec: DatasetSpec, fewshot: FewShotSet) -> Path:
    """Write a few-shot episode directory (images with selected annotations only)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    records = _write_images(path, fewshot.images)
    manifest = DatasetManifest.for_spec(
        spec,
        "episode",
        records=tuple(records),
        k=fewshot.k,
        seed=fewshot.seed,
        per_class_instance_count=fewshot.per_class_instance_count,
    )
    return manifest.save(path / MANIFEST)


def load_fewshot(path: Union[str, Path]) -> tuple[DatasetManifest, FewShotSet]:
    manifest, images = load_dataset(path)
    if manifest.k is None or manifest.per_class_instance_count is None:
        raise DataError(f"{path} is not a few-shot episode directory")
    fewshot = FewShotSet(
        images=tuple(images),
        per_class_instance_count=manifest.per_class_instance_count,
        k=manifest.k,
        seed=manifest.seed or 0,
    )
    return manifest, fewshot


def load_pool(
    root: Union[str, Path], name: str
) -> tuple[DatasetManifest, list[AnnotatedImage]]:
    """Read pool `name` of the benchmark rooted at `root`.

    `root` may also be the pool directory itself.
    """
    root = Path(root)
    if not (root / MANIFEST).is_file():
        raise DataError(f"no {MANIFEST} found in {root}")
    manifest = DatasetManifest.from_file(root / MANIFEST)
    if name in manifest.pools:
        return load_dataset(root / manifest.pools[name])
    if manifest.split == name:
        return load_dataset(root)
    raise DataError(f"{root} has no pool {name!r}; known: {sorted(manifest.pools)}")


class Augmentation(FrozenModel):
    """Random scaling and horizontal flip applied to training and KI views.

    Attributes
    ----------
    scale_range : tuple[float, float]
        Inclusive range of the isotropic resize factor. By default, (0.8, 1.2).
    flip_probability : float
        Probability of a horizontal flip. By default, 0.5.
    """

    scale_range: tuple[float, float] = (0.8, 1.2)
    flip_probability: float = Field(0.5, ge=0.0, le=1.0)

    @field_validator("scale_range", mode="after")
    def _validate_scale(cls, v: tuple[float, float]) -> tuple[float, float]:
        if not 0 < v[0] <= v[1]:
            raise ValueError(f"invalid scale_range: {v}")
        return v

    @classmethod
    def identity(cls) -> Augmentation:
        return cls(scale_range=(1.0, 1.0), flip_probability=0.0)

    @property
    def is_identity(self) -> bool:
        return self.scale_range == (1.0, 1.0) and self.flip_probability == 0

    def draw(self, rng: np.random.Generator) -> tuple[float, bool]:
        """Return a `(scale, flip)` draw."""
        lo, hi = self.scale_range
        scale = float(rng.uniform(lo, hi)) if hi > lo else lo
        flip = bool(rng.random() < self.flip_probability)
        return scale, flip
