from __future__ import annotations

import logging
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from typing import TYPE_CHECKING, NamedTuple, Optional

import numpy as np
from pydantic import Field, field_validator

from kifsod._base_model import FrozenModel, KifsodModel
from kifsod._errors import ConfigurationError, DataError

if TYPE_CHECKING:
    from collections.abc import Iterable, Mapping, Sequence
    from typing import Final

    from kifsod._detector import Detector
    from kifsod._synthgen import AnnotatedImage, ClassSplit

    Box = tuple[float, float, float, float]
    ScoredBox = tuple[float, float, float, float, float]

__all__ = [
    "DetectionEvaluator",
    "DetectionRecord",
    "MetricReport",
    "SizeBuckets",
    "average_recall",
    "compute_ap",
    "compute_ap_sweep",
    "evaluate_detector",
    "match_iou",
    "proposal_recall",
]

logger = logging.getLogger(__name__)

COCO_IOU_THRESHOLDS: Final[tuple[float, ...]] = tuple(
    round(float(t), 2) for t in np.linspace(0.5, 0.95, 10)
)


class DetectionRecord(FrozenModel):
    """One scored detection.

    Attributes
    ----------
    image_id : int
        Image the detection belongs to.
    box : tuple[float, float, float, float]
        `(x_min, y_min, x_max, y_max)` in pixels.
    score : float
        Confidence in [0, 1].
    class_id : int
        Predicted class.
    """

    image_id: int
    box: tuple[float, float, float, float]
    score: float = Field(..., ge=0.0, le=1.0)
    class_id: int


class MetricReport(KifsodModel):
    """Detection metrics of one evaluation.

    Attributes
    ----------
    per_class_ap : dict[int, float]
        AP of every class that has ground truth in the evaluated set.
    bAP, nAP : float
        Unweighted means of `per_class_ap` over base and novel classes.
    ar : dict[str, float]
        Proposal recall keyed as `"top{N}_{bucket}"`.
    iou_thresholds : tuple[float, ...]
        IoU thresholds AP was averaged over.
    """

    per_class_ap: dict[int, float] = Field(default_factory=dict)
    bAP: float = Field(0.0, ge=0.0, le=1.0)
    nAP: float = Field(0.0, ge=0.0, le=1.0)
    ar: dict[str, float] = Field(default_factory=dict)
    iou_thresholds: tuple[float, ...] = (0.5,)

    @field_validator("per_class_ap", "ar", mode="after")
    def _validate_fractions(cls, v: dict) -> dict:
        for key, value in v.items():
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"metric {key!r} must lie in [0, 1], got {value}")
        return v


class SizeBuckets(NamedTuple):
    """Upper area bounds (pixels^2) of the small and medium ground-truth buckets."""

    small: float = 24.0**2
    medium: float = 40.0**2

    def bucket(self, area: float) -> str:
        if area < self.small:
            return "small"
        if area < self.medium:
            return "medium"
        return "large"


# ----------------------------- geometry --------------------------------------


def match_iou(box_a: Sequence[float], box_b: Sequence[float]) -> float:
    """Intersection over union of two `(x_min, y_min, x_max, y_max)` boxes.

    A degenerate (zero-area) box has IoU 0 with anything, itself included.
    """
    ax0, ay0, ax1, ay1 = box_a
    bx0, by0, bx1, by1 = box_b
    area_a = max(0.0, ax1 - ax0) * max(0.0, ay1 - ay0)
    area_b = max(0.0, bx1 - bx0) * max(0.0, by1 - by0)
    if area_a <= 0 or area_b <= 0:
        return 0.0
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    return float(inter / (area_a + area_b - inter))


def iou_matrix(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of `(N, 4)` and `(M, 4)` box arrays, zero for degenerate boxes."""
    a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 4)
    area_a = np.clip(a[:, 2] - a[:, 0], 0, None) * np.clip(a[:, 3] - a[:, 1], 0, None)
    area_b = np.clip(b[:, 2] - b[:, 0], 0, None) * np.clip(b[:, 3] - b[:, 1], 0, None)
    iw = np.clip(
        np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0]),
        0,
        None,
    )
    ih = np.clip(
        np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1]),
        0,
        None,
    )
    inter = iw * ih
    union = area_a[:, None] + area_b[None, :] - inter
    valid = (area_a[:, None] > 0) & (area_b[None, :] > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(valid, inter / np.where(union > 0, union, 1.0), 0.0)
    return out


# ----------------------------- average precision -----------------------------


def _interpolated_ap(tp: np.ndarray, n_gt: int) -> float:
    """All-point interpolated area under the precision/recall staircase."""
    if n_gt == 0 or tp.size == 0:
        return 0.0
    hits = np.cumsum(tp)
    recall = hits / n_gt
    precision = hits / np.arange(1, tp.size + 1)
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(mpre.size - 1, 0, -1):
        mpre[i - 1] = max(mpre[i - 1], mpre[i])
    steps = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def _ground_truth_index(
    ground_truth: Iterable[AnnotatedImage],
) -> tuple[dict[tuple[int, int], list[Box]], dict[int, int]]:
    boxes: dict[tuple[int, int], list[Box]] = defaultdict(list)
    counts: dict[int, int] = defaultdict(int)
    for image in ground_truth:
        for box, label in zip(image.boxes, image.labels):
            boxes[(image.image_id, label)].append(box)
            counts[label] += 1
    return boxes, counts


def _class_ap(
    detections: list[DetectionRecord],
    gt_boxes: Mapping[tuple[int, int], list[Box]],
    n_gt: int,
    iou_threshold: float,
) -> float:
    # equal scores are ordered by (image id, box) so that matching is deterministic
    ordered = sorted(detections, key=lambda d: (-d.score, d.image_id, d.box))
    taken: dict[int, np.ndarray] = {}
    tp = np.zeros(len(ordered))
    for n, det in enumerate(ordered):
        gts = gt_boxes.get((det.image_id, det.class_id))
        if not gts:
            continue
        used = taken.setdefault(det.image_id, np.zeros(len(gts), dtype=bool))
        ious = iou_matrix(np.asarray([det.box]), np.asarray(gts))[0]
        ious[used] = -1.0
        best = int(np.argmax(ious))
        if ious[best] >= iou_threshold:
            used[best] = True
            tp[n] = 1.0
    return _interpolated_ap(tp, n_gt)


def _mean(values: list[float]) -> float:
    return float(np.mean(values)) if values else 0.0


def compute_ap(
    detections: Iterable[DetectionRecord],
    ground_truth: Sequence[AnnotatedImage],
    iou_threshold: float,
    split: ClassSplit,
) -> MetricReport:
    """Per-class AP at one IoU threshold, with base/novel means.

    Detections are matched greedily in descending score order; each ground truth
    absorbs at most one detection (the unmatched one of highest IoU).  Classes
    without ground truth in `ground_truth` are omitted from every average.

    Parameters
    ----------
    detections : Iterable[DetectionRecord]
        Detections over the images of `ground_truth`.
    ground_truth : Sequence[AnnotatedImage]
        The evaluated images.
    iou_threshold : float
        Minimum IoU for a true positive, in (0, 1).
    split : ClassSplit
        Assigns each class to the bAP or the nAP mean.
    """
    if not 0.0 < iou_threshold < 1.0:
        raise ConfigurationError(f"iou_threshold must lie in (0, 1), got {iou_threshold}")
    known = set(split.all_ids)
    by_class: dict[int, list[DetectionRecord]] = defaultdict(list)
    for det in detections:
        if det.class_id not in known:
            raise DataError(f"detection names unknown class id {det.class_id}")
        by_class[det.class_id].append(det)

    gt_boxes, gt_counts = _ground_truth_index(ground_truth)
    per_class = {
        c: _class_ap(by_class.get(c, []), gt_boxes, gt_counts[c], iou_threshold)
        for c in sorted(gt_counts)
        if c in known
    }
    return MetricReport(
        per_class_ap=per_class,
        bAP=_mean([ap for c, ap in per_class.items() if c in split.base_ids]),
        nAP=_mean([ap for c, ap in per_class.items() if c in split.novel_ids]),
        iou_thresholds=(iou_threshold,),
    )


def compute_ap_sweep(
    detections: Iterable[DetectionRecord],
    ground_truth: Sequence[AnnotatedImage],
    split: ClassSplit,
    iou_thresholds: Sequence[float] = COCO_IOU_THRESHOLDS,
) -> MetricReport:
    """AP averaged over `iou_thresholds` (by default 0.50:0.05:0.95)."""
    dets = list(detections)
    reports = [compute_ap(dets, ground_truth, t, split) for t in iou_thresholds]
    per_class = {
        c: float(np.mean([r.per_class_ap[c] for r in reports]))
        for c in reports[0].per_class_ap
    }
    return MetricReport(
        per_class_ap=per_class,
        bAP=_mean([ap for c, ap in per_class.items() if c in split.base_ids]),
        nAP=_mean([ap for c, ap in per_class.items() if c in split.novel_ids]),
        iou_thresholds=tuple(iou_thresholds),
    )


# ----------------------------- proposal recall --------------------------------


def proposal_recall(
    proposals: Mapping[int, Sequence[ScoredBox]],
    ground_truth: Sequence[AnnotatedImage],
    iou_threshold: float,
    top_n: int,
    *,
    class_ids: Optional[Iterable[int]] = None,
    buckets: SizeBuckets = SizeBuckets(),  # noqa: B008
) -> dict[str, float]:
    """Fraction of ground truths covered by an image's `top_n` proposals.

    Parameters
    ----------
    proposals : Mapping[int, Sequence[ScoredBox]]
        image id -> `(x_min, y_min, x_max, y_max, objectness)` rows.
    ground_truth : Sequence[AnnotatedImage]
        The evaluated images.
    iou_threshold : float
        A ground truth is covered by a proposal with IoU >= this value.
    top_n : int
        Number of highest-objectness proposals considered per image.
    class_ids : Iterable[int] | None
        Restrict the ground truths to these classes (e.g. the novel ones).
    buckets : SizeBuckets
        Area thresholds of the size buckets.

    Returns
    -------
    dict[str, float]
        Recall under `"all"` plus every nonempty bucket among `"small"`,
        `"medium"` and `"large"`.  Empty when no ground truth qualifies.
    """
    if top_n < 1:
        raise ConfigurationError(f"top_n must be >= 1, got {top_n}")
    wanted = set(class_ids) if class_ids is not None else None
    hits: dict[str, int] = defaultdict(int)
    totals: dict[str, int] = defaultdict(int)
    for image in ground_truth:
        gts = [
            b for b, c in zip(image.boxes, image.labels) if wanted is None or c in wanted
        ]
        if not gts:
            continue
        rows = np.asarray(proposals.get(image.image_id, ()), dtype=np.float64)
        rows = rows.reshape(-1, 5)
        order = np.argsort(-rows[:, 4], kind="stable")[:top_n]
        ious = iou_matrix(np.asarray(gts), rows[order, :4])
        covered = (ious >= iou_threshold).any(axis=1) if ious.size else np.zeros(len(gts))
        for box, hit in zip(gts, covered):
            area = (box[2] - box[0]) * (box[3] - box[1])
            for key in ("all", buckets.bucket(area)):
                totals[key] += 1
                hits[key] += int(hit)
    return {key: hits[key] / totals[key] for key in totals}


def average_recall(
    proposals: Mapping[int, Sequence[ScoredBox]],
    ground_truth: Sequence[AnnotatedImage],
    top_n: int,
    *,
    class_ids: Optional[Iterable[int]] = None,
    iou_thresholds: Sequence[float] = COCO_IOU_THRESHOLDS,
) -> dict[str, float]:
    """`proposal_recall` averaged over `iou_thresholds`, per bucket."""
    ids = list(class_ids) if class_ids is not None else None
    recalls = [
        proposal_recall(proposals, ground_truth, t, top_n, class_ids=ids)
        for t in iou_thresholds
    ]
    return {key: float(np.mean([r[key] for r in recalls])) for key in recalls[0]}


# ----------------------------- detector evaluation ----------------------------


def evaluate_detector(
    detector: Detector,
    images: Sequence[AnnotatedImage],
    split: ClassSplit,
    *,
    iou_threshold: float = 0.5,
    proposal_cap: int = 64,
    top_n: int = 100,
    ar_class_ids: Optional[Iterable[int]] = None,
    sweep: bool = False,
    workers: Optional[int] = None,
) -> MetricReport:
    """Run inference over `images` and score it.

    Parameters
    ----------
    detector : Detector
        The model; evaluated in inference mode (no dropout).
    images : Sequence[AnnotatedImage]
        Test images.
    split : ClassSplit
        Base/novel assignment of the classes.
    iou_threshold : float
        AP threshold, ignored when `sweep` is True. By default, 0.5.
    proposal_cap : int
        Post-NMS proposal cap at inference. By default, 64.
    top_n : int
        Proposals per image considered by the recall values. By default, 100.
    ar_class_ids : Iterable[int] | None
        Classes whose objects count towards recall.  By default, all classes.
    sweep : bool
        Average AP over IoU 0.50:0.95 instead of a single threshold.
    workers : int | None
        Evaluate images on a thread pool of this size.
    """
    from kifsod._detector import detect

    def _run(image: AnnotatedImage) -> tuple[list[DetectionRecord], np.ndarray]:
        out = detect(detector, image.pixels, proposal_cap=proposal_cap)
        records = [
            DetectionRecord(
                image_id=image.image_id,
                box=tuple(float(v) for v in box),  # type: ignore [arg-type]
                score=min(1.0, max(0.0, float(score))),
                class_id=int(label),
            )
            for box, score, label in zip(out.boxes, out.scores, out.labels)
        ]
        rows = np.concatenate([out.proposals, out.objectness[:, None]], axis=1)
        return records, rows

    if workers is not None and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run, images))
    else:
        results = [_run(image) for image in images]

    detections = [d for records, _ in results for d in records]
    proposals = {image.image_id: rows for image, (_, rows) in zip(images, results)}
    if sweep:
        report = compute_ap_sweep(detections, images, split)
    else:
        report = compute_ap(detections, images, iou_threshold, split)
    recall = proposal_recall(
        proposals, images, 0.5, top_n, class_ids=ar_class_ids
    )
    ar = {f"top{top_n}_{bucket}": value for bucket, value in recall.items()}
    return report.replace(ar=ar)


class DetectionEvaluator:
    """Evaluator callback sampling bAP/nAP every `interval` transfer iterations.

    Parameters
    ----------
    images : Sequence[AnnotatedImage]
        Test images (base and novel classes).
    split : ClassSplit
        Base/novel assignment of the classes.
    interval : int
        Iterations between evaluations. By default, 50.
    proposal_cap : int
        Post-NMS proposal cap at inference. By default, 64.
    """

    def __init__(
        self,
        images: Sequence[AnnotatedImage],
        split: ClassSplit,
        *,
        interval: int = 50,
        proposal_cap: int = 64,
        iou_threshold: float = 0.5,
    ) -> None:
        if interval < 1:
            raise ConfigurationError(f"interval must be >= 1, got {interval}")
        self.images = list(images)
        self.split = split
        self.interval = interval
        self.proposal_cap = proposal_cap
        self.iou_threshold = iou_threshold
        self.reports: dict[int, MetricReport] = {}

    def evaluate(self, detector: Detector, iteration: int) -> MetricReport:
        report = evaluate_detector(
            detector,
            self.images,
            self.split,
            iou_threshold=self.iou_threshold,
            proposal_cap=self.proposal_cap,
            ar_class_ids=self.split.novel_ids,
        )
        self.reports[iteration] = report
        logger.info(
            "iteration %d: bAP50=%.4f nAP50=%.4f", iteration, report.bAP, report.nAP
        )
        return report

