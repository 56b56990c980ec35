from __future__ import annotations

import csv
import json
import logging
import math
import struct
from collections import defaultdict
from pathlib import Path
from typing import TYPE_CHECKING, Any, NamedTuple, Optional, Union

import numpy as np
import torch
import torch.nn.functional as F  # noqa: N812
from pydantic import Field
from torch import nn
from torchvision.ops import batched_nms, box_iou, nms, roi_align

from kifsod._base_model import KifsodModel
from kifsod._errors import ConfigurationError, DataError, NumericalError, ShapeError
from kifsod._synthgen import AnnotatedImage, Augmentation
from kifsod._utils import ClassifierKind, derive_seed

if TYPE_CHECKING:
    from collections.abc import Iterable, Sequence
    from typing import Final

    from kifsod._efficiency import ArchDescriptor

__all__ = [
    "Detections",
    "Detector",
    "EmbeddingCenter",
    "ForwardOutput",
    "LossRecord",
    "LossTerms",
    "PretrainResult",
    "TrainConfig",
    "compute_loss",
    "center_embeddings",
    "describe_architecture",
    "classifier_rows",
    "apply_dropout",
    "detect",
    "extract_instance_features",
    "forward",
    "init_novel_rows",
    "load_checkpoint",
    "pretrain_base",
    "save_checkpoint",
    "write_loss_log",
]

logger = logging.getLogger(__name__)

STRIDE: Final = 8
ANCHOR_SIZE: Final = 32.0
ROI_SIZE: Final = 4
BACKBONE_CHANNELS: Final = (16, 32, 64)
HIDDEN_DIM: Final = 128
EMBED_DIM: Final = 64
COSINE_SCALE: Final = 20.0
NOVEL_INIT_STD: Final = 0.01

# assignment thresholds shared by anchors and RoIs
POSITIVE_IOU: Final = 0.5
NEGATIVE_IOU: Final = 0.3
RPN_NMS_IOU: Final = 0.7

_RPN_WEIGHTS: Final = (1.0, 1.0, 1.0, 1.0)
_ROI_WEIGHTS: Final = (10.0, 10.0, 5.0, 5.0)
_MAX_LOG_SCALE: Final = math.log(1000.0 / 16)
_IGNORE: Final = -1

COMPONENT_NAMES: Final = ("backbone", "proposal", "roi_head", "classifier", "regressor")


# ----------------------------- box coding --------------------------------------


def encode_boxes(
    reference: torch.Tensor, target: torch.Tensor, weights: Sequence[float]
) -> torch.Tensor:
    """Return `(dx, dy, dw, dh)` deltas taking `reference` boxes onto `target`."""
    wx, wy, ww, wh = weights
    rw = reference[:, 2] - reference[:, 0]
    rh = reference[:, 3] - reference[:, 1]
    rx = reference[:, 0] + 0.5 * rw
    ry = reference[:, 1] + 0.5 * rh
    tw = target[:, 2] - target[:, 0]
    th = target[:, 3] - target[:, 1]
    tx = target[:, 0] + 0.5 * tw
    ty = target[:, 1] + 0.5 * th
    return torch.stack(
        (
            wx * (tx - rx) / rw,
            wy * (ty - ry) / rh,
            ww * torch.log(tw / rw),
            wh * torch.log(th / rh),
        ),
        dim=1,
    )


def decode_boxes(
    reference: torch.Tensor, deltas: torch.Tensor, weights: Sequence[float]
) -> torch.Tensor:
    """Inverse of `encode_boxes`; log-scales are clamped before exponentiation."""
    wx, wy, ww, wh = weights
    rw = reference[:, 2] - reference[:, 0]
    rh = reference[:, 3] - reference[:, 1]
    rx = reference[:, 0] + 0.5 * rw
    ry = reference[:, 1] + 0.5 * rh
    dx, dy = deltas[:, 0] / wx, deltas[:, 1] / wy
    dw = torch.clamp(deltas[:, 2] / ww, max=_MAX_LOG_SCALE)
    dh = torch.clamp(deltas[:, 3] / wh, max=_MAX_LOG_SCALE)
    cx, cy = rx + dx * rw, ry + dy * rh
    w, h = rw * torch.exp(dw), rh * torch.exp(dh)
    return torch.stack((cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h), dim=1)


def make_anchors(
    height: int, width: int, *, dtype: torch.dtype = torch.float32
) -> torch.Tensor:
    """One square anchor of side `ANCHOR_SIZE` per feature cell, row-major."""
    ys = (torch.arange(height, dtype=dtype) + 0.5) * STRIDE
    xs = (torch.arange(width, dtype=dtype) + 0.5) * STRIDE
    cy, cx = torch.meshgrid(ys, xs, indexing="ij")
    cx, cy = cx.reshape(-1), cy.reshape(-1)
    half = ANCHOR_SIZE / 2
    return torch.stack((cx - half, cy - half, cx + half, cy + half), dim=1)


# ----------------------------- model --------------------------------------------


class ForwardOutput(NamedTuple):
    """Per-image result of a detector forward pass.

    All tensors share their first dimension (the number of proposals, at most the
    proposal cap).
    """

    proposals: torch.Tensor
    objectness: torch.Tensor
    embeddings: torch.Tensor
    class_logits: torch.Tensor
    box_deltas: torch.Tensor


class EmbeddingCenter(nn.Module):
    """Subtract a fixed origin from the RoI embedding.

    The origin is a buffer, not a parameter: it is zero on a fresh detector and
    only `center_embeddings` moves it.
    """

    offset: torch.Tensor

    def __init__(self, dim: int) -> None:
        super().__init__()
        self.register_buffer("offset", torch.zeros(dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x - self.offset


class Detector(nn.Module):
    """The desk-scale two-stage detector.

    The embedding model is `backbone` (three stride-2 conv blocks), `proposal`
    (a 1x1 conv emitting one objectness logit and four deltas per cell) and
    `roi_head` (RoI-align to 4x4 followed by two fully connected layers and an
    `EmbeddingCenter`).  The base learner is `classifier` (one row per class plus
    a trailing background row) and a class-agnostic `regressor`.

    Parameters
    ----------
    class_ids : Iterable[int]
        Classes of the classifier rows, in row order (background excluded).
    novel_ids : Iterable[int]
        Subset of `class_ids` added by few-shot extension.  By default, none.
    image_size : int
        Side of the square input images; a multiple of 8.  By default, 128.
    classifier_kind : ClassifierKind | str
        `"linear"` or `"cosine"`.  By default, `"linear"`.
    seed : int
        Seed of the weight initialization.
    """

    def __init__(
        self,
        class_ids: Iterable[int],
        *,
        novel_ids: Iterable[int] = (),
        image_size: int = 128,
        classifier_kind: Union[ClassifierKind, str] = ClassifierKind.LINEAR,
        seed: int = 0,
    ) -> None:
        super().__init__()
        if image_size % STRIDE:
            raise ConfigurationError(
                f"image_size must be a multiple of {STRIDE}, got {image_size}"
            )
        self.class_ids: tuple[int, ...] = tuple(class_ids)
        self.novel_ids: tuple[int, ...] = tuple(novel_ids)
        if len(set(self.class_ids)) != len(self.class_ids):
            raise ConfigurationError(f"duplicate class ids: {self.class_ids}")
        if not set(self.novel_ids) <= set(self.class_ids):
            raise ConfigurationError("novel_ids must be a subset of class_ids")
        self.image_size = image_size
        self.classifier_kind = ClassifierKind(classifier_kind)

        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            blocks, c_in = [], 3
            for c_out in BACKBONE_CHANNELS:
                blocks.append(
                    nn.Sequential(
                        nn.Conv2d(c_in, c_out, 3, stride=2, padding=1), nn.ReLU()
                    )
                )
                c_in = c_out
            self.backbone = nn.Sequential(*blocks)
            self.proposal = nn.Conv2d(c_in, 5, 1)
            self.roi_head = nn.Sequential(
                nn.Flatten(),
                nn.Linear(c_in * ROI_SIZE * ROI_SIZE, HIDDEN_DIM),
                nn.ReLU(),
                nn.Linear(HIDDEN_DIM, EMBED_DIM),
                nn.ReLU(),
                EmbeddingCenter(EMBED_DIM),
            )
            self.classifier = nn.Linear(EMBED_DIM, len(self.class_ids) + 1)
            self.regressor = nn.Linear(EMBED_DIM, 4)
            nn.init.normal_(self.proposal.weight, std=0.01)
            nn.init.zeros_(self.proposal.bias)
            nn.init.normal_(self.classifier.weight, std=NOVEL_INIT_STD)
            nn.init.zeros_(self.classifier.bias)
            nn.init.normal_(self.regressor.weight, std=0.001)
            nn.init.zeros_(self.regressor.bias)

    def __repr__(self) -> str:
        return (
            f"Detector(classes={len(self.class_ids)}, novel={len(self.novel_ids)}, "
            f"classifier_kind={self.classifier_kind!s}, image_size={self.image_size})"
        )

    @property
    def embed_dim(self) -> int:
        return int(self.classifier.in_features)

    @property
    def num_classes(self) -> int:
        return len(self.class_ids)

    @property
    def background_row(self) -> int:
        return len(self.class_ids)

    @property
    def base_ids(self) -> tuple[int, ...]:
        return tuple(c for c in self.class_ids if c not in self.novel_ids)

    @property
    def embedding_center(self) -> EmbeddingCenter:
        return self.roi_head[-1]  # type: ignore [no-any-return]

    def row_of(self, class_id: int) -> int:
        """Classifier row holding `class_id`."""
        try:
            return self.class_ids.index(class_id)
        except ValueError:
            raise DataError(f"class {class_id} is not known to the detector") from None

    def component(self, name: str) -> nn.Module:
        if name not in COMPONENT_NAMES:
            raise ConfigurationError(f"unknown component {name!r}")
        return getattr(self, name)  # type: ignore [no-any-return]

    # -- stages --

    def features(self, images: torch.Tensor) -> torch.Tensor:
        return self.backbone(images - 0.5)  # type: ignore [no-any-return]

    def proposal_outputs(
        self, feats: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Return per-image `(anchors, objectness logits, deltas)` for all cells."""
        out = self.proposal(feats)
        b, _, h, w = out.shape
        out = out.permute(0, 2, 3, 1).reshape(b, h * w, 5)
        anchors = make_anchors(h, w, dtype=out.dtype)
        return anchors, out[..., 0], out[..., 1:]

    def select_proposals(
        self,
        anchors: torch.Tensor,
        logits: torch.Tensor,
        deltas: torch.Tensor,
        image_hw: tuple[int, int],
        cap: int,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Decode, clip and NMS one image's proposals, keeping at most `cap`."""
        with torch.no_grad():
            boxes = decode_boxes(anchors, deltas.detach(), _RPN_WEIGHTS)
            h, w = image_hw
            boxes[:, 0::2] = boxes[:, 0::2].clamp(0, w)
            boxes[:, 1::2] = boxes[:, 1::2].clamp(0, h)
            scores = torch.sigmoid(logits.detach())
            valid = ((boxes[:, 2] - boxes[:, 0]) >= 1) & ((boxes[:, 3] - boxes[:, 1]) >= 1)
            boxes, scores = boxes[valid], scores[valid]
            keep = nms(boxes, scores, RPN_NMS_IOU)[:cap]
        return boxes[keep], scores[keep]

    def embed(self, feats: torch.Tensor, rois: list[torch.Tensor]) -> torch.Tensor:
        pooled = roi_align(
            feats,
            rois,
            output_size=ROI_SIZE,
            spatial_scale=1.0 / STRIDE,
            sampling_ratio=2,
            aligned=True,
        )
        return self.roi_head(pooled)  # type: ignore [no-any-return]

    def classify(self, embeddings: torch.Tensor) -> torch.Tensor:
        """Class logits, background in the last column."""
        if self.classifier_kind is ClassifierKind.COSINE:
            cos = F.normalize(embeddings, dim=1) @ F.normalize(
                self.classifier.weight, dim=1
            ).T
            return COSINE_SCALE * cos + self.classifier.bias
        return self.classifier(embeddings)  # type: ignore [no-any-return]

    def forward(  # type: ignore [override]
        self,
        images: torch.Tensor,
        proposal_cap: int,
        *,
        dropout_rate: float = 0.0,
        training: bool = False,
        generator: Optional[torch.Generator] = None,
    ) -> list[ForwardOutput]:
        """Run the full pipeline on a `(B, 3, H, W)` batch."""
        feats = self.features(images)
        anchors, logits, deltas = self.proposal_outputs(feats)
        hw = (images.shape[-2], images.shape[-1])
        selected = [
            self.select_proposals(anchors, logits[i], deltas[i], hw, proposal_cap)
            for i in range(images.shape[0])
        ]
        embeddings = self.embed(feats, [boxes for boxes, _ in selected])
        if training:
            embeddings = apply_dropout(embeddings, dropout_rate, generator)
        class_logits = self.classify(embeddings)
        box_deltas = self.regressor(embeddings)
        outputs, start = [], 0
        for boxes, scores in selected:
            stop = start + boxes.shape[0]
            outputs.append(
                ForwardOutput(
                    boxes,
                    scores,
                    embeddings[start:stop],
                    class_logits[start:stop],
                    box_deltas[start:stop],
                )
            )
            start = stop
        return outputs


def apply_dropout(
    x: torch.Tensor, rate: float, generator: Optional[torch.Generator] = None
) -> torch.Tensor:
    """Inverted dropout: zero each entry with probability `rate`, scale the rest.

    The mask is drawn from `generator` (or the global generator), so a training
    run that owns its generator is reproducible under concurrency.
    """
    if rate == 0.0:
        return x
    keep = torch.rand(x.shape, generator=generator, dtype=x.dtype) >= rate
    return x * keep / (1.0 - rate)


def init_novel_rows(
    count: int, dim: int, seed: int, *, dtype: torch.dtype = torch.float32
) -> torch.Tensor:
    """Zero-mean Gaussian classifier rows (std 0.01) drawn from their own generator."""
    generator = torch.Generator().manual_seed(seed)
    rows = torch.randn(count, dim, generator=generator, dtype=torch.float64)
    return (rows * NOVEL_INIT_STD).to(dtype)


def classifier_rows(
    detector: Detector, class_ids: Optional[Iterable[int]] = None
) -> dict[int, np.ndarray]:
    """Classifier weight rows keyed by class id (background excluded), as float64."""
    ids = detector.class_ids if class_ids is None else tuple(class_ids)
    weight = detector.classifier.weight.detach().double().numpy()
    return {c: weight[detector.row_of(c)].copy() for c in ids}


def _as_tensor(pixels: Any, detector: Detector) -> torch.Tensor:
    arr = np.asarray(pixels, dtype=np.float32)
    dtype = next(detector.parameters()).dtype
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1))).to(dtype)


def _check_pixels(pixels: Any, detector: Detector) -> None:
    shape = np.shape(pixels)
    expected = (detector.image_size, detector.image_size, 3)
    if tuple(shape) != expected:
        raise ShapeError(f"expected an image of shape {expected}, got {tuple(shape)}")


def forward(
    detector: Detector,
    pixels: Any,
    proposal_cap: int,
    dropout_rate: float = 0.0,
    training: bool = False,
    generator: Optional[torch.Generator] = None,
) -> ForwardOutput:
    """Run `detector` on one H x W x 3 image.

    Parameters
    ----------
    detector : Detector
        The model.
    pixels : array-like
        Image intensities in [0, 1]; must match the detector's image size.
    proposal_cap : int
        Maximum number of proposals kept after NMS.
    dropout_rate : float
        Dropout applied to the RoI embedding right before the classifier, only
        when `training` is True.  By default, 0.
    training : bool
        Training-mode pass.  With False the output is a pure function of the
        inputs and no autograd graph is recorded.
    generator : torch.Generator | None
        Source of the dropout mask.
    """
    _check_pixels(pixels, detector)
    if not 0.0 <= dropout_rate < 1.0:
        raise ConfigurationError(f"dropout_rate must lie in [0, 1), got {dropout_rate}")
    if proposal_cap < 1:
        raise ConfigurationError(f"proposal_cap must be >= 1, got {proposal_cap}")
    images = _as_tensor(pixels, detector)[None]
    if training:
        return detector(
            images,
            proposal_cap,
            dropout_rate=dropout_rate,
            training=True,
            generator=generator,
        )[0]  # type: ignore [no-any-return]
    with torch.no_grad():
        return detector(images, proposal_cap)[0]  # type: ignore [no-any-return]


# ----------------------------- inference ----------------------------------------


class Detections(NamedTuple):
    """Post-processed detections of one image, as numpy arrays."""

    boxes: np.ndarray
    scores: np.ndarray
    labels: np.ndarray
    proposals: np.ndarray
    objectness: np.ndarray


def detect(
    detector: Detector,
    pixels: Any,
    *,
    proposal_cap: int = 64,
    score_threshold: float = 0.05,
    nms_threshold: float = 0.5,
    max_detections: int = 100,
) -> Detections:
    """Return class-labelled detections after per-class NMS.

    Scores are softmax probabilities; boxes are decoded with the class-agnostic
    regressor and clipped to the image.
    """
    out = forward(detector, pixels, proposal_cap)
    with torch.no_grad():
        probs = torch.softmax(out.class_logits, dim=1)[:, :-1]
        boxes = decode_boxes(out.proposals, out.box_deltas, _ROI_WEIGHTS)
        size = float(detector.image_size)
        boxes = boxes.clamp(0, size)
        rows, cols = torch.nonzero(probs > score_threshold, as_tuple=True)
        cand_boxes, cand_scores = boxes[rows], probs[rows, cols]
        valid = ((cand_boxes[:, 2] - cand_boxes[:, 0]) > 0) & (
            (cand_boxes[:, 3] - cand_boxes[:, 1]) > 0
        )
        cand_boxes, cand_scores, cols = cand_boxes[valid], cand_scores[valid], cols[valid]
        keep = batched_nms(cand_boxes, cand_scores, cols, nms_threshold)[:max_detections]
        ids = torch.as_tensor(detector.class_ids, dtype=torch.long)
        labels = ids[cols[keep]]
        return Detections(
            boxes=cand_boxes[keep].double().numpy(),
            scores=cand_scores[keep].double().numpy(),
            labels=labels.numpy(),
            proposals=out.proposals.double().numpy(),
            objectness=out.objectness.double().numpy(),
        )


# ----------------------------- losses -------------------------------------------


class LossTerms(NamedTuple):
    """The three terms of the detection loss (scalar tensors)."""

    L_rpn: torch.Tensor
    L_cls: torch.Tensor
    L_loc: torch.Tensor

    def total(self) -> torch.Tensor:
        return self.L_rpn + self.L_cls + self.L_loc

    def as_floats(self) -> tuple[float, float, float]:
        return (
            self.L_rpn.detach().item(),
            self.L_cls.detach().item(),
            self.L_loc.detach().item(),
        )


def rpn_losses(
    anchors: torch.Tensor,
    logits: torch.Tensor,
    deltas: torch.Tensor,
    gt_boxes: torch.Tensor,
) -> torch.Tensor:
    """Objectness BCE (positives and negatives weighted equally) plus smooth-L1.

    An anchor is positive at IoU >= 0.5 with some ground truth or when it is the
    best anchor of a ground truth, negative below 0.3, ignored otherwise.
    """
    iou = box_iou(anchors, gt_boxes)
    best_iou, best_gt = iou.max(dim=1)
    positive = best_iou >= POSITIVE_IOU
    per_gt_best = iou.max(dim=0).values
    positive |= ((iou == per_gt_best[None]) & (per_gt_best[None] > 0)).any(dim=1)
    negative = (best_iou < NEGATIVE_IOU) & ~positive

    bce = F.binary_cross_entropy_with_logits(
        logits, positive.to(logits.dtype), reduction="none"
    )
    parts = [bce[mask].mean() for mask in (positive, negative) if mask.any()]
    objectness = torch.stack(parts).mean() if parts else logits.sum() * 0.0
    targets = encode_boxes(anchors[positive], gt_boxes[best_gt[positive]], _RPN_WEIGHTS)
    box = F.smooth_l1_loss(
        deltas[positive], targets, beta=1.0 / 9, reduction="sum"
    ) / max(1, int(positive.sum()))
    return objectness + box


def roi_losses(
    class_logits: torch.Tensor,
    box_deltas: torch.Tensor,
    labels: torch.Tensor,
    box_targets: torch.Tensor,
    background_row: int,
    regress: Optional[torch.Tensor] = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Cross-entropy over assigned RoIs and smooth-L1 over positive RoIs.

    Parameters
    ----------
    class_logits : torch.Tensor
        `(N, C + 1)` logits.
    box_deltas : torch.Tensor
        `(N, 4)` predicted deltas.
    labels : torch.Tensor
        `(N,)` target rows; `background_row` for background, -1 for ignored RoIs.
    box_targets : torch.Tensor
        `(N, 4)` regression targets (only rows of positive RoIs are read).
    background_row : int
        Index of the background row.
    regress : torch.Tensor | None
        `(N,)` boolean mask of the RoIs that may enter `L_loc`.  By default, all.

    Returns
    -------
    tuple[torch.Tensor, torch.Tensor]
        `(L_cls, L_loc)`; `L_loc` is exactly 0 without positive RoIs.
    """
    assigned = labels != _IGNORE
    if assigned.any():
        l_cls = F.cross_entropy(class_logits[assigned], labels[assigned])
    else:
        l_cls = class_logits.sum() * 0.0
    positive = assigned & (labels != background_row)
    if regress is not None:
        positive &= regress
    if positive.any():
        l_loc = F.smooth_l1_loss(
            box_deltas[positive], box_targets[positive], beta=1.0, reduction="sum"
        ) / int(positive.sum())
    else:
        l_loc = box_deltas.sum() * 0.0
    return l_cls, l_loc


def assign_rois(
    rois: torch.Tensor,
    gt_boxes: torch.Tensor,
    gt_rows: torch.Tensor,
    background_row: int,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Return `(labels, box_targets)` for `rois` against one image's ground truth.

    Positive at IoU >= 0.5, background below 0.3, ignored in between.  Background
    RoIs are capped at three times the positives, keeping the highest-ranked ones.
    """
    iou = box_iou(rois, gt_boxes)
    best_iou, best_gt = iou.max(dim=1)
    labels = torch.full((rois.shape[0],), _IGNORE, dtype=torch.long)
    positive = best_iou >= POSITIVE_IOU
    labels[positive] = gt_rows[best_gt[positive]]
    background = torch.nonzero(best_iou < NEGATIVE_IOU).flatten()
    limit = max(3 * int(positive.sum()), 1)
    labels[background[:limit]] = background_row
    targets = torch.zeros_like(rois)
    if positive.any():
        targets[positive] = encode_boxes(
            rois[positive], gt_boxes[best_gt[positive]], _ROI_WEIGHTS
        )
    return labels, targets


def _prepare_batch(
    detector: Detector,
    batch: Sequence[AnnotatedImage],
    augmentation: Optional[Augmentation],
    rng: Optional[np.random.Generator],
    *,
    with_rows: bool = True,
) -> tuple[torch.Tensor, list[torch.Tensor], list[torch.Tensor]]:
    """Stack a batch, applying one random scale and per-image flips.

    Every image gets one `Augmentation.draw`; the first draw's scale applies to
    the whole batch.  Label rows are skipped (empty list) when `with_rows` is
    False, so images may carry classes the detector does not know.
    """
    for image in batch:
        _check_pixels(image.pixels, detector)
    images = torch.stack([_as_tensor(image.pixels, detector) for image in batch])
    dtype = images.dtype
    boxes = [torch.tensor(image.boxes, dtype=dtype).reshape(-1, 4) for image in batch]
    rows = (
        [
            torch.tensor([detector.row_of(c) for c in image.labels], dtype=torch.long)
            for image in batch
        ]
        if with_rows
        else []
    )
    if augmentation is None or augmentation.is_identity:
        return images, boxes, rows

    rng = rng if rng is not None else np.random.default_rng(0)
    draws = [augmentation.draw(rng) for _ in batch]
    scale = draws[0][0]
    size = detector.image_size
    new_size = max(STRIDE, int(round(size * scale / STRIDE)) * STRIDE)
    if new_size != size:
        images = F.interpolate(
            images, size=(new_size, new_size), mode="bilinear", align_corners=False
        )
        boxes = [b * (new_size / size) for b in boxes]
    for i, (_, flip) in enumerate(draws):
        if flip:
            images[i] = images[i].flip(-1)
            b = boxes[i].clone()
            b[:, 0], b[:, 2] = new_size - boxes[i][:, 2], new_size - boxes[i][:, 0]
            boxes[i] = b
    return images, boxes, rows


def compute_loss(
    detector: Detector,
    batch: Sequence[AnnotatedImage],
    proposal_cap: int,
    dropout_rate: float = 0.0,
    *,
    gradient_stop_rpn: bool = False,
    augmentation: Optional[Augmentation] = None,
    rng: Optional[np.random.Generator] = None,
    generator: Optional[torch.Generator] = None,
    iteration: Optional[int] = None,
) -> LossTerms:
    """Training-mode loss `L_rpn + L_cls + L_loc` of one batch.

    Ground-truth boxes are appended to each image's proposals as extra RoIs for
    `L_cls` only; `L_loc` is taken over matched proposals and is 0 when no
    proposal matches a ground truth.

    Parameters
    ----------
    detector : Detector
        The model, with autograd enabled for its trainable parameters.
    batch : Sequence[AnnotatedImage]
        Images carrying at least one annotation each.
    proposal_cap : int
        Post-NMS proposal cap.
    dropout_rate : float
        Dropout on the RoI embedding before the classifier.
    gradient_stop_rpn : bool
        Feed the proposal module a detached copy of the backbone features, so
        that `L_rpn` does not reach the backbone.
    augmentation : Augmentation | None
        Random scale/flip; None for the raw images.
    rng : np.random.Generator | None
        Source of the augmentation draws.
    generator : torch.Generator | None
        Source of the dropout mask.
    iteration : int | None
        Reported in a `NumericalError`.
    """
    if not batch:
        raise DataError("cannot compute the loss of an empty batch")
    if any(image.num_instances == 0 for image in batch):
        raise DataError("every image of a training batch needs at least one annotation")
    if not 0.0 <= dropout_rate < 1.0:
        raise ConfigurationError(f"dropout_rate must lie in [0, 1), got {dropout_rate}")

    images, gt_boxes, gt_rows = _prepare_batch(detector, batch, augmentation, rng)
    feats = detector.features(images)
    rpn_feats = feats.detach() if gradient_stop_rpn else feats
    anchors, logits, deltas = detector.proposal_outputs(rpn_feats)
    hw = (images.shape[-2], images.shape[-1])

    l_rpn = torch.stack(
        [rpn_losses(anchors, logits[i], deltas[i], gt_boxes[i]) for i in range(len(batch))]
    ).mean()

    rois, labels, targets, regress = [], [], [], []
    for i in range(len(batch)):
        boxes, _ = detector.select_proposals(
            anchors, logits[i], deltas[i], hw, proposal_cap
        )
        n = boxes.shape[0]
        boxes = torch.cat([boxes, gt_boxes[i]])
        lab, tgt = assign_rois(boxes, gt_boxes[i], gt_rows[i], detector.background_row)
        rois.append(boxes)
        labels.append(lab)
        targets.append(tgt)
        regress.append(torch.arange(boxes.shape[0]) < n)

    embeddings = detector.embed(feats, rois)
    embeddings = apply_dropout(embeddings, dropout_rate, generator)
    l_cls, l_loc = roi_losses(
        detector.classify(embeddings),
        detector.regressor(embeddings),
        torch.cat(labels),
        torch.cat(targets),
        detector.background_row,
        torch.cat(regress),
    )
    terms = LossTerms(l_rpn, l_cls, l_loc)
    for name, value in zip(LossTerms._fields, terms):
        if not torch.isfinite(value):
            raise NumericalError("non-finite loss", component=name, iteration=iteration)
    return terms


# ----------------------------- base pretraining ---------------------------------


class TrainConfig(KifsodModel):
    """Base pretraining settings.

    Attributes
    ----------
    base_lr : float
        Peak learning rate. By default, 0.02.
    momentum : float
        SGD momentum. By default, 0.9.
    weight_decay : float
        L2 regularization strength. By default, 1e-4.
    batch_size : int
        Images per iteration. By default, 8.
    iterations : int
        Number of SGD steps. By default, 1500.
    seed : int
        Seed of the initialization, batch sampling and augmentation.
    classifier_kind : ClassifierKind
        `"linear"` or `"cosine"`. By default, `"linear"`.
    warmup_iterations : int
        Linear learning-rate warmup length. By default, 50.
    lr_decay_at : float
        Fraction of `iterations` after which the lr drops tenfold. By default, 0.8.
    proposal_cap : int
        Post-NMS proposal cap during pretraining. By default, 32.
    log_interval : int
        Iterations per logged (averaged) loss row. By default, 50.
    augmentation : Augmentation
        Random scaling and flipping of the training images.
    center_embedding : bool
        Run `center_embeddings` on the training images once training ends (linear
        classifier only). By default, True.
    """

    base_lr: float = Field(0.02, gt=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    weight_decay: float = Field(1e-4, ge=0)
    batch_size: int = Field(8, ge=1)
    iterations: int = Field(1500, ge=1)
    seed: int = 0
    classifier_kind: ClassifierKind = ClassifierKind.LINEAR
    warmup_iterations: int = Field(50, ge=0)
    lr_decay_at: float = Field(0.8, gt=0, le=1)
    proposal_cap: int = Field(32, ge=1)
    log_interval: int = Field(50, ge=1)
    augmentation: Augmentation = Field(default_factory=Augmentation)
    center_embedding: bool = True


class LossRecord(NamedTuple):
    iteration: int
    L_rpn: float
    L_cls: float
    L_loc: float

    @property
    def total(self) -> float:
        return self.L_rpn + self.L_cls + self.L_loc


class PretrainResult(NamedTuple):
    detector: Detector
    log: list[LossRecord]


def pretrain_base(
    base_data: Sequence[AnnotatedImage],
    config: TrainConfig,
    *,
    base_ids: Optional[Iterable[int]] = None,
) -> PretrainResult:
    """Pretrain a detector on base-class data.

    Parameters
    ----------
    base_data : Sequence[AnnotatedImage]
        Training images; images without annotations are skipped.
    config : TrainConfig
        Optimization settings.
    base_ids : Iterable[int] | None
        The base classes.  By default, every label found in `base_data`.

    Returns
    -------
    PretrainResult
        The detector (one classifier row per base class plus background) and the
        loss log, one row per `log_interval` iterations averaged over the interval.
    """
    images = [image for image in base_data if image.num_instances]
    if not images:
        raise DataError("base_data holds no annotated image")
    found = {label for image in images for label in image.labels}
    ids = tuple(sorted(set(base_ids))) if base_ids is not None else tuple(sorted(found))
    if stray := found - set(ids):
        raise DataError(f"base_data carries non-base labels: {sorted(stray)}")
    image_size = images[0].size[0]

    detector = Detector(
        ids,
        image_size=image_size,
        classifier_kind=config.classifier_kind,
        seed=config.seed,
    )
    detector.train()
    optimizer = torch.optim.SGD(
        detector.parameters(),
        lr=config.base_lr,
        momentum=config.momentum,
        weight_decay=config.weight_decay,
    )
    log: list[LossRecord] = []
    window: list[tuple[float, float, float]] = []
    decay_at = int(config.lr_decay_at * config.iterations)
    logger.info(
        "pretraining on %d images, %d classes, %d iterations",
        len(images),
        len(ids),
        config.iterations,
    )
    for it in range(config.iterations):
        lr = config.base_lr * (0.1 if it >= decay_at else 1.0)
        if it < config.warmup_iterations:
            lr *= (it + 1) / config.warmup_iterations
        for group in optimizer.param_groups:
            group["lr"] = lr

        rng = np.random.default_rng(derive_seed(config.seed, it))
        size = config.batch_size
        idx = rng.choice(len(images), size=size, replace=size > len(images))
        terms = compute_loss(
            detector,
            [images[int(i)] for i in idx],
            config.proposal_cap,
            augmentation=config.augmentation,
            rng=rng,
            iteration=it,
        )
        optimizer.zero_grad()
        terms.total().backward()
        optimizer.step()

        window.append(terms.as_floats())
        if (it + 1) % config.log_interval == 0 or it + 1 == config.iterations:
            mean = np.mean(window, axis=0)
            log.append(LossRecord(it + 1, *(float(v) for v in mean)))
            window.clear()
            logger.info(
                "iteration %d: L_rpn=%.4f L_cls=%.4f L_loc=%.4f",
                it + 1,
                *mean,
            )
    detector.eval()
    if config.center_embedding and config.classifier_kind is ClassifierKind.LINEAR:
        center_embeddings(detector, images)
    return PretrainResult(detector, log)


def write_loss_log(log: Iterable[LossRecord], path: Union[str, Path]) -> Path:
    """Write the loss log as CSV (`iteration,L_rpn,L_cls,L_loc`)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LossRecord._fields)
        for row in log:
            writer.writerow([row.iteration, *(f"{v:.6g}" for v in row[1:])])
    return path


# ----------------------------- instance features --------------------------------


def extract_instance_features(
    detector: Detector,
    image: AnnotatedImage,
    views: int,
    seed: int,
    *,
    augmentation: Optional[Augmentation] = None,
) -> list[tuple[int, np.ndarray]]:
    """Embed every ground-truth box of `image` under `views` augmented views.

    The RoI stage pools the ground-truth boxes instead of proposals; dropout is
    never applied.  Vectors are ordered view by view, box by box.

    Parameters
    ----------
    detector : Detector
        The (pretrained) model.
    image : AnnotatedImage
        An image with at least one annotation.
    views : int
        Number of augmented views R (>= 1).
    seed : int
        Seed of the augmentation draws.
    augmentation : Augmentation | None
        Random scale/flip.  By default, `Augmentation()`.
    """
    if image.num_instances == 0:
        raise DataError(f"image {image.image_id} carries no annotation")
    if views < 1:
        raise ConfigurationError(f"views must be >= 1, got {views}")
    augmentation = augmentation if augmentation is not None else Augmentation()

    out: list[tuple[int, np.ndarray]] = []
    with torch.no_grad():
        for r in range(views):
            rng = np.random.default_rng(derive_seed(seed, image.image_id, r))
            images, boxes, _ = _prepare_batch(
                detector, [image], augmentation, rng, with_rows=False
            )
            embeddings = detector.embed(detector.features(images), boxes)
            out.extend(
                (label, vector.double().numpy())
                for label, vector in zip(image.labels, embeddings)
            )
    return out


def center_embeddings(
    detector: Detector, images: Sequence[AnnotatedImage]
) -> np.ndarray:
    """Move the embedding origin to the mean of the per-class ground-truth embeddings.

    ReLU embeddings share a large positive offset, so the raw mean feature of any
    class points nearly the same way.  Subtracting the class-balanced mean leaves
    each class's own direction.  The classifier and regressor biases absorb the
    shift, so every logit and box delta of the detector is unchanged.

    Parameters
    ----------
    detector : Detector
        A detector with a linear classifier; modified in place.
    images : Sequence[AnnotatedImage]
        Annotated images of the detector's classes, embedded without augmentation.

    Returns
    -------
    np.ndarray
        The new origin, in the coordinates of the uncentered embedding.
    """
    if detector.classifier_kind is not ClassifierKind.LINEAR:
        raise ConfigurationError("only a linear classifier can absorb the embedding shift")
    groups: dict[int, list[np.ndarray]] = defaultdict(list)
    identity = Augmentation.identity()
    for image in images:
        if image.num_instances:
            for label, vector in extract_instance_features(
                detector, image, 1, 0, augmentation=identity
            ):
                groups[label].append(vector)
    if not groups:
        raise DataError("no annotated image to center the embedding on")
    mean = np.mean([np.mean(groups[c], axis=0) for c in sorted(groups)], axis=0)

    center = detector.embedding_center
    shift = torch.as_tensor(mean, dtype=center.offset.dtype)
    with torch.no_grad():
        center.offset += shift
        detector.classifier.bias += detector.classifier.weight @ shift
        detector.regressor.bias += detector.regressor.weight @ shift
    logger.info("centered the embedding on %d classes", len(groups))
    return center.offset.double().numpy().copy()


# ----------------------------- architecture -------------------------------------


def describe_architecture(
    detector: Detector,
    proposal_cap_train: int = 64,
    proposal_cap_infer: int = 64,
) -> ArchDescriptor:
    """Describe the live module tree for FLOPs accounting."""
    from kifsod._efficiency import ArchDescriptor, ConvLayer, LinearLayer, RoIStage

    layers: list[Any] = []
    for name, module in detector.named_modules():
        if name == "roi_head":
            layers.append(RoIStage(name="roi_align", output_size=ROI_SIZE))
        if isinstance(module, nn.Conv2d):
            layers.append(
                ConvLayer(
                    name=name,
                    kernel=module.kernel_size[0],
                    in_ch=module.in_channels,
                    out_ch=module.out_channels,
                    stride=module.stride[0],
                    padding=int(module.padding[0]),  # type: ignore [index]
                )
            )
        elif isinstance(module, nn.Linear):
            layers.append(
                LinearLayer(
                    name=name,
                    in_features=module.in_features,
                    out_features=module.out_features,
                )
            )
    return ArchDescriptor(
        layers=tuple(layers),
        input_size=(detector.image_size, detector.image_size, 3),
        proposal_cap_train=proposal_cap_train,
        proposal_cap_infer=proposal_cap_infer,
    )


# ----------------------------- checkpoints --------------------------------------

_MAGIC = b"KIFSODCK"
_HEADER_LEN = struct.Struct("<Q")


class Checkpoint(NamedTuple):
    detector: Detector
    header: dict[str, Any]


def save_checkpoint(
    detector: Detector,
    path: Union[str, Path],
    *,
    config: Optional[dict[str, Any]] = None,
) -> Path:
    """Write `detector` to a single binary container.

    Layout: 8 magic bytes, the header length as a little-endian uint64, a UTF-8
    JSON header, then the little-endian float32 payloads.  The header lists each
    component's tensors (parameters and buffers) with their shape and payload
    offset (in bytes).
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    components: dict[str, list[dict[str, Any]]] = {}
    payloads: list[bytes] = []
    offset = 0
    for comp in COMPONENT_NAMES:
        entries = []
        for name, tensor in detector.component(comp).state_dict().items():
            data = tensor.detach().cpu().numpy().astype("<f4").tobytes()
            entries.append({"name": name, "shape": list(tensor.shape), "offset": offset})
            payloads.append(data)
            offset += len(data)
        components[comp] = entries
    header = {
        "format": "kifsod-checkpoint",
        "version": 1,
        "image_size": detector.image_size,
        "class_ids": list(detector.class_ids),
        "novel_ids": list(detector.novel_ids),
        "classifier_kind": str(detector.classifier_kind),
        "embed_dim": detector.embed_dim,
        "components": components,
        "config": config or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with path.open("wb") as fh:
        fh.write(_MAGIC)
        fh.write(_HEADER_LEN.pack(len(blob)))
        fh.write(blob)
        for data in payloads:
            fh.write(data)
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    """Read a container written by `save_checkpoint`."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"checkpoint {path} does not exist")
    raw = path.read_bytes()
    if raw[: len(_MAGIC)] != _MAGIC:
        raise DataError(f"{path} is not a kifsod checkpoint")
    start = len(_MAGIC) + _HEADER_LEN.size
    (n,) = _HEADER_LEN.unpack(raw[len(_MAGIC) : start])
    try:
        header = json.loads(raw[start : start + n])
    except ValueError as e:
        raise DataError(f"corrupt checkpoint header in {path}: {e}") from e
    payload = memoryview(raw)[start + n :]

    detector = Detector(
        header["class_ids"],
        novel_ids=header["novel_ids"],
        image_size=header["image_size"],
        classifier_kind=header["classifier_kind"],
    )
    for comp in COMPONENT_NAMES:
        state = {}
        for entry in header["components"][comp]:
            count = int(np.prod(entry["shape"], dtype=np.int64))
            end = entry["offset"] + 4 * count
            if end > len(payload):
                raise DataError(f"truncated checkpoint {path}")
            arr = np.frombuffer(payload[entry["offset"] : end], dtype="<f4")
            state[entry["name"]] = torch.from_numpy(arr.reshape(entry["shape"]).copy())
        try:
            detector.component(comp).load_state_dict(state)
        except RuntimeError as e:
            raise ShapeError(f"checkpoint component {comp!r} does not fit: {e}") from e
    detector.eval()
    return Checkpoint(detector, header)
