from __future__ import annotations

from enum import Enum
from typing import TYPE_CHECKING

import numpy as np

if TYPE_CHECKING:
    from typing import Final, Literal


class Component(str, Enum):
    """Trainable components of the two-stage detector.

    Attributes
    ----------
    BACKBONE : Literal["backbone"]
        Convolutional feature extractor.
    PROPOSAL : Literal["proposal"]
        Region proposal module.
    ROI_HEAD : Literal["roi_head"]
        Per-proposal embedding head.
    BASE_LEARNER : Literal["base_learner"]
        Box classifier and class-agnostic box regressor.
    """

    BACKBONE: Literal["backbone"] = "backbone"
    PROPOSAL: Literal["proposal"] = "proposal"
    ROI_HEAD: Literal["roi_head"] = "roi_head"
    BASE_LEARNER: Literal["base_learner"] = "base_learner"

    def __str__(self) -> Literal["backbone", "proposal", "roi_head", "base_learner"]:
        return self.value  # type: ignore [no-any-return]


# order follows the forward pass
COMPONENTS: Final[tuple[Component, ...]] = (
    Component.BACKBONE,
    Component.PROPOSAL,
    Component.ROI_HEAD,
    Component.BASE_LEARNER,
)


class BatchMode(str, Enum):
    """How a few-shot batch is formed.

    Attributes
    ----------
    IMAGE_LEVEL : Literal["image_level"]
        Sample images, keeping every annotation they carry.
    INSTANCE_LEVEL : Literal["instance_level"]
        Sample instances, keeping only the selected annotation of each image.
    """

    IMAGE_LEVEL: Literal["image_level"] = "image_level"
    INSTANCE_LEVEL: Literal["instance_level"] = "instance_level"

    def __str__(self) -> Literal["image_level", "instance_level"]:
        return self.value  # type: ignore [no-any-return]


class ClassifierKind(str, Enum):
    """Instantiation of the box classifier."""

    LINEAR: Literal["linear"] = "linear"
    COSINE: Literal["cosine"] = "cosine"

    def __str__(self) -> Literal["linear", "cosine"]:
        return self.value  # type: ignore [no-any-return]


class InitMode(str, Enum):
    """Initialization of the novel classifier rows.

    Attributes
    ----------
    RANDOM : Literal["random"]
        Zero-mean Gaussian rows (std 0.01), zero bias.
    L2NORM : Literal["l2norm"]
        Aggregated novel features, L2-normalized.
    ALR : Literal["alr"]
        Aggregated novel features divided by the estimated length ratio.
    IMPRINTED : Literal["imprinted"]
        L2-normalized centroids with a cosine classifier.
    """

    RANDOM: Literal["random"] = "random"
    L2NORM: Literal["l2norm"] = "l2norm"
    ALR: Literal["alr"] = "alr"
    IMPRINTED: Literal["imprinted"] = "imprinted"

    def __str__(self) -> Literal["random", "l2norm", "alr", "imprinted"]:
        return self.value  # type: ignore [no-any-return]


class Phase(str, Enum):
    """Phase whose proposal cap applies when counting FLOPs."""

    TRAIN_FORWARD: Literal["train_forward"] = "train_forward"
    INFERENCE: Literal["inference"] = "inference"

    def __str__(self) -> Literal["train_forward", "inference"]:
        return self.value  # type: ignore [no-any-return]


def derive_seed(*entropy: int) -> int:
    """Return a 32-bit seed derived from an arbitrary tuple of integers.

    Used wherever a per-item seed is needed (image index, iteration, view) so
    that results do not depend on the order in which items are processed.
    """
    state = np.random.SeedSequence([int(e) & 0xFFFFFFFF for e in entropy])
    return int(state.generate_state(1)[0])
