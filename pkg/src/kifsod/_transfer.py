from __future__ import annotations

import copy
import csv
import logging
from contextlib import contextmanager
from pathlib import Path
from typing import TYPE_CHECKING, Any, Callable, NamedTuple, Optional, Union

import numpy as np
import torch
from pydantic import Field, field_validator
from torch import nn

from kifsod._base_model import KifsodModel
from kifsod._detector import (
    Detector,
    LossRecord,
    compute_loss,
    init_novel_rows,
)
from kifsod._errors import ConfigurationError, DataError
from kifsod._synthgen import Augmentation, sample_batch
from kifsod._utils import COMPONENTS, BatchMode, Component, derive_seed

if TYPE_CHECKING:
    from collections.abc import Iterable, Iterator

    from kifsod._evalkit import MetricReport
    from kifsod._synthgen import FewShotSet
    from kifsod.protocols import PEvaluator, PTransferSignaler

    StopRule = Callable[[int, MetricReport], bool]

__all__ = [
    "CurvePoint",
    "TransferConfig",
    "TransferResult",
    "TransferRunner",
    "extend_classifier",
    "fewshot_transfer",
    "read_curve",
    "write_curve",
]

DEFAULT_LR_SCALE: dict[Component, float] = {
    Component.BACKBONE: 1.0,
    Component.PROPOSAL: 1.0,
    Component.ROI_HEAD: 0.5,
    Component.BASE_LEARNER: 1.0,
}


@contextmanager
def _exceptions_logged(logger: logging.Logger) -> Iterator[None]:
    """Context manager to log exceptions."""
    try:
        yield
    except Exception as e:
        logger.error(e)


class TransferConfig(KifsodModel):
    """Few-shot transfer settings.

    Attributes
    ----------
    global_lr : float
        Learning rate before per-component scaling. By default, 0.02.
    lr_scale : dict[Component, float]
        Per-component factor; the effective lr of a component is
        `global_lr * lr_scale[component]`, or 0 when it is frozen.  Missing
        components default to 1.  By default, 0.5 for the RoI head, else 1.
    frozen : frozenset[Component]
        Components that are not updated at all.
    frozen_up_to_block : int
        Number of leading backbone blocks kept frozen while the rest of the
        backbone trains. By default, 0.
    dropout_rate : float
        Dropout on the RoI embedding before the classifier, in [0, 1). By default, 0.8.
    gradient_stop_rpn : bool
        Keep the proposal loss from reaching the backbone. By default, False.
    proposal_cap_multiplier : float
        Transfer proposal cap relative to `pretrain_proposal_cap`. By default, 2.
    pretrain_proposal_cap : int
        Post-NMS proposal cap used during base pretraining. By default, 32.
    iterations : int
        Number of SGD steps; 0 evaluates the initial detector only.
    batch_size : int
        Samples per step. By default, 8.
    batch_mode : BatchMode
        `image_level` or `instance_level` sampling. By default, `image_level`.
    seed : int
        Seed of batch sampling, augmentation and dropout.
    momentum, weight_decay : float
        SGD settings. By default, 0.9 and 1e-4.
    log_interval : int
        Iterations per logged (averaged) loss row. By default, 50.
    augmentation : Augmentation
        Random scaling and flipping of the sampled images.
    """

    global_lr: float = Field(0.02, gt=0)
    lr_scale: dict[Component, float] = Field(
        default_factory=lambda: dict(DEFAULT_LR_SCALE)
    )
    frozen: frozenset[Component] = frozenset()
    frozen_up_to_block: int = Field(0, ge=0)
    dropout_rate: float = Field(0.8, ge=0.0, lt=1.0)
    gradient_stop_rpn: bool = False
    proposal_cap_multiplier: float = Field(2.0, gt=0)
    pretrain_proposal_cap: int = Field(32, ge=1)
    iterations: int = Field(1000, ge=0)
    batch_size: int = Field(8, ge=1)
    batch_mode: BatchMode = BatchMode.IMAGE_LEVEL
    seed: int = 0
    momentum: float = Field(0.9, ge=0, lt=1)
    weight_decay: float = Field(1e-4, ge=0)
    log_interval: int = Field(50, ge=1)
    augmentation: Augmentation = Field(default_factory=Augmentation)

    @field_validator("lr_scale", mode="after")
    def _fill_lr_scale(cls, v: dict[Component, float]) -> dict[Component, float]:
        for comp, scale in v.items():
            if scale < 0:
                raise ValueError(f"lr_scale[{comp!s}] must be >= 0, got {scale}")
        return {comp: float(v.get(comp, 1.0)) for comp in COMPONENTS}

    @classmethod
    def from_preset(cls, name: str, **overrides: Any) -> TransferConfig:
        """Return the registered preset `name`, with `overrides` applied."""
        from kifsod._presets import get_preset

        return get_preset(name, **overrides)

    @property
    def proposal_cap(self) -> int:
        return max(1, round(self.pretrain_proposal_cap * self.proposal_cap_multiplier))

    def effective_lr(self, component: Union[Component, str]) -> float:
        """Learning rate of `component`; 0 when frozen."""
        component = Component(component)
        if component in self.frozen:
            return 0.0
        return self.global_lr * self.lr_scale[component]


class CurvePoint(NamedTuple):
    iteration: int
    bAP50: float
    nAP50: float


class TransferResult(NamedTuple):
    """Outcome of a few-shot transfer run.

    Attributes
    ----------
    detector : Detector
        The transferred detector, in inference mode.
    curve : list[CurvePoint]
        `(iteration, bAP50, nAP50)` at every evaluation, iteration 0 included.
    config : TransferConfig
        The configuration the run used.
    losses : list[LossRecord]
        Loss rows averaged over `config.log_interval` steps.
    iterations_run : int
        Steps actually taken (fewer than configured on early stop or cancel).
    """

    detector: Detector
    curve: list[CurvePoint]
    config: TransferConfig
    losses: list[LossRecord]
    iterations_run: int


def extend_classifier(
    detector: Detector, novel_ids: Iterable[int], *, seed: int = 0
) -> Detector:
    """Return a copy of `detector` with classifier rows for `novel_ids`.

    The new rows (zero-mean Gaussian, std 0.01, zero bias) go after the base rows
    and before the background row, which keeps its weights.  Every other weight
    is copied unchanged.
    """
    if detector.novel_ids:
        raise ConfigurationError(
            f"classifier already extended with novel classes {detector.novel_ids}"
        )
    novel = tuple(sorted(set(novel_ids)))
    if not novel:
        raise ConfigurationError("novel_ids must not be empty")
    if overlap := set(novel) & set(detector.class_ids):
        raise ConfigurationError(f"classes {sorted(overlap)} are already known")

    new = copy.deepcopy(detector)
    old = detector.classifier
    weight, bias = old.weight.detach(), old.bias.detach()
    rows = init_novel_rows(len(novel), new.embed_dim, seed, dtype=weight.dtype)
    classifier = nn.Linear(new.embed_dim, weight.shape[0] + len(novel)).to(weight.dtype)
    with torch.no_grad():
        classifier.weight.copy_(torch.cat([weight[:-1], rows, weight[-1:]]))
        classifier.bias.copy_(
            torch.cat([bias[:-1], torch.zeros(len(novel), dtype=bias.dtype), bias[-1:]])
        )
    new.classifier = classifier
    new.class_ids = detector.class_ids + novel
    new.novel_ids = novel
    return new


def _component_modules(
    detector: Detector, component: Component, frozen_up_to_block: int
) -> list[nn.Module]:
    if component is Component.BACKBONE:
        return list(detector.backbone)[frozen_up_to_block:]
    if component is Component.BASE_LEARNER:
        return [detector.classifier, detector.regressor]
    return [detector.component(str(component))]


def _param_groups(detector: Detector, config: TransferConfig) -> list[dict[str, Any]]:
    """Freeze what `config` freezes and return one SGD group per trained component."""
    blocks = len(detector.backbone)
    if config.frozen_up_to_block > blocks:
        raise ConfigurationError(
            f"frozen_up_to_block={config.frozen_up_to_block} exceeds the {blocks} "
            "backbone blocks"
        )
    for p in detector.parameters():
        p.requires_grad_(False)
    groups = []
    for comp in COMPONENTS:
        lr = config.effective_lr(comp)
        if lr == 0.0:
            continue
        params = [
            p
            for m in _component_modules(detector, comp, config.frozen_up_to_block)
            for p in m.parameters()
        ]
        for p in params:
            p.requires_grad_(True)
        if params:
            groups.append({"params": params, "lr": lr, "name": str(comp)})
    return groups


class TransferRunner:
    """Object that executes a few-shot transfer run.

    It drives the optimization of a copy of the given detector over a few-shot
    set and emits signals at specific times during the run (see
    [`PTransferSignaler`][kifsod.protocols.PTransferSignaler]).  Exceptions
    raised by connected slots are logged, not propagated; evaluator and numerical
    failures abort the run.

    Parameters
    ----------
    signal_emitter : PTransferSignaler | None
        By default, a new `TransferSignaler`.
    logger : logging.Logger | None
        By default, this module's logger.
    """

    def __init__(
        self,
        signal_emitter: Optional[PTransferSignaler] = None,
        logger: Optional[logging.Logger] = None,
    ) -> None:
        if signal_emitter is None:
            from kifsod._signals import TransferSignaler

            signal_emitter = TransferSignaler()
        self._signals = signal_emitter
        self._logger = logger or logging.getLogger(__name__)
        self._running = False
        self._canceled = False
        self._iteration = 0

    @property
    def events(self) -> PTransferSignaler:
        """Signals that are emitted during the run."""
        return self._signals

    def is_running(self) -> bool:
        """Return True between `transferStarted` and `transferFinished`."""
        return self._running

    def cancel(self) -> None:
        """Cancel the current run after the step in progress.

        This is a no-op if no run is underway.  A canceled run still returns its
        `TransferResult`, and emits `transferCanceled` before `transferFinished`.
        """
        if self._running:
            self._canceled = True

    def run(
        self,
        detector: Detector,
        fewshot: FewShotSet,
        config: TransferConfig,
        evaluator: Optional[PEvaluator] = None,
        *,
        stop_when: Optional[StopRule] = None,
    ) -> TransferResult:
        """Transfer `detector` to `fewshot` under `config`.

        Parameters
        ----------
        detector : Detector
            The extended (and optionally initialized) detector; it is not modified.
        fewshot : FewShotSet
            The K-shot training set.
        config : TransferConfig
            Optimization settings.
        evaluator : PEvaluator | None
            Called at iteration 0 and every `evaluator.interval` steps.
        stop_when : Callable[[int, MetricReport], bool] | None
            Called after every evaluation; the run stops when it returns True.
        """
        if not detector.novel_ids:
            raise ConfigurationError("the classifier has no novel rows; extend it first")
        if stray := {c for i in fewshot.images for c in i.labels} - set(detector.class_ids):
            raise DataError(f"few-shot labels unknown to the detector: {sorted(stray)}")

        error = None
        self._running, self._canceled, self._iteration = True, False, 0
        with _exceptions_logged(self._logger):
            self._signals.transferStarted.emit(config)
        self._logger.info("transfer started: %s", config)
        try:
            return self._run(detector, fewshot, config, evaluator, stop_when)
        except Exception as e:
            error = e
            raise
        finally:
            self._running = False
            self._canceled = False
            if error is None:
                self._logger.info("transfer finished after %d steps", self._iteration)
            with _exceptions_logged(self._logger):
                self._signals.transferFinished.emit(config)

    def _evaluate(
        self,
        model: Detector,
        iteration: int,
        evaluator: PEvaluator,
        curve: list[CurvePoint],
    ) -> MetricReport:
        model.eval()
        report = evaluator.evaluate(model, iteration)
        model.train()
        curve.append(CurvePoint(iteration, report.bAP, report.nAP))
        with _exceptions_logged(self._logger):
            self._signals.evaluated.emit(iteration, report)
        return report

    def _run(
        self,
        detector: Detector,
        fewshot: FewShotSet,
        config: TransferConfig,
        evaluator: Optional[PEvaluator],
        stop_when: Optional[StopRule],
    ) -> TransferResult:
        model = copy.deepcopy(detector)
        groups = _param_groups(model, config)
        if config.iterations and not groups:
            raise ConfigurationError("every component is frozen; nothing to train")
        # a fresh optimizer: momentum buffers start at zero
        optimizer = (
            torch.optim.SGD(
                groups, momentum=config.momentum, weight_decay=config.weight_decay
            )
            if groups
            else None
        )
        generator = torch.Generator().manual_seed(derive_seed(config.seed, 0xD0))
        curve: list[CurvePoint] = []
        losses: list[LossRecord] = []
        window: list[tuple[float, float, float]] = []

        model.train()
        stop = False
        if evaluator is not None:
            report = self._evaluate(model, 0, evaluator, curve)
            stop = bool(stop_when and stop_when(0, report))

        it = 0
        while not stop and it < config.iterations and optimizer is not None:
            if self._check_canceled():
                break
            it += 1
            batch = sample_batch(
                fewshot, config.batch_mode, config.batch_size, derive_seed(config.seed, it)
            )
            terms = compute_loss(
                model,
                batch,
                config.proposal_cap,
                config.dropout_rate,
                gradient_stop_rpn=config.gradient_stop_rpn,
                augmentation=config.augmentation,
                rng=np.random.default_rng(derive_seed(config.seed, it, 1)),
                generator=generator,
                iteration=it,
            )
            optimizer.zero_grad()
            terms.total().backward()
            optimizer.step()
            self._iteration = it

            values = terms.as_floats()
            window.append(values)
            with _exceptions_logged(self._logger):
                self._signals.stepFinished.emit(it, *values)
            if it % config.log_interval == 0 or it == config.iterations:
                mean = np.mean(window, axis=0)
                losses.append(LossRecord(it, *(float(v) for v in mean)))
                window.clear()
                self._logger.info(
                    "iteration %d: L_rpn=%.4f L_cls=%.4f L_loc=%.4f", it, *mean
                )
            if evaluator is not None and it % evaluator.interval == 0:
                report = self._evaluate(model, it, evaluator, curve)
                stop = bool(stop_when and stop_when(it, report))

        for p in model.parameters():
            p.requires_grad_(True)
        model.eval()
        return TransferResult(model, curve, config, losses, it)

    def _check_canceled(self) -> bool:
        if self._canceled:
            self._logger.warning("transfer canceled at iteration %d", self._iteration)
            with _exceptions_logged(self._logger):
                self._signals.transferCanceled.emit(self._iteration)
            self._canceled = False
            return True
        return False


def fewshot_transfer(
    detector: Detector,
    fewshot: FewShotSet,
    config: TransferConfig,
    evaluator: Optional[PEvaluator] = None,
    *,
    stop_when: Optional[StopRule] = None,
    signal_emitter: Optional[PTransferSignaler] = None,
) -> TransferResult:
    """Run few-shot transfer with a fresh `TransferRunner`.

    See `TransferRunner.run` for the parameters.
    """
    runner = TransferRunner(signal_emitter)
    return runner.run(detector, fewshot, config, evaluator, stop_when=stop_when)


def write_curve(curve: Iterable[CurvePoint], path: Union[str, Path]) -> Path:
    """Write the transfer curve as CSV (`iteration,bAP50,nAP50`)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CurvePoint._fields)
        for point in curve:
            writer.writerow([point.iteration, f"{point.bAP50:.6f}", f"{point.nAP50:.6f}"])
    return path


def read_curve(path: Union[str, Path]) -> list[CurvePoint]:
    """Read a curve CSV written by `write_curve`."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"curve file {path} does not exist")
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != list(CurvePoint._fields):
            raise DataError(f"{path} is not a transfer curve: columns {reader.fieldnames}")
        return [
            CurvePoint(int(row["iteration"]), float(row["bAP50"]), float(row["nAP50"]))
            for row in reader
        ]
