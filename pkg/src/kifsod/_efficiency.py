from __future__ import annotations

import logging
import time
from typing import TYPE_CHECKING, Annotated, Any, Callable, Literal, Optional, Union

from pydantic import Field, model_validator
from typing_extensions import Self

from kifsod._base_model import FrozenModel, KifsodModel
from kifsod._errors import ConfigurationError, DataError
from kifsod._utils import Phase

if TYPE_CHECKING:
    from collections.abc import Iterable

    from kifsod._detector import Detector
    from kifsod._evalkit import DetectionEvaluator
    from kifsod._synthgen import FewShotSet
    from kifsod._transfer import TransferConfig, TransferResult

__all__ = [
    "ArchDescriptor",
    "ConvLayer",
    "ConvergenceMonitor",
    "FlopsReport",
    "LinearLayer",
    "RoIStage",
    "SpeedProtocol",
    "SpeedReport",
    "detect_convergence",
    "estimate_flops",
    "measure_adaptation_speed",
    "transfer_launcher",
]

logger = logging.getLogger(__name__)


# ----------------------------- adaptation speed ---------------------------------


class SpeedProtocol(KifsodModel):
    """Evaluation cadence and patience of the convergence rule.

    Attributes
    ----------
    eval_interval : int
        Iterations between evaluations. By default, 50.
    patience : int
        The run has converged once the best nAP goes unsurpassed for this many
        iterations; a positive multiple of `eval_interval`. By default, 300.
    max_budget : int
        Iteration budget of a measured run. By default, 3000.
    """

    eval_interval: int = Field(50, ge=1)
    patience: int = Field(300, ge=1)
    max_budget: int = Field(3000, ge=1)

    @model_validator(mode="after")
    def _validate_patience(self) -> Self:
        if self.patience % self.eval_interval:
            raise ValueError(
                f"patience ({self.patience}) must be a multiple of "
                f"eval_interval ({self.eval_interval})"
            )
        return self


class SpeedReport(KifsodModel):
    """Outcome of the convergence rule on an nAP curve.

    Attributes
    ----------
    curve : tuple[tuple[int, float], ...]
        `(iteration, nAP)` points consumed by the rule.
    best_nap : float
        Maximum nAP over `curve`.
    convergence_iteration : int
        Iteration of the best nAP.
    budget_exhausted : bool
        True when the rule never fired within the curve (or budget).
    protocol : SpeedProtocol
        The protocol the rule ran under.
    wall_clock_seconds : float | None
        Duration of the measured run, if any.  Ignored by equality.
    """

    curve: tuple[tuple[int, float], ...]
    best_nap: float
    convergence_iteration: int
    budget_exhausted: bool
    protocol: SpeedProtocol = Field(default_factory=SpeedProtocol)
    wall_clock_seconds: Optional[float] = None

    @model_validator(mode="after")
    def _validate_report(self) -> Self:
        iterations = [it for it, _ in self.curve]
        if self.convergence_iteration not in iterations:
            raise ValueError("convergence_iteration must appear in the curve")
        if self.best_nap != max(nap for _, nap in self.curve):
            raise ValueError("best_nap must be the maximum of the curve")
        return self

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SpeedReport):
            return False
        skip = {"wall_clock_seconds"}
        return self.model_dump(exclude=skip) == other.model_dump(exclude=skip)

    __hash__ = None  # type: ignore [assignment]


class ConvergenceMonitor:
    """Stateful form of the patience rule, fed one evaluation at a time.

    A point surpasses the best only when strictly greater.  The rule fires once
    `iteration - best_iteration >= patience`; later points are ignored.

    Parameters
    ----------
    protocol : SpeedProtocol
        Evaluation interval, patience and budget.
    """

    def __init__(self, protocol: Optional[SpeedProtocol] = None) -> None:
        self.protocol = protocol or SpeedProtocol()
        self.curve: list[tuple[int, float]] = []
        self.best_nap = float("-inf")
        self.best_iteration: Optional[int] = None
        self.converged = False

    def __repr__(self) -> str:
        return (
            f"ConvergenceMonitor(points={len(self.curve)}, "
            f"best={self.best_iteration}, converged={self.converged})"
        )

    @property
    def finished(self) -> bool:
        """True when the rule fired or the budget is used up."""
        return self.converged or bool(
            self.curve and self.curve[-1][0] >= self.protocol.max_budget
        )

    def update(self, iteration: int, nap: float) -> bool:
        """Record `(iteration, nap)`; return True when the run should stop."""
        if self.finished:
            return True
        if iteration % self.protocol.eval_interval:
            raise DataError(
                f"iteration {iteration} is not a multiple of the eval interval "
                f"{self.protocol.eval_interval}"
            )
        if self.curve and iteration <= self.curve[-1][0]:
            raise DataError(
                f"curve iterations must increase strictly ({iteration} after "
                f"{self.curve[-1][0]})"
            )
        self.curve.append((iteration, float(nap)))
        if nap > self.best_nap:
            self.best_nap, self.best_iteration = float(nap), iteration
        elif iteration - (self.best_iteration or 0) >= self.protocol.patience:
            self.converged = True
            logger.info(
                "converged: best nAP %.4f at iteration %d unsurpassed until %d",
                self.best_nap,
                self.best_iteration,
                iteration,
            )
        return self.finished

    def report(self, wall_clock_seconds: Optional[float] = None) -> SpeedReport:
        if not self.curve or self.best_iteration is None:
            raise DataError("cannot report on an empty curve")
        return SpeedReport(
            curve=tuple(self.curve),
            best_nap=self.best_nap,
            convergence_iteration=self.best_iteration,
            budget_exhausted=not self.converged,
            protocol=self.protocol,
            wall_clock_seconds=wall_clock_seconds,
        )


def detect_convergence(
    curve: Iterable[tuple[int, float]], protocol: Optional[SpeedProtocol] = None
) -> SpeedReport:
    """Apply the patience rule to a complete `(iteration, nAP)` curve.

    Points past the firing moment or past `protocol.max_budget` are not consumed,
    so appending points after the rule fires never changes the result.
    """
    monitor = ConvergenceMonitor(protocol)
    points = list(curve)
    if not points:
        raise DataError("cannot detect convergence on an empty curve")
    for iteration, nap in points:
        if iteration > monitor.protocol.max_budget or monitor.update(iteration, nap):
            break
    return monitor.report()


Launcher = Callable[[ConvergenceMonitor], Any]


def measure_adaptation_speed(
    launcher: Launcher, protocol: Optional[SpeedProtocol] = None
) -> SpeedReport:
    """Drive one training run under the convergence rule.

    Parameters
    ----------
    launcher : Callable[[ConvergenceMonitor], Any]
        Starts the run.  It must call `monitor.update(iteration, nAP)` every
        `eval_interval` iterations and stop as soon as `update` returns True.
    protocol : SpeedProtocol | None
        By default, `SpeedProtocol()`.
    """
    monitor = ConvergenceMonitor(protocol)
    start = time.perf_counter()
    launcher(monitor)
    elapsed = time.perf_counter() - start
    report = monitor.report(wall_clock_seconds=elapsed)
    logger.info(
        "adaptation speed: %d iterations (best nAP %.4f, %.1f s)",
        report.convergence_iteration,
        report.best_nap,
        elapsed,
    )
    return report


def transfer_launcher(
    detector: Detector,
    fewshot: FewShotSet,
    config: TransferConfig,
    evaluator: DetectionEvaluator,
    *,
    on_result: Optional[Callable[[TransferResult], Any]] = None,
) -> Launcher:
    """Adapt a few-shot transfer run to the launcher contract.

    The run is capped at the protocol budget and stops when the monitor fires.
    `on_result` receives the `TransferResult` of the run.
    """
    from kifsod._transfer import fewshot_transfer

    def launch(monitor: ConvergenceMonitor) -> TransferResult:
        if evaluator.interval != monitor.protocol.eval_interval:
            raise ConfigurationError(
                f"evaluator interval {evaluator.interval} differs from the protocol "
                f"eval_interval {monitor.protocol.eval_interval}"
            )
        budget = min(config.iterations, monitor.protocol.max_budget)
        result = fewshot_transfer(
            detector,
            fewshot,
            config.replace(iterations=budget),
            evaluator,
            stop_when=lambda it, rep: monitor.update(it, rep.nAP),
        )
        if on_result is not None:
            on_result(result)
        return result

    return launch


# ----------------------------- FLOPs ---------------------------------------------


class ConvLayer(FrozenModel):
    kind: Literal["conv"] = "conv"
    name: str
    kernel: int = Field(..., ge=1)
    in_ch: int = Field(..., ge=1)
    out_ch: int = Field(..., ge=1)
    stride: int = Field(1, ge=1)
    padding: int = Field(0, ge=0)


class LinearLayer(FrozenModel):
    kind: Literal["linear"] = "linear"
    name: str
    in_features: int = Field(..., ge=1)
    out_features: int = Field(..., ge=1)


class RoIStage(FrozenModel):
    """Marker after which every layer runs once per proposal."""

    kind: Literal["roi_stage"] = "roi_stage"
    name: str = "roi_stage"
    output_size: int = Field(..., ge=1)


AnyLayer = Annotated[Union[ConvLayer, LinearLayer, RoIStage], Field(discriminator="kind")]


class ArchDescriptor(KifsodModel):
    """Ordered layer list of a two-stage detector, for FLOPs accounting.

    Attributes
    ----------
    layers : tuple[ConvLayer | LinearLayer | RoIStage, ...]
        Layers in execution order, with exactly one `RoIStage` marker.
    input_size : tuple[int, int, int]
        `(H, W, C)` of the input image.
    proposal_cap_train, proposal_cap_infer : int
        Proposals per image in a training forward pass and at inference.
    """

    layers: tuple[AnyLayer, ...]
    input_size: tuple[int, int, int]
    proposal_cap_train: int = Field(64, ge=1)
    proposal_cap_infer: int = Field(64, ge=1)

    @model_validator(mode="after")
    def _validate_layers(self) -> Self:
        markers = [layer for layer in self.layers if isinstance(layer, RoIStage)]
        if len(markers) != 1:
            raise ValueError(
                f"exactly one roi_stage marker is required, found {len(markers)}"
            )
        if any(v < 1 for v in self.input_size):
            raise ValueError(f"invalid input_size {self.input_size}")
        return self

    def cap(self, phase: Union[Phase, str]) -> int:
        if Phase(phase) is Phase.TRAIN_FORWARD:
            return self.proposal_cap_train
        return self.proposal_cap_infer


class LayerFlops(FrozenModel):
    name: str
    flops: int


class FlopsReport(KifsodModel):
    """Analytic FLOPs of one forward pass.

    Attributes
    ----------
    phase : Phase
        Phase whose proposal cap was applied.
    total : int
        Sum of `layers`.
    layers : tuple[LayerFlops, ...]
        Per conv/linear layer counts, per-proposal layers already multiplied.
    proposal_cap : int
        Proposals per image of the phase.
    """

    phase: Phase
    total: int
    layers: tuple[LayerFlops, ...]
    proposal_cap: int

    @model_validator(mode="after")
    def _validate_total(self) -> Self:
        if self.total != sum(layer.flops for layer in self.layers):
            raise ValueError("total must equal the sum of the per-layer counts")
        return self


def _conv_output(size: int, layer: ConvLayer) -> int:
    out = (size + 2 * layer.padding - layer.kernel) // layer.stride + 1
    if out < 1:
        raise ConfigurationError(f"layer {layer.name!r} produces an empty output")
    return out


def estimate_flops(arch: ArchDescriptor, phase: Union[Phase, str]) -> FlopsReport:
    """Count multiply-adds (as 2 FLOPs) of conv and linear layers.

    A conv layer costs `2 * k^2 * C_in * C_out` per output element and a linear
    layer `2 * in * out`.  Layers after the RoI stage marker run once per proposal
    and are multiplied by the phase's proposal cap.  Activations, NMS and the
    RoI-align arithmetic are not counted.
    """
    phase = Phase(phase)
    cap = arch.cap(phase)
    h, w, _ = arch.input_size
    per_proposal = False
    rows: list[LayerFlops] = []
    for layer in arch.layers:
        if isinstance(layer, RoIStage):
            per_proposal = True
            h = w = layer.output_size
            continue
        if isinstance(layer, ConvLayer):
            h, w = _conv_output(h, layer), _conv_output(w, layer)
            flops = 2 * layer.kernel**2 * layer.in_ch * layer.out_ch * h * w
        else:
            flops = 2 * layer.in_features * layer.out_features
        rows.append(LayerFlops(name=layer.name, flops=flops * cap if per_proposal else flops))
    return FlopsReport(
        phase=phase,
        total=sum(r.flops for r in rows),
        layers=tuple(rows),
        proposal_cap=cap,
    )
