from __future__ import annotations

from abc import abstractmethod
from typing import TYPE_CHECKING, Protocol, Union, runtime_checkable

from typing_extensions import TypeAlias

if TYPE_CHECKING:
    from typing import Any, Callable

    from kifsod._detector import Detector
    from kifsod._evalkit import MetricReport


@runtime_checkable
class PEvaluator(Protocol):
    """Protocol of the evaluation callback invoked during few-shot transfer."""

    interval: int
    """Number of training iterations between two evaluations."""

    @abstractmethod
    def evaluate(self, detector: Detector, iteration: int) -> MetricReport:
        """Score `detector` after `iteration` steps.

        The detector is handed over in inference mode; implementations must not
        modify it.  Exceptions propagate out of the transfer run.
        """


@runtime_checkable
class PSignalInstance(Protocol):
    """The protocol that a signal instance must implement.

    In practice this will likely be a `psygnal.SignalInstance`.
    """

    def connect(self, slot: Callable) -> Any:
        """Connect slot to this signal."""

    def disconnect(self, slot: Callable | None = None) -> Any:
        """Disconnect slot from this signal.

        If `None`, all slots should be disconnected.
        """

    def emit(self, *args: Any) -> Any:
        """Emits the signal with the given arguments."""


@runtime_checkable
class PSignalDescriptor(Protocol):
    """Descriptor that returns a signal instance."""

    def __get__(self, instance: Any | None, owner: Any) -> PSignalInstance:
        """Returns the signal instance for this descriptor."""


PSignal: TypeAlias = Union[PSignalDescriptor, PSignalInstance]


@runtime_checkable
class PTransferSignaler(Protocol):
    """Declares the signals emitted by [`kifsod.TransferRunner`][]."""

    transferStarted: PSignal
    """Emits `(config: TransferConfig)` before the first evaluation or step."""
    stepFinished: PSignal
    """Emits `(iteration: int, L_rpn: float, L_cls: float, L_loc: float)` after each step."""  # noqa: E501
    evaluated: PSignal
    """Emits `(iteration: int, report: MetricReport)` after each evaluation."""
    transferCanceled: PSignal
    """Emits `(iteration: int)` when the run is canceled."""
    transferFinished: PSignal
    """Emits `(config: TransferConfig)` when the run ends, successful or not."""
