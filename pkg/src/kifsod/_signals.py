from __future__ import annotations

from typing import TYPE_CHECKING

from psygnal import Signal, SignalGroup

if TYPE_CHECKING:
    from kifsod.protocols import PSignal


class TransferSignaler(SignalGroup):
    """Psygnal-backed signal-emitter for the signals emitted by the transfer runner."""

    transferStarted: PSignal = Signal(object)
    stepFinished: PSignal = Signal(int, float, float, float)
    evaluated: PSignal = Signal(int, object)
    transferCanceled: PSignal = Signal(int)
    transferFinished: PSignal = Signal(object)
