from __future__ import annotations

from typing import TYPE_CHECKING, Any, Union, overload

from pydantic import ValidationError

from kifsod._errors import ConfigurationError

if TYPE_CHECKING:
    from collections.abc import Iterable, Mapping

    from typing_extensions import TypeAlias

    from kifsod._transfer import TransferConfig

    PresetOrKwargs: TypeAlias = Union[dict[str, Any], TransferConfig]


_PRESET_REGISTRY: dict[str, PresetOrKwargs] = {
    "ptf": {
        "frozen": {"backbone"},
        "lr_scale": {"proposal": 1.0, "roi_head": 0.5, "base_learner": 1.0},
        "dropout_rate": 0.8,
    },
    "ptf_ki": {
        "lr_scale": {
            "backbone": 0.01,
            "proposal": 1.0,
            "roi_head": 0.5,
            "base_learner": 1.0,
        },
        "frozen_up_to_block": 1,
        "gradient_stop_rpn": True,
        "dropout_rate": 0.8,
    },
    "ptf_no_dropout": {
        "frozen": {"backbone"},
        "lr_scale": {"proposal": 1.0, "roi_head": 0.5, "base_learner": 1.0},
        "dropout_rate": 0.0,
    },
    "base_learner_only": {
        "frozen": {"backbone", "proposal", "roi_head"},
        "dropout_rate": 0.8,
    },
    "base_learner_rpn": {
        "frozen": {"backbone", "roi_head"},
        "dropout_rate": 0.8,
    },
    "full_finetune": {
        "lr_scale": {
            "backbone": 1.0,
            "proposal": 1.0,
            "roi_head": 1.0,
            "base_learner": 1.0,
        },
        "dropout_rate": 0.8,
    },
}


@overload
def register_transfer_presets(
    presets: Mapping[str, PresetOrKwargs],
    /,
    **kwargs: PresetOrKwargs,
) -> None: ...
@overload
def register_transfer_presets(
    presets: Iterable[tuple[str, PresetOrKwargs]],
    /,
    **kwargs: PresetOrKwargs,
) -> None: ...
@overload
def register_transfer_presets(**kwargs: PresetOrKwargs) -> None: ...
def register_transfer_presets(
    presets: Union[Mapping[str, PresetOrKwargs], Iterable[tuple[str, PresetOrKwargs]]] = (),
    /,
    **kwargs: PresetOrKwargs,
) -> None:
    """Register transfer presets to allow lookup by key.

    Added keys will override existing keys if they already exist.  Values may be
    `TransferConfig` instances or keyword dictionaries for `TransferConfig`.

    Examples
    --------
    >>> import kifsod
    >>> kifsod.register_transfer_presets(
    ...     {"ptf_slow": {"frozen": {"backbone"}, "global_lr": 0.005}}
    ... )
    """
    _PRESET_REGISTRY.update(presets, **kwargs)


def registered_preset_keys() -> set[str]:
    """Return a set of all registered transfer preset keys."""
    return set(_PRESET_REGISTRY)


def get_preset(name: str, **overrides: Any) -> TransferConfig:
    """Return preset `name` as a `TransferConfig`, with `overrides` applied.

    Raises
    ------
    ConfigurationError
        If `name` is not registered or the overrides are invalid.
    """
    from kifsod._transfer import TransferConfig

    try:
        preset = _PRESET_REGISTRY[name]
    except KeyError:
        raise ConfigurationError(
            f"unknown preset {name!r}; known: {sorted(_PRESET_REGISTRY)}"
        ) from None
    fields = preset.model_dump() if isinstance(preset, TransferConfig) else preset
    try:
        return TransferConfig.model_validate({**fields, **overrides})
    except ValidationError as e:
        raise ConfigurationError(f"invalid settings for preset {name!r}:\n{e}") from e


def preset_configs() -> dict[str, TransferConfig]:
    """Return every registered preset as a `TransferConfig`."""
    return {name: get_preset(name) for name in sorted(_PRESET_REGISTRY)}
