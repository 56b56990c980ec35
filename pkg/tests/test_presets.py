from __future__ import annotations

from collections.abc import Iterator

import pytest

from kifsod import (
    Component,
    ConfigurationError,
    TransferConfig,
    get_preset,
    preset_configs,
    register_transfer_presets,
    registered_preset_keys,
)
from kifsod._presets import _PRESET_REGISTRY


@pytest.fixture
def registry() -> Iterator[None]:
    saved = dict(_PRESET_REGISTRY)
    yield
    _PRESET_REGISTRY.clear()
    _PRESET_REGISTRY.update(saved)


def test_builtin_presets() -> None:
    assert {
        "ptf",
        "ptf_ki",
        "ptf_no_dropout",
        "base_learner_only",
        "base_learner_rpn",
        "full_finetune",
    } <= registered_preset_keys()

    configs = preset_configs()
    assert list(configs) == sorted(configs)
    assert all(isinstance(c, TransferConfig) for c in configs.values())

    ptf = configs["ptf"]
    assert ptf.frozen == {Component.BACKBONE}
    assert ptf.dropout_rate == 0.8
    assert not ptf.gradient_stop_rpn

    ki = configs["ptf_ki"]
    assert ki.frozen == frozenset()
    assert ki.frozen_up_to_block == 1
    assert ki.gradient_stop_rpn
    assert ki.effective_lr("backbone") == pytest.approx(0.01 * ki.global_lr)
    assert ki.effective_lr("roi_head") == pytest.approx(0.5 * ki.global_lr)

    assert configs["ptf_no_dropout"].dropout_rate == 0.0
    only = configs["base_learner_only"]
    assert [c for c in Component if only.effective_lr(c) > 0] == [Component.BASE_LEARNER]


def test_get_preset_overrides() -> None:
    config = get_preset("ptf", iterations=5, batch_mode="instance_level")
    assert config.iterations == 5
    assert str(config.batch_mode) == "instance_level"
    assert TransferConfig.from_preset("ptf", iterations=5) == get_preset("ptf", iterations=5)
    # presets are not shared instances
    assert get_preset("ptf") is not get_preset("ptf")


def test_get_preset_errors() -> None:
    with pytest.raises(ConfigurationError, match="unknown preset 'nope'"):
        get_preset("nope")
    with pytest.raises(ConfigurationError, match="invalid settings"):
        get_preset("ptf", dropout_rate=2.0)


@pytest.mark.usefixtures("registry")
def test_register_presets() -> None:
    register_transfer_presets(
        {"ptf_slow": {"frozen": {"backbone"}, "global_lr": 0.005}},
        ptf_fixed=TransferConfig(iterations=7, seed=3),
    )
    register_transfer_presets([("ptf_pair", {"iterations": 9})])
    assert {"ptf_slow", "ptf_fixed", "ptf_pair"} <= registered_preset_keys()
    assert get_preset("ptf_slow").global_lr == 0.005
    assert get_preset("ptf_fixed", seed=4) == TransferConfig(iterations=7, seed=4)
    assert get_preset("ptf_pair").iterations == 9

    # later registrations override earlier ones
    register_transfer_presets(ptf={"iterations": 1})
    assert get_preset("ptf").frozen == frozenset()


def test_registry_restored() -> None:
    assert "ptf_slow" not in registered_preset_keys()
    assert get_preset("ptf").frozen == {Component.BACKBONE}
