"""Command-line entry point: `kifsod {gen-data,pretrain,transfer,report,flops,speed}`."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from enum import Enum
from pathlib import Path
from typing import TYPE_CHECKING, Any, NoReturn, Optional

from pydantic import ValidationError

from kifsod._detector import (
    Detector,
    TrainConfig,
    describe_architecture,
    load_checkpoint,
    pretrain_base,
    save_checkpoint,
    write_loss_log,
)
from kifsod._efficiency import SpeedProtocol, detect_convergence, estimate_flops
from kifsod._errors import ConfigurationError, DataError, KifsodError, NumericalError
from kifsod._evalkit import evaluate_detector
from kifsod._experiment import (
    ExperimentManifest,
    PoolSizes,
    build_report,
    generate_benchmark,
    run_experiment,
)
from kifsod._presets import get_preset, registered_preset_keys
from kifsod._synthgen import DatasetSpec, load_pool
from kifsod._transfer import TransferConfig, read_curve
from kifsod._utils import InitMode, Phase

if TYPE_CHECKING:
    from collections.abc import Iterable, Sequence

    from pydantic import BaseModel

logger = logging.getLogger("kifsod")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> NoReturn:
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _output_root() -> Path:
    return Path(os.environ.get("KIFSOD_OUT", "."))


def _resolve(path: str | Path) -> Path:
    """Resolve a relative path against the output root (`KIFSOD_OUT`, else cwd)."""
    path = Path(path)
    return path if path.is_absolute() else _output_root() / path


def _seeds(value: str) -> tuple[int, ...]:
    try:
        return tuple(int(s) for s in value.split(",") if s.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid seed list {value!r}") from None


def _add_model_flags(
    parser: argparse.ArgumentParser, model: type[BaseModel], names: Iterable[str]
) -> None:
    """Add one optional flag per model field, spelled like the field name."""
    for name in names:
        info = model.model_fields[name]
        flags = [f"--{name.replace('_', '-')}"]
        if "_" in name:
            flags.append(f"--{name}")
        kwargs: dict[str, Any] = {
            "dest": name,
            "default": None,
            "help": f"{model.__name__}.{name} (default: {info.default})",
        }
        ann = info.annotation
        if ann is bool:
            kwargs["action"] = argparse.BooleanOptionalAction
        elif isinstance(ann, type) and issubclass(ann, Enum):
            kwargs["choices"] = [str(m) for m in ann]
        else:
            kwargs["type"] = ann
        parser.add_argument(*flags, **kwargs)


def _model_kwargs(args: argparse.Namespace, model: type[BaseModel]) -> dict[str, Any]:
    return {
        k: v for k, v in vars(args).items() if k in model.model_fields and v is not None
    }


def _load_model(model: type[Any], path: Optional[str], **overrides: Any) -> Any:
    base = model.from_file(_resolve(path)).model_dump() if path else {}
    return model.model_validate({**base, **overrides})


# ----------------------------- commands -----------------------------------------


def _cmd_gen_data(args: argparse.Namespace) -> int:
    out = _resolve(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise ConfigurationError(f"{out} is not empty; pass --force to overwrite")
    spec = _load_model(DatasetSpec, args.spec, **_model_kwargs(args, DatasetSpec))
    sizes = PoolSizes.model_validate(_model_kwargs(args, PoolSizes))
    manifest = generate_benchmark(
        spec, out, sizes, k=args.k, seeds=args.seeds, workers=args.workers
    )
    print(f"wrote benchmark with {len(manifest.classes)} classes to {out}")
    return EXIT_OK


def _cmd_pretrain(args: argparse.Namespace) -> int:
    data = _resolve(args.data)
    manifest, images = load_pool(data, "base_train")
    config = _load_model(TrainConfig, args.config, **_model_kwargs(args, TrainConfig))
    result = pretrain_base(images, config, base_ids=manifest.base_ids)

    out = _resolve(args.out)
    ckpt = save_checkpoint(
        result.detector, out / "base.ckpt", config=config.model_dump(mode="json")
    )
    write_loss_log(result.log, out / "losses.csv")
    config.save(out / "config.json")
    _, test_images = load_pool(data, "base_test")
    report = evaluate_detector(
        result.detector, test_images, manifest.spec.split, proposal_cap=args.infer_cap
    )
    report.save(out / "base_eval.json")
    print(f"held-out base AP50: {report.bAP:.6f}")
    print(f"wrote checkpoint {ckpt}")
    return EXIT_OK


def _cmd_transfer(args: argparse.Namespace) -> int:
    benchmark = _resolve(args.data)
    overrides = _model_kwargs(args, TransferConfig)
    config = (
        _load_model(TransferConfig, args.config, **overrides)
        if args.config
        else get_preset(args.preset, **overrides)
    )
    protocol = SpeedProtocol.model_validate(_model_kwargs(args, SpeedProtocol))
    episode = args.episode or str(benchmark / "episodes" / "seed{seed}")
    manifest = ExperimentManifest(
        benchmark=benchmark,
        checkpoint=_resolve(args.checkpoint),
        episode=str(_resolve(episode)),
        init=args.init,
        preset=args.preset if not args.config else Path(args.config).stem,
        config=config,
        protocol=protocol,
        seeds=args.seeds,
        output=_resolve(args.out or f"runs/{args.preset}_{args.init}"),
        views=args.views,
        proposal_cap_infer=args.infer_cap,
    )
    records = run_experiment(manifest, workers=args.workers or len(manifest.seeds))
    for r in records:
        ratio = f" ratio={r.ratio:.6f}" if r.ratio is not None else ""
        print(
            f"seed {r.seed}: nAP50={r.metrics.nAP:.4f} bAP50={r.metrics.bAP:.4f} "
            f"iterations={r.speed.convergence_iteration}{ratio}"
        )
    return EXIT_OK


def _cmd_report(args: argparse.Namespace) -> int:
    report = build_report([_resolve(p) for p in args.results], _resolve(args.out))
    print(report.summary(), end="")
    return EXIT_OK


def _cmd_flops(args: argparse.Namespace) -> int:
    if args.checkpoint:
        detector = load_checkpoint(_resolve(args.checkpoint)).detector
    else:
        spec = DatasetSpec()
        detector = Detector(spec.split.all_ids, novel_ids=spec.novel_class_ids)
    presets = args.presets or sorted(registered_preset_keys())
    print(f"{'preset':<18} {'train_forward':>16} {'inference':>16}")
    for name in presets:
        cap = get_preset(name).proposal_cap
        arch = describe_architecture(detector, cap, args.infer_cap)
        train = estimate_flops(arch, Phase.TRAIN_FORWARD).total
        infer = estimate_flops(arch, Phase.INFERENCE).total
        print(f"{name:<18} {train:>16d} {infer:>16d}")
    return EXIT_OK


def _cmd_speed(args: argparse.Namespace) -> int:
    protocol = SpeedProtocol.model_validate(_model_kwargs(args, SpeedProtocol))
    curve = read_curve(_resolve(args.curve))
    report = detect_convergence([(p.iteration, p.nAP50) for p in curve], protocol)
    if args.out:
        report.save(_resolve(args.out))
    print(
        f"convergence iteration {report.convergence_iteration} "
        f"(best nAP50 {report.best_nap:.4f}"
        f"{', budget exhausted' if report.budget_exhausted else ''})"
    )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="kifsod", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic benchmark")
    p.add_argument("--out", default="benchmark")
    p.add_argument("--spec", help="DatasetSpec JSON/YAML file")
    _add_model_flags(
        p,
        DatasetSpec,
        [
            "seed",
            "image_size",
            "max_gt_overlap_iou",
            "background_noise_std",
            "color_jitter",
            "max_placement_attempts",
        ],
    )
    _add_model_flags(p, PoolSizes, list(PoolSizes.model_fields))
    p.add_argument("--k", type=int, default=10, help="shots per class in each episode")
    p.add_argument("--seeds", type=_seeds, default=(0, 1, 2, 3, 4))
    p.add_argument("--workers", type=int)
    p.add_argument("--force", action="store_true", help="write into a non-empty --out")
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("pretrain", help="pretrain the detector on base classes")
    p.add_argument("--data", default="benchmark", help="benchmark root")
    p.add_argument("--out", default="pretrain")
    p.add_argument("--config", help="TrainConfig JSON/YAML file")
    p.add_argument("--infer-cap", "--infer_cap", dest="infer_cap", type=int, default=64)
    _add_model_flags(
        p,
        TrainConfig,
        [
            "base_lr",
            "batch_size",
            "iterations",
            "seed",
            "classifier_kind",
            "warmup_iterations",
            "proposal_cap",
            "log_interval",
        ],
    )
    p.set_defaults(func=_cmd_pretrain)

    p = sub.add_parser("transfer", help="few-shot transfer from a base checkpoint")
    p.add_argument("--checkpoint", default="pretrain/base.ckpt")
    p.add_argument("--data", default="benchmark", help="benchmark root")
    p.add_argument("--episode", help="episode directory, may contain '{seed}'")
    p.add_argument("--init", choices=[str(m) for m in InitMode], default="alr")
    p.add_argument("--preset", default="ptf_ki")
    p.add_argument("--config", help="TransferConfig JSON/YAML file (replaces --preset)")
    p.add_argument("--seeds", type=_seeds, default=(0,))
    p.add_argument("--views", type=int, default=10)
    p.add_argument("--infer-cap", "--infer_cap", dest="infer_cap", type=int, default=64)
    p.add_argument(
        "--workers", type=int, help="concurrent seeds (by default, one per seed)"
    )
    p.add_argument("--out")
    _add_model_flags(
        p,
        TransferConfig,
        [
            "global_lr",
            "dropout_rate",
            "gradient_stop_rpn",
            "proposal_cap_multiplier",
            "iterations",
            "batch_size",
            "batch_mode",
            "frozen_up_to_block",
            "log_interval",
        ],
    )
    _add_model_flags(p, SpeedProtocol, ["eval_interval", "patience", "max_budget"])
    p.set_defaults(func=_cmd_transfer)

    p = sub.add_parser("report", help="merge transfer results")
    p.add_argument("results", nargs="+", help="run directories or experiment roots")
    p.add_argument("--out", default="report")
    p.set_defaults(func=_cmd_report)

    p = sub.add_parser("flops", help="estimate FLOPs per preset")
    p.add_argument("--checkpoint")
    p.add_argument("--presets", nargs="*")
    p.add_argument("--infer-cap", "--infer_cap", dest="infer_cap", type=int, default=64)
    p.set_defaults(func=_cmd_flops)

    p = sub.add_parser("speed", help="apply the convergence rule to a curve CSV")
    p.add_argument("curve")
    p.add_argument("--out", help="write the SpeedReport JSON here")
    _add_model_flags(p, SpeedProtocol, ["eval_interval", "patience", "max_budget"])
    p.set_defaults(func=_cmd_speed)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Run the CLI and return its exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s: %(message)s",
    )
    try:
        return int(args.func(args))
    except NumericalError as e:
        logger.error("numerical failure: %s", e)
        return EXIT_NUMERICAL
    except (DataError, FileNotFoundError) as e:
        logger.error("data error: %s", e)
        return EXIT_DATA
    except (ConfigurationError, ValidationError, KifsodError) as e:
        logger.error("configuration error: %s", e)
        return EXIT_USAGE
