"""Benchmark generation, per-seed transfer runs and consolidated reports."""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from statistics import median
from typing import TYPE_CHECKING, Optional, Union

from pydantic import Field, field_validator

from kifsod._base_model import FrozenModel, KifsodModel
from kifsod._detector import (
    classifier_rows,
    describe_architecture,
    extract_instance_features,
    load_checkpoint,
    save_checkpoint,
    write_loss_log,
)
from kifsod._efficiency import (
    SpeedProtocol,
    SpeedReport,
    estimate_flops,
    measure_adaptation_speed,
    transfer_launcher,
)
from kifsod._errors import DataError
from kifsod._evalkit import DetectionEvaluator, MetricReport, evaluate_detector
from kifsod._ki_init import (
    LengthStats,
    dump_embeddings,
    hypersphere_stats,
    inherit_centroids,
    install_centroids,
)
from kifsod._synthgen import (
    MANIFEST,
    DatasetManifest,
    DatasetSpec,
    build_fewshot_set,
    generate_dataset,
    load_fewshot,
    load_pool,
    save_dataset,
    save_fewshot,
)
from kifsod._transfer import (
    TransferConfig,
    TransferResult,
    extend_classifier,
    read_curve,
    write_curve,
)
from kifsod._utils import InitMode, Phase

if TYPE_CHECKING:
    from collections.abc import Iterable, Sequence

    from kifsod._synthgen import AnnotatedImage

__all__ = [
    "ExperimentManifest",
    "ExperimentReport",
    "PoolSizes",
    "ReportRow",
    "RunRecord",
    "build_report",
    "generate_benchmark",
    "run_experiment",
    "run_seed",
]

logger = logging.getLogger(__name__)

RESULT = "result.json"


class PoolSizes(FrozenModel):
    """Number of images in each benchmark pool."""

    base_train: int = Field(400, ge=1)
    base_test: int = Field(100, ge=1)
    novel_train: int = Field(100, ge=1)
    test: int = Field(200, ge=1)


def generate_benchmark(
    spec: DatasetSpec,
    path: Union[str, Path],
    sizes: Optional[PoolSizes] = None,
    *,
    k: int = 10,
    seeds: Iterable[int] = (0,),
    workers: Optional[int] = None,
) -> DatasetManifest:
    """Write a complete benchmark under `path`.

    The pools `base_train` and `base_test` hold base classes only, `novel_train`
    novel classes only and `test` every class.  Image ids run on across the pools
    so no image appears twice.  One K-shot episode is drawn per seed from
    `novel_train` and `base_train` and written to `episodes/seed{seed}`.  The root
    `manifest.json` maps pool names to their directories.
    """
    path = Path(path)
    sizes = sizes or PoolSizes()
    split = spec.split
    filters = {
        "base_train": split.base_ids,
        "base_test": split.base_ids,
        "novel_train": split.novel_ids,
        "test": split.all_ids,
    }
    pools: dict[str, str] = {}
    images: dict[str, list[AnnotatedImage]] = {}
    start = 0
    for name, class_filter in filters.items():
        count = getattr(sizes, name)
        images[name] = generate_dataset(
            spec, count, class_filter, start_index=start, workers=workers
        )
        start += count
        save_dataset(path / name, spec, images[name], name)
        pools[name] = name
        logger.info("wrote pool %s (%d images)", name, count)

    for seed in seeds:
        fewshot = build_fewshot_set(images["novel_train"], images["base_train"], k, seed)
        rel = f"episodes/seed{seed}"
        save_fewshot(path / rel, spec, fewshot)
        pools[f"episode_seed{seed}"] = rel
    manifest = DatasetManifest.for_spec(spec, "benchmark", pools=pools, k=k)
    manifest.save(path / MANIFEST)
    return manifest


class ExperimentManifest(KifsodModel):
    """Inputs and settings of a multi-seed transfer experiment.

    Attributes
    ----------
    benchmark : Path
        Benchmark root written by `generate_benchmark` (its `test` pool is used).
    checkpoint : Path
        Base-pretrained checkpoint.
    episode : str
        Episode directory; `{seed}` is replaced by each seed.
    init : InitMode
        Novel-row initializer.
    preset : str
        Name the transfer config was resolved from.
    config : TransferConfig
        Resolved transfer config; its seed is replaced by each run's seed.
    protocol : SpeedProtocol
        Convergence-rule settings.
    seeds : tuple[int, ...]
        One run per seed.
    output : Path
        Root of the per-seed result directories.
    views : int
        Augmented views per few-shot instance for feature extraction.
    proposal_cap_infer : int
        Post-NMS proposal cap at evaluation.
    """

    benchmark: Path
    checkpoint: Path
    episode: str
    init: InitMode = InitMode.ALR
    preset: str = "ptf_ki"
    config: TransferConfig = Field(default_factory=TransferConfig)
    protocol: SpeedProtocol = Field(default_factory=SpeedProtocol)
    seeds: tuple[int, ...] = Field((0,), min_length=1)
    output: Path = Path("runs")
    views: int = Field(10, ge=1)
    proposal_cap_infer: int = Field(64, ge=1)

    @field_validator("seeds", mode="after")
    def _unique_seeds(cls, v: tuple[int, ...]) -> tuple[int, ...]:
        if len(set(v)) != len(v):
            raise ValueError(f"seeds must be unique, got {v}")
        return v

    def episode_path(self, seed: int) -> Path:
        return Path(self.episode.format(seed=seed))

    def run_dir(self, seed: int) -> Path:
        return self.output / f"seed{seed}"

    def check_paths(self) -> None:
        """Raise `DataError` if a referenced path does not exist."""
        paths = [self.benchmark, self.checkpoint]
        paths += [self.episode_path(s) for s in self.seeds]
        if missing := [str(p) for p in paths if not p.exists()]:
            raise DataError(f"missing experiment inputs: {missing}")


class RunRecord(KifsodModel):
    """Self-describing summary of one transfer run (`result.json`)."""

    benchmark: DatasetSpec
    checkpoint: str
    episode: str
    init: InitMode
    preset: str
    seed: int
    ratio: Optional[float] = None
    config: TransferConfig
    speed: SpeedReport
    metrics: MetricReport
    hypersphere: LengthStats
    flops_train: int
    flops_infer: int
    iterations_run: int


def _save_described(model: KifsodModel, config: TransferConfig, path: Path) -> Path:
    """Write `model` as JSON with the resolved transfer config under `"config"`."""
    data = {"config": config.model_dump(mode="json"), **model.model_dump(mode="json")}
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2))
    return path


def run_seed(
    manifest: ExperimentManifest,
    seed: int,
    test_images: Sequence[AnnotatedImage],
) -> RunRecord:
    """Extend, initialize and transfer the checkpoint on the episode of `seed`.

    Writes `result.json`, `config.json`, `speed.json` and `metrics.json` (both
    carrying the resolved config),
    `curve.csv`, `losses.csv`, `embeddings.csv`, `centroids.json` (unless the
    initializer is random) and `final.ckpt` into `manifest.run_dir(seed)`.
    """
    out = manifest.run_dir(seed)
    detector = load_checkpoint(manifest.checkpoint).detector
    episode, fewshot = load_fewshot(manifest.episode_path(seed))
    split = episode.spec.split
    if detector.novel_ids or set(detector.class_ids) != set(split.base_ids):
        raise DataError(
            f"checkpoint classes {detector.class_ids} do not match the benchmark "
            f"base classes {split.base_ids}"
        )

    extended = extend_classifier(detector, split.novel_ids, seed=seed)
    ratio = None
    if manifest.init is not InitMode.RANDOM:
        centroids = inherit_centroids(
            extended, fewshot, manifest.init, views=manifest.views, seed=seed
        )
        extended = install_centroids(extended, centroids, seed=seed)
        centroids.save(out / "centroids.json")
        ratio = centroids.ratio

    features = [
        f
        for image in fewshot.images
        for f in extract_instance_features(detector, image, manifest.views, seed)
    ]
    base_rows = classifier_rows(detector)
    stats = hypersphere_stats([f for f in features if f[0] in base_rows], base_rows)
    dump_embeddings(features, classifier_rows(extended), out / "embeddings.csv")

    config = manifest.config.replace(seed=seed)
    evaluator = DetectionEvaluator(
        test_images,
        split,
        interval=manifest.protocol.eval_interval,
        proposal_cap=manifest.proposal_cap_infer,
    )
    results: list[TransferResult] = []
    launcher = transfer_launcher(
        extended, fewshot, config, evaluator, on_result=results.append
    )
    speed = measure_adaptation_speed(launcher, manifest.protocol)
    result = results[0]
    metrics = evaluate_detector(
        result.detector,
        test_images,
        split,
        proposal_cap=manifest.proposal_cap_infer,
        ar_class_ids=split.novel_ids,
    )
    arch = describe_architecture(
        result.detector, config.proposal_cap, manifest.proposal_cap_infer
    )

    record = RunRecord(
        benchmark=episode.spec,
        checkpoint=str(manifest.checkpoint),
        episode=str(manifest.episode_path(seed)),
        init=manifest.init,
        preset=manifest.preset,
        seed=seed,
        ratio=ratio,
        config=config,
        speed=speed,
        metrics=metrics,
        hypersphere=stats,
        flops_train=estimate_flops(arch, Phase.TRAIN_FORWARD).total,
        flops_infer=estimate_flops(arch, Phase.INFERENCE).total,
        iterations_run=result.iterations_run,
    )
    config.save(out / "config.json")
    _save_described(speed, config, out / "speed.json")
    _save_described(metrics, config, out / "metrics.json")
    write_curve(result.curve, out / "curve.csv")
    write_loss_log(result.losses, out / "losses.csv")
    save_checkpoint(
        result.detector, out / "final.ckpt", config=config.model_dump(mode="json")
    )
    record.save(out / RESULT)
    logger.info(
        "seed %d: nAP50=%.4f bAP50=%.4f converged at %d",
        seed,
        metrics.nAP,
        metrics.bAP,
        speed.convergence_iteration,
    )
    return record


def run_experiment(
    manifest: ExperimentManifest, *, workers: Optional[int] = None
) -> list[RunRecord]:
    """Run every seed of `manifest`, concurrently when `workers > 1`.

    Runs share no mutable state, so the records do not depend on `workers`.
    """
    manifest.check_paths()
    _, test_images = load_pool(manifest.benchmark, "test")
    manifest.save(manifest.output / "experiment.json")

    def _run(seed: int) -> RunRecord:
        return run_seed(manifest, seed, test_images)

    if workers is not None and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_run, manifest.seeds))
    return [_run(seed) for seed in manifest.seeds]


# ----------------------------- reporting ---------------------------------------


class ReportRow(FrozenModel):
    run: str
    preset: str
    init: InitMode
    seed: int
    bAP50: float
    nAP50: float
    best_nap: float
    convergence_iteration: int
    flops_train: int
    flops_infer: int
    ratio: Optional[float] = None
    feature_length_mean: float
    feature_length_std: float
    centroid_length_mean: float
    centroid_length_std: float


class ExperimentReport(KifsodModel):
    """Consolidated comparison of transfer runs on one benchmark."""

    benchmark: DatasetSpec
    rows: tuple[ReportRow, ...]

    def summary(self) -> str:
        """Human-readable medians per (preset, init) group and the length table."""
        groups: dict[tuple[str, str], list[ReportRow]] = {}
        for row in self.rows:
            groups.setdefault((row.preset, str(row.init)), []).append(row)
        lines = [
            f"{'preset':<18} {'init':<10} {'runs':>4} {'nAP50':>7} {'bAP50':>7} "
            f"{'iters':>6} {'GFLOPs(train)':>14}"
        ]
        for (preset, init), rows in sorted(groups.items()):
            lines.append(
                f"{preset:<18} {init:<10} {len(rows):>4} "
                f"{median(r.nAP50 for r in rows):>7.4f} "
                f"{median(r.bAP50 for r in rows):>7.4f} "
                f"{median(r.convergence_iteration for r in rows):>6.0f} "
                f"{rows[0].flops_train / 1e9:>14.4f}"
            )
        lines += ["", "feature / classifier-row lengths (base classes)"]
        lines.append(f"{'run':<32} {'feature':>16} {'centroid':>16}")
        for row in self.rows:
            lines.append(
                f"{row.run:<32} "
                f"{row.feature_length_mean:>8.3f}±{row.feature_length_std:<7.3f} "
                f"{row.centroid_length_mean:>8.3f}±{row.centroid_length_std:<7.3f}"
            )
        return "\n".join(lines) + "\n"


def _result_files(path: Path) -> list[Path]:
    if (path / RESULT).is_file():
        return [path / RESULT]
    return sorted(path.glob(f"*/{RESULT}"))


def build_report(
    result_dirs: Iterable[Union[str, Path]], out: Union[str, Path]
) -> ExperimentReport:
    """Merge run results into `report.json`, `report.csv`, `report.txt` and `curves.csv`.

    Each entry of `result_dirs` is a run directory or a directory of runs.

    Raises
    ------
    DataError
        If no result is found or the runs come from different benchmarks.
    """
    out = Path(out)
    files = [f for d in result_dirs for f in _result_files(Path(d))]
    if not files:
        raise DataError("no run results found")
    records = [(f.parent, RunRecord.from_file(f)) for f in files]
    benchmark = records[0][1].benchmark
    if any(r.benchmark != benchmark for _, r in records):
        raise DataError("cannot report on runs from different benchmarks")

    rows = []
    curves: list[tuple[str, int, float, float]] = []
    for run_dir, r in records:
        label = f"{r.preset}/{r.init}/seed{r.seed}"
        h = r.hypersphere
        rows.append(
            ReportRow(
                run=label,
                preset=r.preset,
                init=r.init,
                seed=r.seed,
                bAP50=r.metrics.bAP,
                nAP50=r.metrics.nAP,
                best_nap=r.speed.best_nap,
                convergence_iteration=r.speed.convergence_iteration,
                flops_train=r.flops_train,
                flops_infer=r.flops_infer,
                ratio=r.ratio,
                feature_length_mean=h.feature_length_mean,
                feature_length_std=h.feature_length_std,
                centroid_length_mean=h.centroid_length_mean,
                centroid_length_std=h.centroid_length_std,
            )
        )
        if (run_dir / "curve.csv").is_file():
            curves.extend((label, *p) for p in read_curve(run_dir / "curve.csv"))

    report = ExperimentReport(benchmark=benchmark, rows=tuple(rows))
    report.save(out / "report.json")
    fields = list(ReportRow.model_fields)
    with (out / "report.csv").open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow(row.model_dump(mode="json"))
    with (out / "curves.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["run", "iteration", "bAP50", "nAP50"])
        writer.writerows(curves)
    (out / "report.txt").write_text(report.summary())
    return report
