"""Run-directory orchestration behind the command-line surface.

Every command operates on one run directory: a folder holding the
resolved config snapshot plus whatever artifacts have been produced so
far (checkpoints, index, calibration, heatmaps, reports). Stages check
for the artifacts they depend on and name the exact missing path when
a prerequisite has not been run yet.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np
import yaml

from .anomaly_map import (
    AnomalyMapConfig,
    MapCalibration,
    feature_map,
    fuse,
    latent_map,
    save_heatmap,
    save_map_raw,
    save_overlay,
    score_threshold,
)
from .conditioning import (
    build_bins,
    build_feature_index,
    load_index,
    save_index,
    training_mean_distances,
)
from .config import RunConfig, save_config
from .data import (
    Dataset,
    SyntheticSpec,
    generate_synthetic,
    load_dataset,
    load_image,
    resize_image,
)
from .diffusion import GuidanceConfig, make_linear_schedule
from .domain_adapt import DomainAdaptConfig, finetune_extractor
from .errors import ArtifactMissingError, ConfigError
from .metrics import CategoryReport, EvalReport, evaluate_category
from .nets import (
    Denoiser,
    IdentityCodec,
    LearnedCodec,
    PooledCodec,
    TrainConfig,
    init_backbone,
    load_backbone,
    train_codec,
    train_denoiser,
)
from .reconstruction import Pipeline

logger = logging.getLogger(__name__)

CONFIG_NAME = "config.yaml"
DENOISER_NAME = "denoiser.ckpt"
CODEC_NAME = "codec.ckpt"
BACKBONE_NAME = "backbone.ckpt"
ADAPTED_BACKBONE_NAME = "backbone_adapted.ckpt"
INDEX_NAME = "index.bin"
CALIBRATION_NAME = "calibration.yaml"
REPORT_NAME = "report.txt"
TABLE_NAME = "report_table.txt"
BENCH_NAME = "bench.txt"
SCORES_NAME = "scores.txt"
HEATMAP_DIR = "heatmaps"
ABLATION_DIR = "ablations"


def prepare_run_dir(run_dir: str | Path, cfg: RunConfig) -> Path:
    """Create the run directory and write the resolved config snapshot."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    save_config(run_dir / CONFIG_NAME, cfg)
    return run_dir


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise ArtifactMissingError(str(path), hint)
    return path


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def _drop_stale_calibration(run_dir: Path) -> None:
    # calibration depends on every upstream artifact; recompute after changes
    path = run_dir / CALIBRATION_NAME
    if path.exists():
        path.unlink()


def load_run_dataset(cfg: RunConfig) -> Dataset:
    if cfg.data.source == "synthetic":
        spec = SyntheticSpec(
            image_size=cfg.data.resolution,
            seed=cfg.seed,
            num_train=cfg.data.num_train,
            num_test_nominal=cfg.data.num_test_nominal,
            num_test_per_kind=cfg.data.num_test_per_kind,
        )
        return generate_synthetic(spec)
    return load_dataset(cfg.data.root, cfg.data.category, resolution=cfg.data.resolution)


def codec_for(cfg: RunConfig, run_dir: Path):
    kind = cfg.codec.kind
    if kind == "identity":
        return IdentityCodec(channels=3)
    if kind == "pooled":
        return PooledCodec(factor=cfg.codec.factor, channels=3)
    path = _require(run_dir / CODEC_NAME, "run `dicad train-codec` first")
    return LearnedCodec.load(path)


def schedule_for(cfg: RunConfig):
    return make_linear_schedule(
        cfg.schedule.beta_start, cfg.schedule.beta_end, cfg.schedule.total_steps
    )


def map_config_for(cfg: RunConfig) -> AnomalyMapConfig:
    return AnomalyMapConfig(
        latent_weight=cfg.maps.latent_weight,
        smoothing_sigma=cfg.maps.smoothing_sigma,
        blocks=cfg.maps.blocks,
        normalization=cfg.maps.normalization,
    )


def _image_rng(cfg: RunConfig, index: int, stream: int = 0) -> np.random.Generator | None:
    """Per-image generator so stochastic scoring is order-independent."""
    if cfg.sampling.omega > 0.0 or cfg.sampling.sigma > 0.0:
        return np.random.default_rng((cfg.seed, stream, index))
    return None


def run_train(cfg: RunConfig, run_dir: Path) -> Path:
    """Train the latent denoiser on the nominal training images."""
    dataset = load_run_dataset(cfg)
    codec = codec_for(cfg, run_dir)
    schedule = schedule_for(cfg)
    train_cfg = TrainConfig(
        epochs=cfg.denoiser.epochs,
        batch_size=cfg.denoiser.batch_size,
        learning_rate=cfg.denoiser.learning_rate,
        weight_decay=cfg.denoiser.weight_decay,
        clip_norm=cfg.denoiser.clip_norm,
        seed=cfg.seed,
    )
    model = train_denoiser(
        [s.image for s in dataset.train],
        codec,
        schedule,
        train_cfg,
        base_channels=cfg.denoiser.base_channels,
        channel_mults=cfg.denoiser.channel_mults,
        time_dim=cfg.denoiser.time_dim,
    )
    path = run_dir / DENOISER_NAME
    model.save(path)
    _drop_stale_calibration(run_dir)
    logger.info("denoiser saved to %s", path)
    return path


def run_train_codec(cfg: RunConfig, run_dir: Path) -> Path:
    """Train the learned autoencoder codec (codec.kind must be 'learned')."""
    if cfg.codec.kind != "learned":
        raise ConfigError(
            f"train-codec applies only to codec.kind 'learned', got {cfg.codec.kind!r}"
        )
    dataset = load_run_dataset(cfg)
    train_cfg = TrainConfig(
        epochs=cfg.codec.epochs,
        batch_size=cfg.codec.batch_size,
        learning_rate=cfg.codec.learning_rate,
        seed=cfg.seed,
    )
    codec = train_codec(
        [s.image for s in dataset.train],
        train_cfg,
        factor=cfg.codec.factor,
        latent_channels=cfg.codec.latent_channels,
        hidden=cfg.codec.hidden,
    )
    path = run_dir / CODEC_NAME
    codec.save(path)
    _drop_stale_calibration(run_dir)
    logger.info("codec saved to %s", path)
    return path


def load_extractor(cfg: RunConfig, run_dir: Path, prefer_adapted: bool = True):
    """The run's extractor: adapted if present, else pretrained (created lazily)."""
    adapted = run_dir / ADAPTED_BACKBONE_NAME
    if prefer_adapted and adapted.exists():
        return load_backbone(adapted)
    pretrained = run_dir / BACKBONE_NAME
    if pretrained.exists():
        return load_backbone(pretrained)
    extractor = init_backbone(
        seed=cfg.extractor.seed, in_channels=3, widths=cfg.extractor.widths
    )
    extractor.save(pretrained)
    logger.info("initialized extractor at %s", pretrained)
    return extractor


def _build_index(cfg: RunConfig, extractor, dataset: Dataset):
    index = build_feature_index(
        [s.image for s in dataset.train],
        extractor,
        block=cfg.depth.block,
        num_neighbors=cfg.depth.num_neighbors,
    )
    table = build_bins(
        training_mean_distances(index),
        num_bins=cfg.depth.num_bins,
        t_max=cfg.depth.t_max,
        min_bin=cfg.depth.min_bin,
    )
    return index, table


def run_build_index(cfg: RunConfig, run_dir: Path) -> Path:
    """Index nominal features and derive the severity bin table."""
    dataset = load_run_dataset(cfg)
    extractor = load_extractor(cfg, run_dir)
    index, table = _build_index(cfg, extractor, dataset)
    path = run_dir / INDEX_NAME
    save_index(path, index, table)
    _drop_stale_calibration(run_dir)
    logger.info("index with %d vectors saved to %s", index.vectors.shape[0], path)
    return path


def build_pipeline(
    cfg: RunConfig, run_dir: Path, prefer_adapted: bool = True
) -> Pipeline:
    """Assemble the inference pipeline from the run's artifacts."""
    denoiser = Denoiser.load(_require(run_dir / DENOISER_NAME, "run `dicad train` first"))
    codec = codec_for(cfg, run_dir)
    extractor = load_extractor(cfg, run_dir, prefer_adapted=prefer_adapted)
    index, table = load_index(
        _require(run_dir / INDEX_NAME, "run `dicad build-index` first")
    )
    expected_dim = cfg.extractor.widths[cfg.depth.block - 1]
    if index.vectors.shape[1] != expected_dim:
        raise ConfigError(
            f"index dimension {index.vectors.shape[1]} does not match extractor "
            f"block {cfg.depth.block} width {expected_dim}; rebuild the index"
        )
    return Pipeline(
        denoiser=denoiser,
        codec=codec,
        extractor=extractor,
        index=index,
        table=table,
        schedule=schedule_for(cfg),
        guidance=GuidanceConfig(eta=cfg.sampling.eta, sigma=cfg.sampling.sigma),
        omega=cfg.sampling.omega,
        num_steps=cfg.sampling.steps,
        block=cfg.depth.block,
        round_multiple=cfg.depth.round_multiple,
    )


def run_finetune(cfg: RunConfig, run_dir: Path) -> Path:
    """Adapt the extractor on nominal reconstruction pairs, then reindex."""
    dataset = load_run_dataset(cfg)
    pipeline = build_pipeline(cfg, run_dir, prefer_adapted=False)
    # align every stage of the extractor, not just the blocks read later
    blocks = tuple(range(1, len(cfg.extractor.widths) + 1))
    adapt_cfg = DomainAdaptConfig(
        epochs=cfg.adapt.epochs,
        blocks=blocks,
        learning_rate=cfg.adapt.learning_rate,
        batch_size=cfg.adapt.batch_size,
        seed=cfg.seed,
    )
    rng = _image_rng(cfg, 0)
    adapted = finetune_extractor(
        pipeline.extractor, [s.image for s in dataset.train], pipeline, adapt_cfg, rng=rng
    )
    path = run_dir / ADAPTED_BACKBONE_NAME
    adapted.save(path)
    logger.info("adapted extractor saved to %s", path)
    if cfg.adapt.rebuild_index:
        index, table = _build_index(cfg, adapted, dataset)
        save_index(run_dir / INDEX_NAME, index, table)
        logger.info("index rebuilt with the adapted extractor")
    _drop_stale_calibration(run_dir)
    return path


# ---------------------------------------------------------------------------
# scoring helpers shared by infer/evaluate/ablate/bench


def _score_one(pipeline, image, map_cfg, calibration, rng, static_depth=None):
    if static_depth is None:
        rec = pipeline.reconstruct(image, rng=rng)
    else:
        rec = pipeline.reconstruct_static(image, static_depth, rng=rng)
    f_plane = feature_map(image, rec.image, pipeline.extractor, map_cfg.blocks)
    l_plane = latent_map(rec.input_latent, rec.latent, image_size=image.shape[-2:])
    return fuse(f_plane, l_plane, map_cfg, calibration=calibration, depth=rec.depth)


def _map_workers(fn, count: int, workers: int) -> list:
    if workers <= 1:
        return [fn(i) for i in range(count)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, range(count)))


def _compute_calibration(cfg: RunConfig, pipeline, train_images) -> dict:
    count = min(cfg.eval.calibration_count, len(train_images))
    images = train_images[:count]
    f_planes, l_planes = [], []
    for i, image in enumerate(images):
        # calibration images come from the training set, hence exclude_self
        rec = pipeline.reconstruct(
            image, rng=_image_rng(cfg, i, stream=1), exclude_self=True
        )
        f_planes.append(feature_map(image, rec.image, pipeline.extractor, cfg.maps.blocks))
        l_planes.append(latent_map(rec.input_latent, rec.latent, image_size=image.shape[-2:]))
    calibration = MapCalibration(
        feature_max=float(max(float(np.max(p)) for p in f_planes)),
        latent_max=float(max(float(np.max(p)) for p in l_planes)),
    )
    map_cfg = map_config_for(cfg)
    image_scores, pixel_pools = [], []
    for f_plane, l_plane in zip(f_planes, l_planes):
        res = fuse(f_plane, l_plane, map_cfg, calibration=calibration)
        image_scores.append(res.image_score)
        pixel_pools.append(res.fused_map.ravel())
    return {
        "feature_max": calibration.feature_max,
        "latent_max": calibration.latent_max,
        "image_threshold": score_threshold(image_scores, cfg.eval.threshold_fpr),
        "pixel_threshold": score_threshold(
            np.concatenate(pixel_pools), cfg.eval.threshold_fpr
        ),
        "num_images": count,
    }


def ensure_calibration(
    cfg: RunConfig, run_dir: Path, pipeline, train_images
) -> dict:
    """Load the calibration record, computing and caching it if absent."""
    path = run_dir / CALIBRATION_NAME
    if path.exists():
        record = yaml.safe_load(path.read_text())
        if not isinstance(record, dict) or "feature_max" not in record:
            raise ConfigError(f"calibration file {path} is malformed; delete it")
        return record
    record = _compute_calibration(cfg, pipeline, train_images)
    _write_text(path, yaml.safe_dump(record, sort_keys=False))
    logger.info("calibration written to %s", path)
    return record


def _calibration_from_record(record: dict) -> MapCalibration:
    return MapCalibration(
        feature_max=float(record["feature_max"]),
        latent_max=float(record["latent_max"]),
    )


def _save_map_artifacts(run_dir: Path, name: str, image, result) -> None:
    heat_dir = run_dir / HEATMAP_DIR
    save_heatmap(heat_dir / f"{name}_heat.png", result.fused_map)
    save_map_raw(heat_dir / f"{name}_map.amap", result.fused_map)
    save_overlay(heat_dir / f"{name}_overlay.png", image, result.fused_map)


def run_infer(
    cfg: RunConfig, run_dir: Path, inputs: list[str | Path], workers: int = 1
) -> list[dict]:
    """Score arbitrary image files and write their map artifacts."""
    if not inputs:
        raise ConfigError("infer needs at least one input image path")
    pipeline = build_pipeline(cfg, run_dir)
    train_images = [s.image for s in load_run_dataset(cfg).train]
    record = ensure_calibration(cfg, run_dir, pipeline, train_images)
    calibration = _calibration_from_record(record)
    map_cfg = map_config_for(cfg)
    size = (cfg.data.resolution, cfg.data.resolution)

    def work(i: int) -> dict:
        path = Path(inputs[i])
        image = load_image(path)
        if image.shape[1:] != size:
            image = resize_image(image, size)
        result = _score_one(pipeline, image, map_cfg, calibration, _image_rng(cfg, i))
        _save_map_artifacts(run_dir, path.stem, image, result)
        return {
            "name": path.stem,
            "score": result.image_score,
            "depth": result.depth,
            "anomalous": bool(result.image_score > record["image_threshold"]),
        }

    rows = _map_workers(work, len(inputs), workers)
    lines = [
        f"{r['name']} score={r['score']:.6f} depth={r['depth']} anomalous={int(r['anomalous'])}"
        for r in rows
    ]
    _write_text(run_dir / SCORES_NAME, "\n".join(lines) + "\n")
    return rows


def _evaluate_samples(
    cfg: RunConfig,
    pipeline,
    samples,
    map_cfg,
    calibration,
    category: str,
    workers: int = 1,
    static_depth=None,
    artifact_root: Path | None = None,
) -> CategoryReport:
    def work(i: int):
        sample = samples[i]
        result = _score_one(
            pipeline, sample.image, map_cfg, calibration, _image_rng(cfg, i),
            static_depth=static_depth,
        )
        if artifact_root is not None:
            _save_map_artifacts(artifact_root, sample.name, sample.image, result)
        return result

    results = _map_workers(work, len(samples), workers)
    return evaluate_category(
        category,
        np.array([r.image_score for r in results], dtype=np.float64),
        np.array([s.label for s in samples], dtype=np.int64),
        [r.fused_map for r in results],
        [s.mask for s in samples],
        fpr_limit=cfg.eval.fpr_limit,
    )


def run_evaluate(cfg: RunConfig, run_dir: Path, workers: int = 1) -> EvalReport:
    """Score the whole test split and write the metric report."""
    dataset = load_run_dataset(cfg)
    pipeline = build_pipeline(cfg, run_dir)
    record = ensure_calibration(
        cfg, run_dir, pipeline, [s.image for s in dataset.train]
    )
    calibration = _calibration_from_record(record)
    map_cfg = map_config_for(cfg)
    report = EvalReport(
        [
            _evaluate_samples(
                cfg, pipeline, dataset.test, map_cfg, calibration,
                dataset.category, workers=workers, artifact_root=run_dir,
            )
        ]
    )
    report.save(run_dir / REPORT_NAME)
    _write_text(run_dir / TABLE_NAME, report.to_table() + "\n")
    logger.info("report written to %s", run_dir / REPORT_NAME)
    return report


STATIC_DEPTH_PERCENTS = (25, 50, 75, 100)
ABLATION_MODES = ("static-vs-dic", "omega", "adapt")


def ablation_rows(
    cfg: RunConfig,
    run_dir: Path,
    mode: str,
    values: tuple[float, ...] | None = None,
    workers: int = 1,
) -> list[tuple[str, CategoryReport]]:
    """Labeled metric rows for one paired comparison on the test split."""
    if mode not in ABLATION_MODES:
        raise ConfigError(f"ablate mode must be one of {ABLATION_MODES}, got {mode!r}")
    dataset = load_run_dataset(cfg)
    map_cfg = map_config_for(cfg)
    rows: list[tuple[str, CategoryReport]] = []

    if mode == "static-vs-dic":
        pipeline = build_pipeline(cfg, run_dir)
        record = ensure_calibration(cfg, run_dir, pipeline,
                                    [s.image for s in dataset.train])
        calibration = _calibration_from_record(record)
        for percent in STATIC_DEPTH_PERCENTS:
            depth = max(1, percent * cfg.depth.t_max // 100)
            rows.append((
                f"static-{depth}",
                _evaluate_samples(cfg, pipeline, dataset.test, map_cfg, calibration,
                                  dataset.category, workers, static_depth=depth),
            ))
        rows.append((
            "dynamic",
            _evaluate_samples(cfg, pipeline, dataset.test, map_cfg, calibration,
                              dataset.category, workers),
        ))
    elif mode == "omega":
        omegas = values if values is not None else (0.0, 0.5, 1.0)
        base = build_pipeline(cfg, run_dir)
        for omega in omegas:
            if not 0.0 <= omega <= 1.0:
                raise ConfigError(f"omega values must lie in [0, 1], got {omega}")
            variant_cfg = replace(cfg, sampling=replace(cfg.sampling, omega=float(omega)))
            pipeline = replace(base, omega=float(omega))
            record = _compute_calibration(
                variant_cfg, pipeline, [s.image for s in dataset.train]
            )
            rows.append((
                f"omega-{omega:g}",
                _evaluate_samples(variant_cfg, pipeline, dataset.test, map_cfg,
                                  _calibration_from_record(record),
                                  dataset.category, workers),
            ))
    else:
        _require(run_dir / ADAPTED_BACKBONE_NAME, "run `dicad finetune` first")
        for label, prefer in (("unadapted", False), ("adapted", True)):
            pipeline = build_pipeline(cfg, run_dir, prefer_adapted=prefer)
            # each variant needs its own index and calibration: features differ
            index, table = _build_index(cfg, pipeline.extractor, dataset)
            pipeline = replace(pipeline, index=index, table=table)
            record = _compute_calibration(cfg, pipeline, [s.image for s in dataset.train])
            rows.append((
                label,
                _evaluate_samples(cfg, pipeline, dataset.test, map_cfg,
                                  _calibration_from_record(record),
                                  dataset.category, workers),
            ))
    return rows


def run_ablate(
    cfg: RunConfig,
    run_dir: Path,
    mode: str,
    values: tuple[float, ...] | None = None,
    workers: int = 1,
) -> str:
    """Run one paired comparison and write its table; returns the text."""
    rows = ablation_rows(cfg, run_dir, mode, values=values, workers=workers)
    width = max(len(label) for label, _ in rows)
    lines = [f"{'row'.ljust(width)}  image_auroc  pixel_auroc  pro"]
    for label, rep in rows:
        lines.append(
            f"{label.ljust(width)}  {rep.image_auroc:11.4f}  {rep.pixel_auroc:11.4f}  "
            f"{rep.pro_score:.4f}"
        )
    text = "\n".join(lines) + "\n"
    _write_text(run_dir / ABLATION_DIR / f"{mode.replace('-', '_')}.txt", text)
    return text


def run_bench(cfg: RunConfig, run_dir: Path, batch: int = 30) -> str:
    """Time per-image scoring over a fixed batch; returns the report text."""
    if batch < 1:
        raise ConfigError(f"bench batch must be >= 1, got {batch}")
    dataset = load_run_dataset(cfg)
    pipeline = build_pipeline(cfg, run_dir)
    record = ensure_calibration(cfg, run_dir, pipeline,
                                [s.image for s in dataset.train])
    calibration = _calibration_from_record(record)
    map_cfg = map_config_for(cfg)
    pool = dataset.test if dataset.test else dataset.train
    images = [pool[i % len(pool)] for i in range(batch)]

    _score_one(pipeline, images[0].image, map_cfg, calibration, _image_rng(cfg, 0))
    seconds = []
    for i, sample in enumerate(images):
        start = time.perf_counter()
        _score_one(pipeline, sample.image, map_cfg, calibration, _image_rng(cfg, i))
        seconds.append(time.perf_counter() - start)

    mean_s = float(np.mean(seconds))
    lines = [
        f"batch {batch}",
        f"mean_seconds_per_image {mean_s:.6f}",
        f"median_seconds_per_image {float(np.median(seconds)):.6f}",
        f"fps {1.0 / mean_s:.3f}",
    ]
    lines += [
        f"{images[i].name} seconds={seconds[i]:.6f}" for i in range(batch)
    ]
    text = "\n".join(lines) + "\n"
    _write_text(run_dir / BENCH_NAME, text)
    return text
