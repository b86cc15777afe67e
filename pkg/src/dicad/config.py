"""Run configuration: defaults, YAML snapshots, overrides, validation.

One ``RunConfig`` drives every command. It is grouped into sections that
mirror the pipeline stages; the YAML snapshot written into each run
directory uses the same section/field names, so a run can always be
re-executed from its snapshot alone.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import yaml

from .errors import ConfigError


@dataclass(frozen=True)
class DataSection:
    """Where images come from.

    ``source`` is ``"synthetic"`` (generated on the fly, sized by the
    ``num_*`` counts) or ``"folder"`` (category tree under ``root``).
    """

    source: str = "synthetic"
    root: str = ""
    category: str = "synthetic"
    resolution: int = 64
    num_train: int = 200
    num_test_nominal: int = 20
    num_test_per_kind: int = 10


@dataclass(frozen=True)
class ScheduleSection:
    beta_start: float = 0.0015
    beta_end: float = 0.0195
    total_steps: int = 1000


@dataclass(frozen=True)
class DenoiserSection:
    epochs: int = 50
    batch_size: int = 32
    learning_rate: float = 1e-4
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    base_channels: int = 32
    channel_mults: tuple[int, ...] = (1, 2)
    time_dim: int = 128


@dataclass(frozen=True)
class CodecSection:
    kind: str = "pooled"
    factor: int = 4
    latent_channels: int = 4
    hidden: int = 32
    epochs: int = 50
    batch_size: int = 32
    learning_rate: float = 1e-3


@dataclass(frozen=True)
class ExtractorSection:
    widths: tuple[int, ...] = (16, 32, 64, 128)
    seed: int = 0


@dataclass(frozen=True)
class DepthSection:
    """Severity binning that picks the per-image noising depth."""

    t_max: int = 80
    num_bins: int = 10
    min_bin: int = 2
    num_neighbors: int = 20
    round_multiple: int = 10
    block: int = 2


@dataclass(frozen=True)
class SamplingSection:
    steps: int = 10
    eta: float = 8.0
    sigma: float = 0.0
    omega: float = 0.0


@dataclass(frozen=True)
class MapSection:
    latent_weight: float = 0.85
    smoothing_sigma: float = 4.0
    blocks: tuple[int, ...] = (2, 3)
    normalization: str = "calibration"


@dataclass(frozen=True)
class AdaptSection:
    epochs: int = 1
    learning_rate: float = 1e-4
    batch_size: int = 8
    rebuild_index: bool = True


@dataclass(frozen=True)
class EvalSection:
    fpr_limit: float = 0.3
    threshold_fpr: float = 0.05
    calibration_count: int = 20


@dataclass(frozen=True)
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    denoiser: DenoiserSection = field(default_factory=DenoiserSection)
    codec: CodecSection = field(default_factory=CodecSection)
    extractor: ExtractorSection = field(default_factory=ExtractorSection)
    depth: DepthSection = field(default_factory=DepthSection)
    sampling: SamplingSection = field(default_factory=SamplingSection)
    maps: MapSection = field(default_factory=MapSection)
    adapt: AdaptSection = field(default_factory=AdaptSection)
    eval: EvalSection = field(default_factory=EvalSection)
    seed: int = 0


def default_config() -> RunConfig:
    return RunConfig()


_SECTIONS = {
    f.name: f.default_factory for f in fields(RunConfig) if f.name != "seed"
}


def _coerce(section: str, fld, value):
    """Bring a YAML/override value to the field's declared type."""
    name = f"{section}.{fld.name}"
    default = fld.default
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false", "1", "0"):
            return value.lower() in ("true", "1")
        raise ConfigError(f"{name} expects a boolean, got {value!r}")
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, (int, str)):
            raise ConfigError(f"{name} expects an integer, got {value!r}")
        try:
            return int(value)
        except ValueError:
            raise ConfigError(f"{name} expects an integer, got {value!r}") from None
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float, str)):
            raise ConfigError(f"{name} expects a number, got {value!r}")
        try:
            return float(value)
        except ValueError:
            raise ConfigError(f"{name} expects a number, got {value!r}") from None
    if isinstance(default, tuple):
        if isinstance(value, str):
            parts = [p for p in value.split(",") if p.strip()]
        elif isinstance(value, (list, tuple)):
            parts = list(value)
        else:
            raise ConfigError(f"{name} expects a list of integers, got {value!r}")
        try:
            return tuple(int(p) for p in parts)
        except (TypeError, ValueError):
            raise ConfigError(f"{name} expects a list of integers, got {value!r}") from None
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{name} expects a string, got {value!r}")
        return value
    raise ConfigError(f"{name} has unsupported type")


def _section_from_dict(section_name: str, cls, raw: dict):
    known = {f.name: f for f in fields(cls)}
    unknown = set(raw) - set(known)
    if unknown:
        raise ConfigError(f"unknown config key '{section_name}.{sorted(unknown)[0]}'")
    kwargs = {
        key: _coerce(section_name, known[key], value) for key, value in raw.items()
    }
    return cls(**kwargs)


def config_from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping of sections")
    unknown = set(raw) - set(_SECTIONS) - {"seed"}
    if unknown:
        raise ConfigError(f"unknown config section '{sorted(unknown)[0]}'")
    kwargs = {}
    for name, cls in _SECTIONS.items():
        section_raw = raw.get(name, {})
        if section_raw is None:
            section_raw = {}
        if not isinstance(section_raw, dict):
            raise ConfigError(f"config section '{name}' must be a mapping")
        kwargs[name] = _section_from_dict(name, cls, section_raw)
    seed = raw.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int):
        raise ConfigError(f"seed expects an integer, got {seed!r}")
    return RunConfig(seed=seed, **kwargs)


def config_to_dict(cfg: RunConfig) -> dict:
    out = {}
    for name in _SECTIONS:
        section = asdict(getattr(cfg, name))
        out[name] = {
            k: list(v) if isinstance(v, tuple) else v for k, v in section.items()
        }
    out["seed"] = cfg.seed
    return out


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config file {path} is not valid YAML: {exc}") from None
    return config_from_dict(raw or {})


def save_config(path: str | Path, cfg: RunConfig) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(yaml.safe_dump(config_to_dict(cfg), sort_keys=False))
    tmp.replace(path)


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply ``section.field=value`` strings on top of a config."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form section.field=value")
        key, value = item.split("=", 1)
        key = key.strip()
        if key == "seed":
            try:
                cfg = replace(cfg, seed=int(value))
            except ValueError:
                raise ConfigError(f"seed expects an integer, got {value!r}") from None
            continue
        if "." not in key:
            raise ConfigError(f"override key {key!r} needs a section prefix")
        section_name, field_name = key.split(".", 1)
        if section_name not in _SECTIONS:
            raise ConfigError(f"unknown config section '{section_name}'")
        section = getattr(cfg, section_name)
        known = {f.name: f for f in fields(section)}
        if field_name not in known:
            raise ConfigError(f"unknown config key '{section_name}.{field_name}'")
        coerced = _coerce(section_name, known[field_name], value)
        cfg = replace(cfg, **{section_name: replace(section, **{field_name: coerced})})
    return cfg


def validate_config(cfg: RunConfig) -> None:
    """Reject inconsistent settings before any compute starts."""
    d = cfg.data
    if d.source not in ("synthetic", "folder"):
        raise ConfigError(f"data.source must be 'synthetic' or 'folder', got {d.source!r}")
    if d.source == "folder" and not d.root:
        raise ConfigError("data.source 'folder' requires data.root")
    if d.resolution < 8:
        raise ConfigError(f"data.resolution must be >= 8, got {d.resolution}")

    s = cfg.schedule
    if not 0.0 < s.beta_start <= s.beta_end < 1.0:
        raise ConfigError(
            f"schedule must satisfy 0 < beta_start <= beta_end < 1, "
            f"got {s.beta_start}..{s.beta_end}"
        )
    if s.total_steps < 1:
        raise ConfigError(f"schedule.total_steps must be >= 1, got {s.total_steps}")

    dep = cfg.depth
    if dep.t_max > s.total_steps:
        raise ConfigError(
            f"depth.t_max {dep.t_max} exceeds schedule.total_steps {s.total_steps}"
        )
    if dep.t_max < 1:
        raise ConfigError(f"depth.t_max must be >= 1, got {dep.t_max}")
    if not 1 <= dep.min_bin <= dep.num_bins:
        raise ConfigError(
            f"depth.min_bin {dep.min_bin} must lie in [1, depth.num_bins={dep.num_bins}]"
        )
    if dep.num_neighbors < 1:
        raise ConfigError(f"depth.num_neighbors must be >= 1, got {dep.num_neighbors}")
    if dep.round_multiple < 1:
        raise ConfigError(f"depth.round_multiple must be >= 1, got {dep.round_multiple}")
    if d.source == "synthetic" and dep.num_neighbors >= d.num_train:
        raise ConfigError(
            f"depth.num_neighbors {dep.num_neighbors} requires at least "
            f"{dep.num_neighbors + 1} training images, got data.num_train {d.num_train}"
        )

    num_blocks = len(cfg.extractor.widths)
    if not 1 <= dep.block <= num_blocks:
        raise ConfigError(
            f"depth.block {dep.block} outside extractor range [1, {num_blocks}]"
        )
    for b in cfg.maps.blocks:
        if not 1 <= b <= num_blocks:
            raise ConfigError(
                f"maps.blocks entry {b} outside extractor range [1, {num_blocks}]"
            )
    if not cfg.maps.blocks:
        raise ConfigError("maps.blocks must not be empty")
    if not 0.0 <= cfg.maps.latent_weight <= 1.0:
        raise ConfigError(
            f"maps.latent_weight must lie in [0, 1], got {cfg.maps.latent_weight}"
        )
    if cfg.maps.smoothing_sigma < 0:
        raise ConfigError(
            f"maps.smoothing_sigma must be >= 0, got {cfg.maps.smoothing_sigma}"
        )
    if cfg.maps.normalization not in ("minmax", "calibration"):
        raise ConfigError(
            f"maps.normalization must be 'minmax' or 'calibration', "
            f"got {cfg.maps.normalization!r}"
        )

    samp = cfg.sampling
    if samp.steps < 1:
        raise ConfigError(f"sampling.steps must be >= 1, got {samp.steps}")
    if samp.eta < 0:
        raise ConfigError(f"sampling.eta must be >= 0, got {samp.eta}")
    if samp.sigma < 0:
        raise ConfigError(f"sampling.sigma must be >= 0, got {samp.sigma}")
    if not 0.0 <= samp.omega <= 1.0:
        raise ConfigError(f"sampling.omega must lie in [0, 1], got {samp.omega}")

    c = cfg.codec
    if c.kind not in ("identity", "pooled", "learned"):
        raise ConfigError(
            f"codec.kind must be 'identity', 'pooled', or 'learned', got {c.kind!r}"
        )
    if c.kind != "identity":
        if c.factor < 1:
            raise ConfigError(f"codec.factor must be >= 1, got {c.factor}")
        if d.resolution % c.factor:
            raise ConfigError(
                f"data.resolution {d.resolution} not divisible by codec.factor {c.factor}"
            )

    latent_size = d.resolution if c.kind == "identity" else d.resolution // c.factor
    down = 2 ** (len(cfg.denoiser.channel_mults) - 1)
    if latent_size % down:
        raise ConfigError(
            f"latent size {latent_size} not divisible by the denoiser's "
            f"downsampling factor {down}"
        )
    if d.resolution // (2 ** max([dep.block, *cfg.maps.blocks])) < 1:
        raise ConfigError(
            f"data.resolution {d.resolution} too small for extractor block "
            f"{max([dep.block, *cfg.maps.blocks])}"
        )

    a = cfg.adapt
    if not 0 <= a.epochs <= 3:
        raise ConfigError(f"adapt.epochs must lie in [0, 3], got {a.epochs}")
    if a.learning_rate <= 0:
        raise ConfigError(f"adapt.learning_rate must be > 0, got {a.learning_rate}")
    if a.batch_size < 1:
        raise ConfigError(f"adapt.batch_size must be >= 1, got {a.batch_size}")

    e = cfg.eval
    if not 0.0 < e.fpr_limit <= 1.0:
        raise ConfigError(f"eval.fpr_limit must lie in (0, 1], got {e.fpr_limit}")
    if not 0.0 <= e.threshold_fpr < 1.0:
        raise ConfigError(
            f"eval.threshold_fpr must lie in [0, 1), got {e.threshold_fpr}"
        )
    if e.calibration_count < 1:
        raise ConfigError(
            f"eval.calibration_count must be >= 1, got {e.calibration_count}"
        )

    for name, value in (
        ("denoiser.epochs", cfg.denoiser.epochs),
        ("codec.epochs", c.epochs),
    ):
        if value < 0:
            raise ConfigError(f"{name} must be >= 0, got {value}")
    for name, value in (
        ("denoiser.batch_size", cfg.denoiser.batch_size),
        ("codec.batch_size", c.batch_size),
    ):
        if value < 1:
            raise ConfigError(f"{name} must be >= 1, got {value}")
    for name, value in (
        ("denoiser.learning_rate", cfg.denoiser.learning_rate),
        ("codec.learning_rate", c.learning_rate),
    ):
        if value <= 0:
            raise ConfigError(f"{name} must be > 0, got {value}")
