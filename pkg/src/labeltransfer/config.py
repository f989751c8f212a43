"""Declarative run configuration: one TOML file drives every stage."""

from __future__ import annotations

import hashlib
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .annotations import _canonical_json
from .benchmark import BenchConfig, granularity_preset, size_disparity_preset
from .detectors import DetectorConfig, NoiseModel
from .fusion import SffConfig
from .model import TrainConfig
from .proposals import AugConfig

PRESETS = ("granularity", "size_disparity")
PRESET_SPACES = {
    "granularity": ("coarse", "mid", "fine"),
    "size_disparity": ("small_a", "small_b", "large_a", "large_b"),
}
PRESET_DEFAULT_TARGET = {"granularity": "fine", "size_disparity": "small_b"}


class ConfigError(ValueError):
    """Raised for schema violations in the run configuration."""


@dataclass(frozen=True)
class RunConfig:
    seed: int
    output_dir: str
    target_space: str
    preset: str
    images_per_dataset: int = 60
    size_counts: tuple[int, int, int, int] = (100, 60, 2000, 4000)
    feature_noise: float = 0.05
    benchmark_dir: str | None = None  # read an existing benchmark instead of gen-bench output
    tau: float = 0.5
    nms_iou: float = 0.5
    pseudo_mode: str = "oracle"  # oracle | detector
    noise: NoiseModel = field(default_factory=NoiseModel)
    aug: AugConfig = field(default_factory=AugConfig)
    sff: SffConfig = field(default_factory=SffConfig)
    lat_train: TrainConfig = field(default_factory=TrainConfig)
    detector_train: DetectorConfig = field(default_factory=DetectorConfig)
    downstream_train: DetectorConfig = field(
        default_factory=lambda: DetectorConfig(strategy="fine_tune", ap_floor=None)
    )

    def bench_config(self) -> BenchConfig:
        if self.preset == "granularity":
            return granularity_preset(self.images_per_dataset, self.feature_noise)
        return size_disparity_preset(self.size_counts, self.feature_noise)

    def config_hash(self) -> str:
        return hashlib.sha256(_canonical_json(config_to_dict(self)).encode()).hexdigest()[:16]


def _section(doc: dict, name: str) -> dict:
    value = doc.get(name, {})
    if not isinstance(value, dict):
        raise ConfigError(f"[{name}] must be a table")
    return value


def _pick(section: dict, defaults, fields: dict[str, type]) -> dict:
    out = {}
    for key, typ in fields.items():
        if key in section:
            v = section[key]
            if typ is float and isinstance(v, int):
                v = float(v)
            if typ in (int, float, str, bool) and not isinstance(v, typ):
                raise ConfigError(f"field {key!r} must be {typ.__name__}, got {type(v).__name__}")
            out[key] = v
    return out


def config_from_dict(doc: dict) -> RunConfig:
    if "seed" not in doc:
        raise ConfigError("seed is mandatory")
    if not isinstance(doc["seed"], int):
        raise ConfigError("seed must be an integer")

    bench = _section(doc, "benchmark")
    preset = bench.get("preset", "granularity")
    if preset not in PRESETS:
        raise ConfigError(f"benchmark.preset must be one of {PRESETS}, got {preset!r}")
    spaces = PRESET_SPACES[preset]
    target = doc.get("target_space", PRESET_DEFAULT_TARGET[preset])
    if target not in spaces:
        raise ConfigError(f"target_space {target!r} not among declared spaces {spaces}")

    thresholds = _section(doc, "thresholds")
    pseudo = _section(doc, "pseudo")
    pseudo_mode = pseudo.get("mode", "oracle")
    if pseudo_mode not in ("oracle", "detector"):
        raise ConfigError(f"pseudo.mode must be oracle or detector, got {pseudo_mode!r}")
    noise_doc = _pick(
        pseudo.get("noise", {}), None,
        {"sigma_box": float, "p_confusion": float, "p_drop": float, "p_spurious": float},
    )
    counts = bench.get("counts", [100, 60, 2000, 4000])
    if not (isinstance(counts, list) and len(counts) == 4 and all(isinstance(c, int) for c in counts)):
        raise ConfigError("benchmark.counts must be a list of 4 integers")

    try:
        cfg = RunConfig(
            seed=doc["seed"],
            output_dir=str(doc.get("output_dir", "out")),
            target_space=target,
            preset=preset,
            images_per_dataset=bench.get("images_per_dataset", 60),
            size_counts=tuple(counts),
            feature_noise=float(bench.get("feature_noise", 0.05)),
            benchmark_dir=bench.get("dir"),
            tau=float(thresholds.get("tau", 0.5)),
            nms_iou=float(thresholds.get("nms_iou", 0.5)),
            pseudo_mode=pseudo_mode,
            noise=NoiseModel(**noise_doc),
            aug=AugConfig(
                **_pick(_section(doc, "augment"), None,
                        {"p_jitter": float, "p_remove": float, "jitter_strength": float})
            ),
            sff=SffConfig(
                **_pick(_section(doc, "sff"), None,
                        {"attention_dim": int, "mode": str, "t_rule": str,
                         "clamp_before_softmax": bool})
            ),
            lat_train=TrainConfig(
                seed=doc["seed"],
                **_pick(_section(doc, "lat_train"), None,
                        {"iterations": int, "learning_rate": float, "batch_size": int,
                         "strategy": str, "fine_tune_fraction": float, "ema_decay": float}),
            ),
            detector_train=_detector_config(_section(doc, "detector_train"), ap_floor_default=0.6),
            downstream_train=_detector_config(
                _section(doc, "downstream_train"), ap_floor_default=None,
                strategy_default="fine_tune",
            ),
        )
    except (ValueError, TypeError) as e:
        raise ConfigError(str(e)) from e
    if not (0.0 <= cfg.tau <= 1.0):
        raise ConfigError(f"thresholds.tau {cfg.tau} outside [0, 1]")
    return cfg


def _detector_config(section: dict, ap_floor_default, strategy_default: str = "mixed") -> DetectorConfig:
    picked = _pick(
        section, None,
        {"iterations": int, "learning_rate": float, "batch_size": int, "hidden_dim": int,
         "ema_decay": float, "strategy": str, "fine_tune_fraction": float,
         "score_floor": float, "nms_iou": float},
    )
    picked.setdefault("strategy", strategy_default)
    ap_floor = section.get("ap_floor", ap_floor_default)
    if ap_floor is not None:
        ap_floor = float(ap_floor)
    scales = section.get("anchor_scales")
    if scales is not None:
        picked["anchor_scales"] = tuple(float(s) for s in scales)
    return DetectorConfig(ap_floor=ap_floor, **picked)


def load_config(path: str | Path) -> RunConfig:
    try:
        with open(path, "rb") as f:
            doc = tomllib.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found")
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: invalid TOML ({e})")
    return config_from_dict(doc)


def config_to_dict(cfg: RunConfig) -> dict:
    """Full normalized view; hashed into every stage manifest."""
    return {
        "seed": cfg.seed,
        "output_dir": cfg.output_dir,
        "target_space": cfg.target_space,
        "benchmark": {
            "preset": cfg.preset,
            "images_per_dataset": cfg.images_per_dataset,
            "counts": list(cfg.size_counts),
            "feature_noise": cfg.feature_noise,
            "dir": cfg.benchmark_dir,
        },
        "thresholds": {"tau": cfg.tau, "nms_iou": cfg.nms_iou},
        "pseudo": {
            "mode": cfg.pseudo_mode,
            "noise": {
                "sigma_box": cfg.noise.sigma_box,
                "p_confusion": cfg.noise.p_confusion,
                "p_drop": cfg.noise.p_drop,
                "p_spurious": cfg.noise.p_spurious,
            },
        },
        "augment": {
            "p_jitter": cfg.aug.p_jitter,
            "p_remove": cfg.aug.p_remove,
            "jitter_strength": cfg.aug.jitter_strength,
        },
        "sff": {
            "attention_dim": cfg.sff.attention_dim,
            "mode": cfg.sff.mode,
            "t_rule": cfg.sff.t_rule,
            "clamp_before_softmax": cfg.sff.clamp_before_softmax,
        },
        "lat_train": {
            "iterations": cfg.lat_train.iterations,
            "learning_rate": cfg.lat_train.learning_rate,
            "batch_size": cfg.lat_train.batch_size,
            "strategy": cfg.lat_train.strategy,
            "fine_tune_fraction": cfg.lat_train.fine_tune_fraction,
            "ema_decay": cfg.lat_train.ema_decay,
        },
        "detector_train": _detector_to_dict(cfg.detector_train),
        "downstream_train": _detector_to_dict(cfg.downstream_train),
    }


def _detector_to_dict(c: DetectorConfig) -> dict:
    return {
        "iterations": c.iterations,
        "learning_rate": c.learning_rate,
        "batch_size": c.batch_size,
        "hidden_dim": c.hidden_dim,
        "anchor_scales": list(c.anchor_scales),
        "ema_decay": c.ema_decay,
        "strategy": c.strategy,
        "fine_tune_fraction": c.fine_tune_fraction,
        "score_floor": c.score_floor,
        "nms_iou": c.nms_iou,
        "ap_floor": c.ap_floor,
    }
