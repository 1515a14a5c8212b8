"""Flat JSON run configuration."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .fusion import FusionConfig
from .image import ImageEncoderConfig
from .ssm import EncoderConfig

STAGES = ("pretrain", "finetune", "eval", "attrib", "unimodal-eval", "noise-sim", "grad-check")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    stage: str = "finetune"
    strategy: str = "trainable"
    seed: int = 2022
    seeds: list[int] = field(default_factory=lambda: [2022, 2023, 2024, 2025, 2026])
    task: str = "multiclass"
    n_classes: int = 2
    metric: str = "auc"

    # data
    dataset: str = "synthetic"
    schema: dict[str, str] = field(default_factory=dict)
    embeddings: str | None = None
    synthetic_n: int = 2000
    synthetic_seed: int = 0

    # encoders
    image_mode: str = "conv-small"
    image_height: int = 16
    image_width: int = 16
    image_channels: int = 1
    image_widths: list[int] = field(default_factory=lambda: [16, 32, 64])
    d_img: int = 128
    d_tab: int = 64
    n_blocks: int = 2
    d_state: int = 16
    expand: int = 2
    conv_width: int = 4
    d_rank: int | None = None

    # pretraining
    d_proj: int = 128
    temperature: float = 0.1
    itc_form: str = "printed"
    pretrain_lr: float = 3e-3
    pretrain_weight_decay: float = 1e-4
    pretrain_epochs: int = 500
    warmup_epochs: int = 10
    batch_size: int = 256
    augment_prob: float = 0.95
    corruption_rate: float = 0.3
    resume: str | None = None

    # fine-tuning
    checkpoint: str | None = None
    lr: float = 1e-3
    finetune_batch_size: int = 32
    lr_sweep: list[float] = field(default_factory=list)
    weight_decay: float = 0.0
    epochs: int = 200
    patience: int = 10
    min_delta: float = 0.0002
    d_out: int = 2048
    r_conf: float | None = 1.0
    r_conf_source: str = "config"
    lambda1: float = 5.0
    lambda2: float = 5.0
    class_weights: list[float] = field(default_factory=lambda: [0.1, 2.0])
    sampler_factors: list[float] = field(default_factory=lambda: [0.5, 5.0])
    use_sampler: bool | None = None
    unimodal_epochs: int = 100

    # noise simulation
    rfm_rate: float = 0.0
    image_sigma: float = 0.0
    rfm_rates: list[float] = field(default_factory=lambda: [0.0, 0.25, 0.5, 0.75])
    image_sigmas: list[float] = field(default_factory=lambda: [0.0, 0.1, 0.15, 0.25])

    # attribution
    ig_steps: int = 64
    ig_target: int = 1
    ig_max_samples: int = 256

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.stage not in STAGES:
            raise ConfigError(f"unknown stage {self.stage!r}")
        if self.strategy not in ("frozen", "trainable"):
            raise ConfigError(f"unknown strategy {self.strategy!r}")
        if self.stage == "pretrain" and self.strategy == "frozen":
            raise ConfigError("the frozen strategy only applies to fine-tuning; pretraining trains the encoders")
        if self.task not in ("binary-weighted", "multiclass"):
            raise ConfigError(f"unknown task {self.task!r}")
        if self.metric not in ("auc", "acc"):
            raise ConfigError(f"unknown metric {self.metric!r}")
        if self.task == "multiclass" and self.n_classes < 2:
            raise ConfigError("multiclass task needs n_classes >= 2")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if self.itc_form not in ("printed", "standard"):
            raise ConfigError(f"unknown itc_form {self.itc_form!r}")
        if self.r_conf_source not in ("config", "frozen", "trainable"):
            raise ConfigError(f"unknown r_conf_source {self.r_conf_source!r}")
        if self.r_conf_source == "config" and (self.r_conf is None or self.r_conf <= 0):
            raise ConfigError("r_conf must be a positive number when r_conf_source is 'config'")
        if not 0 <= self.rfm_rate <= 1:
            raise ConfigError("rfm_rate must be in [0, 1]")
        if self.image_sigma < 0:
            raise ConfigError("image_sigma must be >= 0")
        if len(self.class_weights) != 2 or len(self.sampler_factors) != 2:
            raise ConfigError("class_weights and sampler_factors hold two values (class 0, class 1)")
        if not self.seeds:
            raise ConfigError("seeds must not be empty")
        if self.batch_size < 2 or self.finetune_batch_size < 1:
            raise ConfigError("batch sizes must be positive (pretraining needs at least 2)")

    # -- derived sub-configs ------------------------------------------------
    @property
    def n_outputs(self) -> int:
        return 1 if self.task == "binary-weighted" else self.n_classes

    @property
    def sampler_enabled(self) -> bool:
        return self.task == "binary-weighted" if self.use_sampler is None else self.use_sampler

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(d_tab=self.d_tab, n_blocks=self.n_blocks, d_state=self.d_state,
                             expand=self.expand, conv_width=self.conv_width, d_rank=self.d_rank)

    def image_config(self) -> ImageEncoderConfig:
        return ImageEncoderConfig(mode=self.image_mode, height=self.image_height, width=self.image_width,
                                  channels=self.image_channels, d_img=self.d_img,
                                  widths=tuple(self.image_widths))

    def fusion_config(self, r_conf: float | None = None) -> FusionConfig:
        r = self.r_conf if r_conf is None else r_conf
        if r is None:
            raise ConfigError("r_conf has not been resolved")
        return FusionConfig(r_conf=r, d_out=self.d_out, lambda1=self.lambda1, lambda2=self.lambda2)

    def replace(self, **changes) -> "RunConfig":
        d = asdict(self)
        d.update(changes)
        return RunConfig(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def load_config(path, **overrides) -> RunConfig:
    data = json.loads(Path(path).read_text())
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a JSON object")
    return config_from_dict(data, **overrides)


def config_from_dict(data: dict, **overrides) -> RunConfig:
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    merged = dict(data)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return RunConfig(**merged)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def write_resolved(cfg: RunConfig, out_dir, extra: dict | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    payload = cfg.to_dict()
    if extra:
        payload.update(extra)
    path = out / "resolved_config.json"
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path
