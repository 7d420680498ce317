"""Model, pre-training, and fine-tuning hyperparameters."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace

from .errors import ConfigError
from .masking import MaskSpec

BACKBONES = ("patch", "variate")
LOSS_MODES = ("all", "masked_only")
TASKS = ("forecast", "classify")
FINETUNE_MODES = ("full", "linear_probe")
FUSIONS = ("fixed_multi_lineage", "extended_multi_lineage", "single")

FUSION_ALIASES = {
    "fixed": "fixed_multi_lineage",
    "extended": "extended_multi_lineage",
    "single": "single",
}


@dataclass
class ModelConfig:
    seq_len: int = 96
    n_channels: int = 7
    d_model: int = 128
    d_ff: int = 256
    n_heads: int = 8
    e_layers: int = 3
    d_layers: int = 1
    n_lineages: int = 3
    sampling_ratio: int = 6
    patch_len: int = 12
    backbone: str = "patch"
    dropout: float = 0.1
    mask: MaskSpec = field(default_factory=MaskSpec)

    @property
    def max_distance(self) -> int:
        return self.seq_len * self.sampling_ratio

    @property
    def n_tokens(self) -> int:
        """Tokens per group for a single length-``seq_len`` window."""
        return self.seq_len // self.patch_len if self.backbone == "patch" else self.n_channels

    def validate(self) -> "ModelConfig":
        for name in ("seq_len", "n_channels", "d_model", "d_ff", "n_heads", "patch_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.e_layers < 1 or self.d_layers < 1:
            raise ConfigError(f"e_layers and d_layers must be >= 1, got {self.e_layers}/{self.d_layers}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.n_lineages < 1:
            raise ConfigError("n_lineages must be >= 1")
        if self.sampling_ratio < 0:
            raise ConfigError("sampling_ratio must be >= 0")
        if self.backbone not in BACKBONES:
            raise ConfigError(f"backbone must be one of {BACKBONES}, got {self.backbone!r}")
        if self.backbone == "patch":
            if self.patch_len > self.seq_len:
                raise ConfigError(f"patch_len={self.patch_len} exceeds seq_len={self.seq_len}")
            if self.seq_len % self.patch_len:
                raise ConfigError(f"seq_len={self.seq_len} is not a multiple of patch_len={self.patch_len}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        self.mask.validate()
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        mask = d.pop("mask", None)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        cfg = cls(**d)
        if mask is not None:
            cfg.mask = mask if isinstance(mask, MaskSpec) else MaskSpec(**mask)
        return cfg

    @classmethod
    def base(cls, **overrides) -> "ModelConfig":
        return replace(cls(e_layers=3, d_layers=1, d_model=128, d_ff=256, n_heads=8), **overrides)

    @classmethod
    def large(cls, **overrides) -> "ModelConfig":
        return replace(cls(e_layers=5, d_layers=2, d_model=128, d_ff=1024, n_heads=16), **overrides)

    @classmethod
    def tiny(cls, **overrides) -> "ModelConfig":
        """Desk-scale model used by the gradient checks and smoke runs."""
        base = cls(
            seq_len=8, n_channels=2, d_model=8, d_ff=16, n_heads=2, e_layers=1, d_layers=1,
            n_lineages=2, sampling_ratio=2, patch_len=4, dropout=0.0,
            mask=MaskSpec("channel_continuous", 0.25, 2),
        )
        return replace(base, **overrides)


@dataclass
class PretrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 32
    epochs: int = 50
    seed: int = 0
    steps_per_epoch: int | None = None
    loss_mode: str = "all"

    def validate(self) -> "PretrainConfig":
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("learning_rate and batch_size must be positive and epochs non-negative")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise ConfigError("steps_per_epoch must be positive")
        if self.loss_mode not in LOSS_MODES:
            raise ConfigError(f"loss_mode must be one of {LOSS_MODES}")
        return self

    @classmethod
    def classification(cls, **overrides) -> "PretrainConfig":
        return replace(cls(batch_size=256, epochs=100), **overrides)


@dataclass
class FinetuneConfig:
    task: str = "forecast"
    mode: str = "full"
    fusion: str = "fixed_multi_lineage"
    lineages_used: int | None = None
    horizons: tuple = (96, 192, 336, 720)
    n_classes: int = 2
    learning_rate: float = 1e-4
    epochs: int = 10
    batch_size: int = 32
    input_len: int | None = None
    seed: int = 0
    max_steps_per_epoch: int | None = None
    eval_stride: int = 1

    def __post_init__(self):
        self.fusion = FUSION_ALIASES.get(self.fusion, self.fusion)
        self.mode = self.mode.replace("-", "_")
        self.horizons = tuple(int(h) for h in self.horizons)

    def validate(self, model_config: ModelConfig | None = None) -> "FinetuneConfig":
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.mode not in FINETUNE_MODES:
            raise ConfigError(f"mode must be one of {FINETUNE_MODES}, got {self.mode!r}")
        if self.fusion not in FUSIONS:
            raise ConfigError(f"fusion must be one of {FUSIONS}, got {self.fusion!r}")
        if self.task == "classify" and self.n_classes < 2:
            raise ConfigError(f"classification needs at least 2 classes, got {self.n_classes}")
        if self.task == "forecast" and (not self.horizons or min(self.horizons) < 1):
            raise ConfigError("forecasting needs at least one positive horizon")
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 0 or self.eval_stride < 1:
            raise ConfigError("learning_rate, batch_size, eval_stride must be positive and epochs non-negative")
        if model_config is not None:
            n_max = model_config.n_lineages + 1
            if self.lineages_used is not None and not 1 <= self.lineages_used <= n_max:
                raise ConfigError(f"lineages_used must lie in [1, {n_max}], got {self.lineages_used}")
            length = self.resolved_input_len(model_config)
            if self.fusion == "extended_multi_lineage":
                if length % model_config.seq_len:
                    raise ConfigError(f"length must be a multiple of {model_config.seq_len} (got {length})")
            elif length != model_config.seq_len:
                raise ConfigError(
                    f"input length {length} differs from the pre-training length {model_config.seq_len}; "
                    "use the extended fusion for longer inputs"
                )
        return self

    def resolved_input_len(self, model_config: ModelConfig) -> int:
        return self.input_len if self.input_len is not None else model_config.seq_len

    def resolved_lineages(self, model_config: ModelConfig) -> int:
        return self.lineages_used if self.lineages_used is not None else model_config.n_lineages + 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["horizons"] = list(self.horizons)
        return d

    @classmethod
    def classification(cls, **overrides) -> "FinetuneConfig":
        return replace(cls(task="classify", epochs=50, batch_size=32), **overrides)
