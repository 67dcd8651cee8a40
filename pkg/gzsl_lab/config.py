"""
Configuration
=============
Central configuration for models, training, data generation and runs.

Precedence, lowest to highest: dataclass defaults < environment (.env) <
JSON config file < --preset < individual command-line flags.
"""

import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Union, get_args, get_origin, get_type_hints

from dotenv import load_dotenv

from .errors import ConfigError

# Load environment variables
env_path = Path(__file__).parent.parent / ".env"
load_dotenv(env_path)
load_dotenv()


@dataclass
class Settings:
    """Environment-backed ambient settings."""

    log_level: str = field(
        default_factory=lambda: os.getenv("GZSL_LOG_LEVEL", "INFO")
    )
    output_dir: str = field(
        default_factory=lambda: os.getenv("GZSL_OUTPUT_DIR", "runs")
    )
    seed: int = field(
        default_factory=lambda: int(os.getenv("GZSL_SEED", "42"))
    )
    tau: float = field(
        default_factory=lambda: float(os.getenv("GZSL_TAU", "20.0"))
    )


# Global settings instance
settings = Settings()


@dataclass
class DsvtmConfig:
    """Shape and wiring of the dual semantic-visual transformer modules."""

    num_attributes: int = 12        # N_s
    num_patches: int = 8            # N_v
    width: int = 32                 # D
    num_groups: int = 3             # N_g
    loops: int = 2                  # R
    modules: int = 2                # Z
    hidden_patches: Optional[int] = None  # N_h, defaults to 2 * N_v
    mlp_ratio: int = 4
    attn_scale: bool = False
    ln_eps: float = 1e-5

    # Component switches (all on = full model)
    use_imse: bool = True
    use_aca: bool = True
    use_smid_attention: bool = True
    use_patch_mixing: bool = True

    # Recurrence and cascade wiring
    share_loop_weights: bool = True
    anchor_to_shared: bool = False
    restart_from_shared: bool = False

    @property
    def group_width(self) -> int:
        """Bottleneck width of the group compact attention, floor(N_s / N_g)."""
        return self.num_attributes // max(self.num_groups, 1)

    @property
    def patch_hidden(self) -> int:
        """Expanded patch length N_h."""
        return self.hidden_patches if self.hidden_patches is not None else 2 * self.num_patches

    @property
    def affinities_per_module(self) -> int:
        return self.loops if self.use_imse else 0

    def validate(self) -> List[str]:
        problems = []
        for name in ("num_attributes", "num_patches", "width", "num_groups", "mlp_ratio"):
            if getattr(self, name) < 1:
                problems.append(f"dsvtm.{name} must be >= 1")
        if self.num_groups >= 1 and self.group_width < 1:
            problems.append("dsvtm.num_groups must not exceed num_attributes (N_s / N_g >= 1)")
        if self.patch_hidden <= self.num_patches:
            problems.append("dsvtm.hidden_patches must be greater than num_patches (N_h > N_v)")
        if self.loops < 1:
            problems.append("dsvtm.loops (R) must be >= 1")
        if self.modules < 1:
            problems.append("dsvtm.modules (Z) must be >= 1")
        if self.ln_eps <= 0:
            problems.append("dsvtm.ln_eps must be positive")
        return problems


@dataclass
class BackboneConfig:
    """Toy patch encoder standing in for a pretrained vision transformer.

    Patch count and width are taken from DsvtmConfig; attention is single-head.
    """

    num_layers: int = 4             # L
    input_width: Optional[int] = None  # D_in, defaults to the model width
    mode: str = "toy-encoder"       # "toy-encoder" | "identity"
    side_branch: bool = False
    mlp_ratio: int = 4

    heads = 1

    def validate(self, modules: int = 1) -> List[str]:
        problems = []
        if self.mode not in ("toy-encoder", "identity"):
            problems.append(f"backbone.mode must be 'toy-encoder' or 'identity', got {self.mode!r}")
        if self.num_layers < modules:
            problems.append(f"backbone.num_layers ({self.num_layers}) must be >= dsvtm.modules ({modules})")
        if self.input_width is not None and self.input_width < 1:
            problems.append("backbone.input_width must be >= 1")
        return problems


@dataclass
class LossWeights:
    """Weights of the three-term objective."""

    lambda_sem: float = 0.5
    lambda_deb: float = 0.001
    tau: float = field(default_factory=lambda: settings.tau)

    def validate(self) -> List[str]:
        problems = []
        for name in ("lambda_sem", "lambda_deb", "tau"):
            value = getattr(self, name)
            if not isinstance(value, (int, float)) or value != value or value in (float("inf"), float("-inf")):
                problems.append(f"loss.{name} must be finite")
        if self.lambda_sem < 0 or self.lambda_deb < 0:
            problems.append("loss weights must be non-negative")
        if self.tau <= 0:
            problems.append("loss.tau must be positive")
        return problems


@dataclass
class TrainConfig:
    """Optimizer and loop settings."""

    epochs: int = 200
    batch_size: int = 16
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    checkpoint_interval: int = 0    # epochs between checkpoints, 0 = final only

    def validate(self) -> List[str]:
        problems = []
        if self.learning_rate < 0:
            problems.append("train.learning_rate must be >= 0")
        if self.batch_size < 1:
            problems.append("train.batch_size must be >= 1")
        if self.epochs < 0:
            problems.append("train.epochs must be >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            problems.append("train.beta1 and train.beta2 must lie in [0, 1)")
        if self.adam_eps <= 0:
            problems.append("train.adam_eps must be positive")
        if self.checkpoint_interval < 0:
            problems.append("train.checkpoint_interval must be >= 0")
        return problems


@dataclass
class GeneratorConfig:
    """Synthetic benchmark generation settings."""

    num_seen: int = 8               # C_s
    num_unseen: int = 4             # C_u
    num_attributes: int = 12        # N_s
    num_groups: int = 3             # N_g
    num_patches: int = 8            # N_v
    input_width: int = 32           # D_in
    semantic_width: Optional[int] = None  # D_sem, defaults to input_width
    variants: int = 3               # G
    noise: float = 0.1              # sigma
    samples_per_class: int = 40
    active_per_class: Optional[int] = None
    continuous: bool = False
    test_fraction: float = 0.2
    seed: int = field(default_factory=lambda: settings.seed)

    @property
    def active_count(self) -> int:
        if self.active_per_class is not None:
            return self.active_per_class
        return max(1, min(self.num_patches // 2, self.num_attributes // 3))

    def validate(self) -> List[str]:
        problems = []
        if self.variants < 1:
            problems.append("data.variants (G) must be >= 1")
        if self.num_seen < 1 or self.num_unseen < 1:
            problems.append("data.num_seen and data.num_unseen must be >= 1")
        if self.num_attributes < 1 or self.num_groups < 1 or self.num_groups > self.num_attributes:
            problems.append("data.num_groups must lie in [1, num_attributes]")
        if self.active_count < 1:
            problems.append("data.active_per_class must be >= 1")
        if self.active_count > self.num_patches:
            problems.append(
                f"infeasible: {self.active_count} active attributes per class but only "
                f"{self.num_patches} patches"
            )
        if self.active_count > self.num_attributes:
            problems.append("data.active_per_class cannot exceed num_attributes")
        if self.noise < 0:
            problems.append("data.noise must be >= 0")
        if self.samples_per_class < 1:
            problems.append("data.samples_per_class must be >= 1")
        if not 0 <= self.test_fraction < 1:
            problems.append("data.test_fraction must lie in [0, 1)")
        return problems


_SECTIONS = {
    "dsvtm": DsvtmConfig,
    "backbone": BackboneConfig,
    "loss": LossWeights,
    "train": TrainConfig,
    "data": GeneratorConfig,
}
_TOP_LEVEL = ("seed", "dataset_path", "output_dir")


@dataclass
class RunConfig:
    """Merged, fully serializable view of one run."""

    dsvtm: DsvtmConfig = field(default_factory=DsvtmConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: GeneratorConfig = field(default_factory=GeneratorConfig)
    seed: int = field(default_factory=lambda: settings.seed)
    dataset_path: Optional[str] = None
    output_dir: str = field(default_factory=lambda: settings.output_dir)

    def validate(self) -> List[str]:
        problems = []
        problems.extend(self.dsvtm.validate())
        problems.extend(self.backbone.validate(self.dsvtm.modules))
        problems.extend(self.loss.validate())
        problems.extend(self.train.validate())
        problems.extend(self.data.validate())
        input_width = self.backbone.input_width or self.dsvtm.width
        if self.backbone.mode == "identity" and input_width != self.dsvtm.width:
            problems.append("identity backbone requires input_width == dsvtm.width")
        return problems

    def check(self) -> "RunConfig":
        """Raise ConfigError when any invariant is violated."""
        problems = self.validate()
        if problems:
            raise ConfigError("; ".join(problems))
        return self

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: Dict[str, Any]) -> "RunConfig":
        unknown = set(raw) - set(_SECTIONS) - set(_TOP_LEVEL)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        base = cls()
        updates: Dict[str, Any] = {}
        for section, section_cls in _SECTIONS.items():
            if section in raw:
                updates[section] = _build_section(section, section_cls, raw[section], getattr(base, section))
        for key in _TOP_LEVEL:
            if key in raw:
                updates[key] = _coerce(key, raw[key], get_type_hints(cls)[key])
        return replace(base, **updates)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            with open(path, "r", encoding="utf-8") as f:
                raw = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
        if not isinstance(raw, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        return cls.from_dict(raw)

    def save(self, path) -> Path:
        path = Path(path)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
        return path

    def with_overrides(self, overrides: Dict[str, Any]) -> "RunConfig":
        """Apply dotted-key overrides such as {"train.epochs": 5}; None values are skipped."""
        raw = self.to_dict()
        for dotted, value in overrides.items():
            if value is None:
                continue
            parts = dotted.split(".")
            target = raw
            for part in parts[:-1]:
                if part not in target or not isinstance(target[part], dict):
                    raise ConfigError(f"unknown config key: {dotted}")
                target = target[part]
            if parts[-1] not in target:
                raise ConfigError(f"unknown config key: {dotted}")
            target[parts[-1]] = value
        return RunConfig.from_dict(raw)

    def with_dataset_shape(self, num_attributes: int, num_groups: int, num_patches: int, input_width: int) -> "RunConfig":
        """Bind the model shape to a dataset's dimensions."""
        dsvtm = replace(
            self.dsvtm,
            num_attributes=num_attributes,
            num_groups=num_groups,
            num_patches=num_patches,
        )
        backbone = replace(self.backbone, input_width=input_width)
        return replace(self, dsvtm=dsvtm, backbone=backbone)


def _coerce(where: str, value: Any, annotation) -> Any:
    """Check one JSON value against a field annotation; ints are accepted for floats."""
    allowed = get_args(annotation) if get_origin(annotation) is Union else (annotation,)
    if value is None:
        if type(None) in allowed:
            return None
        raise ConfigError(f"config value {where} must not be null")
    for kind in allowed:
        if kind is bool and isinstance(value, bool):
            return value
        if kind is int and isinstance(value, int) and not isinstance(value, bool):
            return value
        if kind is float and isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        if kind is str and isinstance(value, str):
            return value
    names = " or ".join(getattr(kind, "__name__", str(kind)) for kind in allowed)
    raise ConfigError(f"config value {where} must be {names}, got {type(value).__name__} {value!r}")


def _build_section(name: str, section_cls, values: Any, current):
    if not isinstance(values, dict):
        raise ConfigError(f"config section '{name}' must be an object")
    hints = get_type_hints(section_cls)
    unknown = set(values) - {f.name for f in fields(section_cls)}
    if unknown:
        raise ConfigError(f"unknown keys in '{name}': {sorted(unknown)}")
    checked = {key: _coerce(f"{name}.{key}", value, hints[key]) for key, value in values.items()}
    return replace(current, **checked)


def model_signature(config: RunConfig) -> Dict[str, Any]:
    """Fields that determine parameter names and shapes; used to match checkpoints."""
    signature = {f"dsvtm.{k}": v for k, v in asdict(config.dsvtm).items()}
    signature.update({f"backbone.{k}": v for k, v in asdict(config.backbone).items()})
    return signature
