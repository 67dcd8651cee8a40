"""
Dataset Presets
===============
Benchmark-shaped configurations for the synthetic generator: class splits,
attribute counts and attribute-group counts of common GZSL benchmarks, at
desk-scale sample counts.
"""

from dataclasses import dataclass, replace
from typing import Dict, List

from .config import GeneratorConfig, RunConfig
from .errors import ConfigError


@dataclass
class DatasetPreset:
    """Shape metadata for one benchmark."""
    code: str
    name: str
    description: str
    num_seen: int
    num_unseen: int
    num_attributes: int
    num_groups: int
    lambda_deb: float
    num_patches: int = 8
    input_width: int = 32
    variants: int = 3
    noise: float = 0.1
    samples_per_class: int = 40

    @property
    def num_classes(self) -> int:
        return self.num_seen + self.num_unseen


PRESETS: Dict[str, DatasetPreset] = {

    "cub-shape": DatasetPreset(
        code="cub-shape",
        name="CUB-shaped",
        description="Fine-grained birds: 200 classes (150 | 50), 312 attributes in 28 groups",
        num_seen=150,
        num_unseen=50,
        num_attributes=312,
        num_groups=28,
        lambda_deb=0.001,
        num_patches=16,
        samples_per_class=4,
    ),

    "sun-shape": DatasetPreset(
        code="sun-shape",
        name="SUN-shaped",
        description="Scenes: 717 classes (645 | 72), 102 attributes in 4 groups",
        num_seen=645,
        num_unseen=72,
        num_attributes=102,
        num_groups=4,
        lambda_deb=0.001,
        num_patches=16,
        samples_per_class=2,
    ),

    "awa2-shape": DatasetPreset(
        code="awa2-shape",
        name="AwA2-shaped",
        description="Coarse-grained animals: 50 classes (40 | 10), 85 attributes in 9 groups",
        num_seen=40,
        num_unseen=10,
        num_attributes=85,
        num_groups=9,
        lambda_deb=0.1,
        num_patches=16,
        samples_per_class=10,
    ),

    "toy": DatasetPreset(
        code="toy",
        name="Toy",
        description="Desk-scale learnability benchmark: 12 classes (8 | 4), 12 attributes in 3 groups",
        num_seen=8,
        num_unseen=4,
        num_attributes=12,
        num_groups=3,
        lambda_deb=0.001,
    ),
}


def get_preset(code: str) -> DatasetPreset:
    if code not in PRESETS:
        raise ConfigError(f"unknown preset '{code}' (choose from {', '.join(PRESETS)})")
    return PRESETS[code]


def get_preset_list() -> List[str]:
    return list(PRESETS.keys())


def apply_preset(config: RunConfig, code: str) -> RunConfig:
    """Overlay a preset's dataset shape and debiasing weight onto a run config."""
    preset = get_preset(code)
    data: GeneratorConfig = replace(
        config.data,
        num_seen=preset.num_seen,
        num_unseen=preset.num_unseen,
        num_attributes=preset.num_attributes,
        num_groups=preset.num_groups,
        num_patches=preset.num_patches,
        input_width=preset.input_width,
        variants=preset.variants,
        noise=preset.noise,
        samples_per_class=preset.samples_per_class,
    )
    loss = replace(config.loss, lambda_deb=preset.lambda_deb)
    return replace(config, data=data, loss=loss)
