# Copyright 2024 Xanadu Quantum Technologies Inc.

# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at

#     http://www.apache.org/licenses/LICENSE-2.0

# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.
"""
The user-facing run configuration: one dataclass per section, TOML loading with strict key
checking, command-line overrides and a stable hash of the resolved values.

Precedence is command-line flags, then the config file, then the defaults below.
"""

import dataclasses
import hashlib
import json
import pathlib
from dataclasses import dataclass, field
from typing import Any, Dict, Mapping, Optional, Tuple, Union

from dam.classifier import ClassifierConfig, NeuronSelector, noised_config
from dam.diffusion import DiffusionConfig
from dam.sampler import GuidanceConfig
from dam.utils.exceptions import InvalidInputError, ParseError
from dam.utils.toml import flatten_sections, toml_dumps_flat, toml_loads

NOISE_SOURCES = ("closed_form", "reverse")


@dataclass(frozen=True)
class DataSection:
    """Dataset generation."""

    source: str = "synthetic"
    off_root: str = ""
    classes: int = 4
    per_class: int = 200
    n_points: int = 256
    jitter: float = 0.01
    test_fraction: float = 0.2
    surface_sampling: bool = False
    seed: int = 7

    def __post_init__(self):
        for key in ("classes", "per_class", "n_points"):
            if getattr(self, key) < 1:
                raise InvalidInputError(f"data.{key} must be at least 1, got {getattr(self, key)}")


@dataclass(frozen=True)
class ClassifierSection:
    """The explained classifier."""

    per_point_widths: Tuple[int, ...] = (64, 128, 256)
    head_widths: Tuple[int, ...] = (128,)
    use_tnet: bool = False
    epochs: int = 30
    batch_size: int = 32
    lr_start: float = 1e-2
    lr_end: float = 1e-4
    seed: int = 0


@dataclass(frozen=True)
class NoisedSection:
    """The noise-aware twin, trained on top of the explained classifier."""

    noise_source: str = "closed_form"
    copies: int = 4
    epochs: int = 20
    batch_size: int = 32
    lr_start: float = 5e-4
    lr_end: float = 5e-5
    seed: int = 1


# pylint: disable=too-many-instance-attributes
@dataclass(frozen=True)
class DiffusionSection:
    """The label-conditioned diffusion model."""

    n_timesteps: int = 250
    schedule: str = "cosine"
    cosine_offset: float = 0.008
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    latent_dim: int = 128
    kl_weight: float = 1e-3
    encoder_widths: Tuple[int, ...] = (64, 128, 256)
    n_heads: int = 3
    widths: Tuple[int, ...] = (64, 128, 256)
    attention_mode: str = "pdt"
    iterations: int = 20000
    batch_size: int = 32
    lr_start: float = 1e-3
    lr_end: float = 1e-4
    seed: int = 2


@dataclass(frozen=True)
class GuidanceSection:
    """Explanation sampling."""

    scale: float = 1e-4
    weight_shape: str = "linear"
    activation: str = "log_softmax"
    use_dual: bool = True
    init_mode: str = "random_x_then_encode"
    target: str = "output"
    per_class: int = 10
    state_stride: int = 10
    seed: int = 3


@dataclass(frozen=True)
class SaliencySection:
    """Attribution of explanations."""

    method: str = "igd"
    stride: int = 50
    ig_steps: int = 256
    reduction: str = "sum"
    recompute_mode: str = ""
    seed: int = 4


@dataclass(frozen=True)
class MetricsSection:
    """Evaluation."""

    real_per_class: int = 5
    symmetric_cd: bool = False
    full_covariance: bool = False
    faithfulness: bool = False
    faithfulness_j: float = 1.0
    ablation: str = "centroid"
    seed: int = 5


SECTIONS = {
    "data": DataSection,
    "classifier": ClassifierSection,
    "noised": NoisedSection,
    "diffusion": DiffusionSection,
    "guidance": GuidanceSection,
    "saliency": SaliencySection,
    "metrics": MetricsSection,
}


def _coerce(section: str, key: str, default: Any, value: Any) -> Any:
    """Convert ``value`` to the type of the field default."""
    where = f"{section}.{key}"
    try:
        if isinstance(default, bool):
            if isinstance(value, str):
                if value.lower() not in ("true", "false"):
                    raise ValueError(value)
                return value.lower() == "true"
            if not isinstance(value, bool):
                raise ValueError(value)
            return value
        if isinstance(default, tuple):
            if isinstance(value, str):
                value = [v for v in value.replace(",", " ").split() if v]
            return tuple(int(v) for v in value)
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if isinstance(default, float):
            return float(value)
        return str(value)
    except (TypeError, ValueError) as e:
        raise InvalidInputError(
            f"Invalid value {value!r} for {where} (expected {type(default).__name__})"
        ) from e


@dataclass(frozen=True)
class RunConfig:
    """Every setting of a pipeline run, grouped by section."""

    data: DataSection = field(default_factory=DataSection)
    classifier: ClassifierSection = field(default_factory=ClassifierSection)
    noised: NoisedSection = field(default_factory=NoisedSection)
    diffusion: DiffusionSection = field(default_factory=DiffusionSection)
    guidance: GuidanceSection = field(default_factory=GuidanceSection)
    saliency: SaliencySection = field(default_factory=SaliencySection)
    metrics: MetricsSection = field(default_factory=MetricsSection)

    def __post_init__(self):
        if self.noised.noise_source not in NOISE_SOURCES:
            raise InvalidInputError(
                f"Unknown noise source '{self.noised.noise_source}', expected {NOISE_SOURCES}"
            )
        if self.data.source not in ("synthetic", "off"):
            raise InvalidInputError(f"Unknown data source '{self.data.source}'")

    def to_document(self) -> Dict[str, Dict[str, Any]]:
        """Nested ``{section: {key: value}}`` representation."""
        return {name: dataclasses.asdict(getattr(self, name)) for name in SECTIONS}

    def with_overrides(self, overrides: Mapping[str, Any]) -> "RunConfig":
        """Apply ``{"section.key": value}`` overrides; ``None`` values are ignored.

        Raises:
            InvalidInputError: unknown section or key, or a value of the wrong type
        """
        document: Dict[str, Dict[str, Any]] = {}
        for dotted, value in overrides.items():
            if value is None:
                continue
            section, _, key = dotted.partition(".")
            document.setdefault(section, {})[key] = value
        return _merge(self, document)

    def dumps(self) -> str:
        """The ``config.resolved`` text."""
        return toml_dumps_flat(self.to_document(), header=f"config_hash = {self.hash()}")

    def hash(self) -> str:
        """First 12 hex digits of the SHA-256 of the canonical JSON of all values."""
        canonical = json.dumps(self.to_document(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]

    def classifier_config(self, n_classes: int, dim: int = 3) -> ClassifierConfig:
        """Configuration of the explained classifier."""
        c = self.classifier
        return ClassifierConfig(
            n_classes=n_classes,
            dim=dim,
            per_point_widths=c.per_point_widths,
            head_widths=c.head_widths,
            use_tnet=c.use_tnet,
            epochs=c.epochs,
            batch_size=c.batch_size,
            lr_start=c.lr_start,
            lr_end=c.lr_end,
        )

    def noised_config(
        self, base: ClassifierConfig, n_timesteps: Optional[int] = None
    ) -> ClassifierConfig:
        """Configuration of the noise-aware twin of ``base`` for a chain of ``n_timesteps`` steps
        (default ``diffusion.n_timesteps``)."""
        n = self.noised
        return noised_config(
            base,
            self.diffusion.n_timesteps if n_timesteps is None else n_timesteps,
            epochs=n.epochs,
            batch_size=n.batch_size,
            lr_start=n.lr_start,
            lr_end=n.lr_end,
        )

    def diffusion_config(self, n_classes: int, n_points: int, dim: int = 3) -> DiffusionConfig:
        """Configuration of the diffusion model."""
        values = dataclasses.asdict(self.diffusion)
        values.pop("seed")
        return DiffusionConfig(n_classes=n_classes, n_points=n_points, dim=dim, **values)

    def guidance_config(self) -> GuidanceConfig:
        """Guidance settings; the per-sample seeds derive from ``guidance.seed``."""
        g = self.guidance
        return GuidanceConfig(
            scale=g.scale,
            weight_shape=g.weight_shape,
            activation=g.activation,
            use_dual=g.use_dual,
            target=NeuronSelector.parse(g.target),
            init_mode=g.init_mode,
            seed=g.seed,
        )


def _merge(config: RunConfig, document: Mapping[str, Mapping[str, Any]]) -> RunConfig:
    replacements = {}
    for section, values in document.items():
        if section not in SECTIONS:
            raise InvalidInputError(
                f"Unknown config section '{section}', expected one of {sorted(SECTIONS)}"
            )
        current = getattr(config, section)
        defaults = dataclasses.asdict(current)
        changes = {}
        for key, value in values.items():
            if key not in defaults:
                raise InvalidInputError(
                    f"Unknown key '{section}.{key}', expected one of {sorted(defaults)}"
                )
            changes[key] = _coerce(section, key, defaults[key], value)
        replacements[section] = dataclasses.replace(current, **changes)
    return dataclasses.replace(config, **replacements)


def parse_config(text: str) -> RunConfig:
    """Parse ``section.key = value`` TOML text on top of the defaults.

    Raises:
        ParseError: the text is not valid TOML
        InvalidInputError: unknown sections or keys, or mistyped values
    """
    try:
        document = flatten_sections(toml_loads(text))
    except ValueError as e:
        raise ParseError(f"Invalid config file: {e}") from e
    return _merge(RunConfig(), document)


def load_config(path: Union[str, pathlib.Path, None]) -> RunConfig:
    """Read a config file; ``None`` gives the defaults."""
    if path is None:
        return RunConfig()
    with open(path, "r", encoding="utf-8") as f:
        return parse_config(f.read())


def resolve_config(
    config_file: Optional[Union[str, pathlib.Path]],
    resolved_file: Optional[pathlib.Path],
    overrides: Mapping[str, Any],
) -> RunConfig:
    """Flags over the explicit config file (else the run directory's snapshot) over defaults."""
    source = config_file
    if source is None and resolved_file is not None and resolved_file.exists():
        source = resolved_file
    return load_config(source).with_overrides(overrides)
