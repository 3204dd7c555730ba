"""Flat key = value run configuration with canonical content hashing.

Sections mirror the package's tunables; unknown sections or keys are
rejected so a config hash always covers exactly the knobs that exist.
Defaults follow the published settings where stated (50 DDIM steps,
cross-replace ratio 0.8, attention threshold 0.3) and this package's
choices elsewhere.
"""

from __future__ import annotations

import configparser
import hashlib
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .control import ControllerConfig
from .denoiser import default_arch
from .errors import ConfigError
from .schedule import NoiseSchedule, SamplerConfig, build_schedule


@dataclass
class ScheduleSection:
    total_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    spacing: str = "linear"


@dataclass
class SamplerSection:
    seed: int = 0
    num_ddim_steps: int = 50
    eta: float = 0.0
    guidance_scale: float = 1.0


@dataclass
class ControllerSection:
    cross_replace_ratio: float = 0.8
    injection_ratio: float = 0.8
    injection_weight: float = 0.5
    attention_threshold: float = 0.3
    local_blend_enabled: bool = True
    self_attention_replace_ratio: float = 0.0
    blend_start_ratio: float = 0.2
    two_pass_edit: bool = False


@dataclass
class ModelSection:
    width: int = 32
    heads: int = 2
    cond_dim: int = 32
    levels: int = 2
    blocks_per_level: int = 2
    k_subject: int = 4
    max_tokens: int = 16
    autoencoder: str = "pool2x"
    fusion_mode: str = "adjacent"


@dataclass
class TrainSection:
    steps: int = 2000
    lr: float = 2e-3
    batch_size: int = 2
    seed: int = 0
    subject_prob: float = 0.5
    null_prob: float = 0.1
    attr_drop_prob: float = 0.5
    probe_steps: int = 600
    probe_lr: float = 3e-3
    probe_batch: int = 16


@dataclass
class FinetuneSection:
    steps: int = 200
    lr: float = 1e-4


@dataclass
class CorpusSection:
    n_clips: int = 2000
    n_frames: int = 8
    resolution: int = 64
    seed: int = 0
    val_fraction: float = 0.1


@dataclass
class MetricsSection:
    feature_source: str = "subject_encoder"  # or "pixels"


@dataclass
class AblateSection:
    n_cases: int = 20
    seed: int = 7
    finetune_steps: int = 50


@dataclass
class RunConfig:
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    controller: ControllerSection = field(default_factory=ControllerSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    finetune: FinetuneSection = field(default_factory=FinetuneSection)
    corpus: CorpusSection = field(default_factory=CorpusSection)
    metrics: MetricsSection = field(default_factory=MetricsSection)
    ablate: AblateSection = field(default_factory=AblateSection)

    def canonical_text(self) -> str:
        """Stable under key reordering: sections and keys sorted."""
        lines = []
        data = asdict(self)
        for section in sorted(data):
            lines.append(f"[{section}]")
            for key in sorted(data[section]):
                lines.append(f"{key} = {_format_value(data[section][key])}")
            lines.append("")
        return "\n".join(lines)

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_text().encode("utf-8")).hexdigest()

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.canonical_text(), encoding="utf-8")

    # runtime-object builders
    def build_schedule(self) -> NoiseSchedule:
        return build_schedule(
            self.schedule.total_steps,
            self.schedule.beta_start,
            self.schedule.beta_end,
            self.schedule.spacing,
            num_ddim_steps=self.sampler.num_ddim_steps,
        )

    def sampler_config(self) -> SamplerConfig:
        return SamplerConfig(
            seed=self.sampler.seed,
            num_ddim_steps=self.sampler.num_ddim_steps,
            eta=self.sampler.eta,
            guidance_scale=self.sampler.guidance_scale,
        )

    def controller_config(self) -> ControllerConfig:
        c = self.controller
        return ControllerConfig(
            cross_replace_ratio=c.cross_replace_ratio,
            injection_ratio=c.injection_ratio,
            injection_weight=c.injection_weight,
            attention_threshold=c.attention_threshold,
            local_blend_enabled=c.local_blend_enabled,
            self_attention_replace_ratio=c.self_attention_replace_ratio,
            blend_start_ratio=c.blend_start_ratio,
            two_pass_edit=c.two_pass_edit,
        )

    def arch(self) -> dict:
        m = self.model
        return default_arch(
            width=m.width, heads=m.heads, cond_dim=m.cond_dim,
            levels=m.levels, blocks_per_level=m.blocks_per_level,
        )


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def _parse_value(raw: str, target_type: type):
    raw = raw.strip()
    if target_type is bool:
        lowered = raw.lower()
        if lowered in ("true", "1", "yes", "on"):
            return True
        if lowered in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"cannot parse boolean from {raw!r}")
    try:
        return target_type(raw)
    except ValueError:
        raise ConfigError(f"cannot parse {target_type.__name__} from {raw!r}") from None


def load_config(path: str | Path | None = None, text: str | None = None) -> RunConfig:
    """Parse a config file; unknown sections/keys raise ConfigError."""
    cfg = RunConfig()
    if path is None and text is None:
        return cfg
    parser = configparser.ConfigParser()
    parser.optionxform = str  # keys are case-sensitive
    if text is None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"no such config file: {p}")
        text = p.read_text(encoding="utf-8")
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    section_objs = {f.name: getattr(cfg, f.name) for f in fields(cfg)}
    for section in parser.sections():
        if section not in section_objs:
            raise ConfigError(f"unknown config section [{section}]")
        obj = section_objs[section]
        known = {f.name: f.type for f in fields(obj)}
        types = {
            f.name: type(getattr(obj, f.name)) for f in fields(obj)
        }
        for key, raw in parser.items(section):
            if key not in known:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            setattr(obj, key, _parse_value(raw, types[key]))
    return cfg


def output_root() -> Path:
    """Default output root; CAPVID_HOME overrides."""
    return Path(os.environ.get("CAPVID_HOME", "capvid_out"))
