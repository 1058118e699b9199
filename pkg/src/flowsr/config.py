"""Experiment configuration: typed dataclasses, a TOML-subset reader/writer,
and file/flag merging.

The on-disk format is a TOML subset: ``[section]`` headers (one dotted level
like ``[train.denoiser]``), ``key = value`` lines, values being quoted
strings, booleans, ints or floats.  Floats are written with ``repr`` so a
written config parses back to exactly equal values.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .seqcore import ConfigError


@dataclass
class PathsConfig:
    workdir: str = "work"


@dataclass
class SceneConfig:
    height: int = 64
    width: int = 64
    n_frames: int = 8
    n_train: int = 30
    n_heldout: int = 10
    sprites_min: int = 1
    sprites_max: int = 3
    speed: float = 2.0
    bg_speed: float = 1.0
    smoothness: float = 0.25


@dataclass
class DegradeConfig:
    blur_sigma: float = 1.0
    downscale: int = 4
    noise_sigma: float = 0.02
    quant_levels: int = 64


@dataclass
class ScheduleConfig:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    variance_mode: str = "posterior"


@dataclass
class GuidanceSettings:
    scale: float = 1.0
    charbonnier_eps: float = 1e-3
    eval_point: str = "after_ddpm_step"


@dataclass
class LossConfig:
    alpha: float = 0.5
    beta: float = 0.5
    gamma: float = 0.025
    w: float = 3.0


@dataclass
class FlowConfig:
    levels: int = 3
    iters: int = 100
    alpha: float = 15.0
    occl_alpha1: float = 0.01
    occl_alpha2: float = 0.5


@dataclass
class ModelConfig:
    width: int = 32
    latent_channels: int = 8
    denoiser_width: int = 32


@dataclass
class TrainStage:
    iters: int = 500
    batch_size: int = 4
    lr: float = 2e-4


@dataclass
class SampleConfig:
    steps: int = 50
    cfw_weight: float = 0.5
    split: str = "all"


@dataclass
class RunConfig:
    seed: int = 0
    workers: int = 1
    mds_on: bool = True
    tsd_on: bool = True


@dataclass
class ExperimentConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    scene: SceneConfig = field(default_factory=SceneConfig)
    degrade: DegradeConfig = field(default_factory=DegradeConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    guidance: GuidanceSettings = field(default_factory=GuidanceSettings)
    losses: LossConfig = field(default_factory=LossConfig)
    flow: FlowConfig = field(default_factory=FlowConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train_autoencoder: TrainStage = field(default_factory=lambda: TrainStage(iters=2000))
    train_denoiser: TrainStage = field(default_factory=lambda: TrainStage(iters=1500))
    train_finetune: TrainStage = field(default_factory=lambda: TrainStage(iters=250, batch_size=1))
    sample: SampleConfig = field(default_factory=SampleConfig)
    run: RunConfig = field(default_factory=RunConfig)

    _SECTIONS = {
        "paths": PathsConfig,
        "scene": SceneConfig,
        "degrade": DegradeConfig,
        "schedule": ScheduleConfig,
        "guidance": GuidanceSettings,
        "losses": LossConfig,
        "flow": FlowConfig,
        "model": ModelConfig,
        "train.autoencoder": TrainStage,
        "train.denoiser": TrainStage,
        "train.finetune": TrainStage,
        "sample": SampleConfig,
        "run": RunConfig,
    }

    @staticmethod
    def _attr(section: str) -> str:
        return section.replace(".", "_")

    def to_dict(self) -> dict:
        return {
            section: asdict(getattr(self, self._attr(section)))
            for section in self._SECTIONS
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        cfg = cls()
        for section, payload in data.items():
            if section not in cls._SECTIONS:
                raise ConfigError(f"unknown config section [{section}]")
            klass = cls._SECTIONS[section]
            valid = {f.name: f.type for f in fields(klass)}
            target = getattr(cfg, cls._attr(section))
            for key, value in payload.items():
                if key not in valid:
                    raise ConfigError(f"unknown key {key!r} in section [{section}]")
                current = getattr(target, key)
                if isinstance(current, bool) != isinstance(value, bool) or not isinstance(
                    value, type(current) if not isinstance(current, float) else (int, float)
                ):
                    raise ConfigError(
                        f"[{section}] {key}: expected {type(current).__name__}, "
                        f"got {type(value).__name__}"
                    )
                setattr(target, key, float(value) if isinstance(current, float) else value)
        return cfg


# ---------------------------------------------------------------------------
# TOML-subset parsing and writing
# ---------------------------------------------------------------------------


def _parse_value(text: str, where: str):
    text = text.strip()
    if not text:
        raise ConfigError(f"{where}: empty value")
    if text.startswith('"'):
        if not text.endswith('"') or len(text) < 2:
            raise ConfigError(f"{where}: unterminated string")
        return text[1:-1].replace('\\"', '"').replace("\\\\", "\\")
    if text == "true":
        return True
    if text == "false":
        return False
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        raise ConfigError(f"{where}: cannot parse value {text!r}") from None


def parse_toml(text: str) -> dict:
    """Parse the TOML subset into a {section: {key: value}} dict."""
    data: dict = {}
    section = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        where = f"line {lineno}"
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"{where}: malformed section header {line!r}")
            section = line[1:-1].strip()
            if not section:
                raise ConfigError(f"{where}: empty section name")
            data.setdefault(section, {})
            continue
        if "=" not in line:
            raise ConfigError(f"{where}: expected key = value, got {line!r}")
        if section is None:
            raise ConfigError(f"{where}: key outside any section")
        key, _, value = line.partition("=")
        data[section][key.strip()] = _parse_value(value, where)
    return data


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, str):
        escaped = value.replace("\\", "\\\\").replace('"', '\\"')
        return f'"{escaped}"'
    raise ConfigError(f"cannot serialize value of type {type(value).__name__}")


def dump_toml(data: dict) -> str:
    lines = []
    for section, payload in data.items():
        lines.append(f"[{section}]")
        for key, value in payload.items():
            lines.append(f"{key} = {_format_value(value)}")
        lines.append("")
    return "\n".join(lines)


def load_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    """Defaults <- config file <- flag overrides, in increasing precedence.

    ``overrides`` maps dotted keys like ``"run.seed"`` to values.
    """
    data = {}
    if path is not None:
        text = Path(path).read_text()
        data = parse_toml(text)
    cfg = ExperimentConfig.from_dict(data)
    for dotted, value in (overrides or {}).items():
        section, _, key = dotted.rpartition(".")
        if section not in ExperimentConfig._SECTIONS:
            raise ConfigError(f"unknown override section {section!r}")
        target = getattr(cfg, ExperimentConfig._attr(section))
        if not hasattr(target, key):
            raise ConfigError(f"unknown override key {dotted!r}")
        current = getattr(target, key)
        setattr(target, key, float(value) if isinstance(current, float) else value)
    return cfg


def save_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(dump_toml(cfg.to_dict()))
