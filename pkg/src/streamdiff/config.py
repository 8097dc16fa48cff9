"""Flat ``key = value`` run configuration.

Lines starting with ``#`` and blank lines are ignored. Values are parsed
according to the type of the default; tuples are comma separated. Unknown
keys and unparsable values raise ``ConfigError``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .backbone import BackboneConfig
from .data import DataConfig
from .flow import StepSchedule


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    # data
    samples: int = 256
    frames: int = 12
    tokens: int = 4
    channels: int = 16
    garment_channels: int = 4
    pixel_dim: int = 64
    codebook_size: int = 8
    garment_noise: float = 0.6
    # backbone
    layers: int = 2
    heads: int = 4
    head_dim: int = 8
    chunk: int = 3
    time_dim: int = 16
    # teacher pre-training
    teacher_steps: int = 1500
    teacher_lr: float = 3e-3
    batch: int = 16
    max_frame_offset: int = 60
    # teacher forcing
    tf_steps: int = 1500
    tf_lr: float = 1e-3
    tf_schedule_fraction: float = 0.7
    # distribution matching
    dmd_steps: int = 200
    dmd_batch: int = 8
    gen_lr: float = 1e-4
    fake_lr: float = 4e-4
    tau: float = 0.2
    fake_ratio: int = 5
    schedule: tuple = (1000, 750, 500, 250)
    reward_on_pixels: bool = False
    # streaming / evaluation
    cache_size: int = 11
    eval_chunks: int = 12
    switch_chunk: int = 6
    continuity_threshold: float = 3.0
    timing_chunks: int = 80
    timing_batch: int = 8
    flatness_tolerance: float = 0.2

    def __post_init__(self):
        if self.frames % self.chunk:
            raise ConfigError(f"frames={self.frames} must be a multiple of chunk={self.chunk}")
        if self.max_frame_offset % self.chunk:
            raise ConfigError("max_frame_offset must be a multiple of chunk")
        if not 0 < self.switch_chunk < self.eval_chunks:
            raise ConfigError("switch_chunk must fall inside the evaluation rollout")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if self.cache_size < 4:
            raise ConfigError("cache_size must be at least 4")
        try:
            StepSchedule(self.schedule)
            self.backbone()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def data(self) -> DataConfig:
        return DataConfig(
            tokens=self.tokens,
            channels=self.channels,
            garment_channels=self.garment_channels,
            pixel_dim=self.pixel_dim,
            codebook_size=self.codebook_size,
            garment_noise=self.garment_noise,
            seed=self.seed,
        )

    def backbone(self) -> BackboneConfig:
        return BackboneConfig(
            layers=self.layers,
            heads=self.heads,
            head_dim=self.head_dim,
            d_model=self.heads * self.head_dim,
            tokens=self.tokens,
            channels=self.channels,
            time_dim=self.time_dim,
            chunk=self.chunk,
        )

    def step_schedule(self) -> StepSchedule:
        return StepSchedule(self.schedule)


def _parse(raw: str, default):
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        return tuple(int(x) for x in raw.replace(" ", "").split(",") if x)
    return raw


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    base = base or RunConfig()
    defaults = asdict(base)
    changes = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in defaults:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            changes[key] = _parse(raw, defaults[key])
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from exc
    return replace(base, **changes)


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


def dump_config(cfg: RunConfig) -> str:
    out = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        out.append(f"{f.name} = {','.join(map(str, v)) if isinstance(v, tuple) else v}")
    return "\n".join(out) + "\n"
