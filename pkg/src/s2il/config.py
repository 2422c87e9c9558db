"""Experiment configuration and its flat ``section.key = value`` text format.

Example::

    # comments start with '#'
    data.classes = 10
    data.noise = 1.5
    stream.base = 5
    train.epochs = 30
    ssim.p = 0.1
    sweep.modes = ['none', 's2il']
    seeds = [0, 1, 2]

Values are Python literals (numbers, strings, lists, tuples, booleans,
``None``). Bare words that are not literals are read as strings.
"""

from __future__ import annotations

import ast
import dataclasses
import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .distill import SSIMParams
from .engine import DISTILL_MODES, TrainConfig
from .errors import ConfigError, S2ILError
from .exemplar import POLICIES
from .netlib import LAST_ACTIVATIONS


@dataclass
class DataConfig:
    """Synthetic generator settings, or ``path`` to a dataset file."""

    path: str | None = None
    classes: int = 10
    per_class: int = 100
    image_size: int = 32
    channels: int = 1
    seed: int = 0
    noise: float = 1.5
    blob_gain: float = 0.5


@dataclass
class StreamConfig:
    base: int = 5
    increment: int = 1
    class_order_seed: int = 1993


@dataclass
class ModelConfig:
    channels: tuple = (16, 32, 64)
    pool: tuple = (True, True, False)
    proxies_per_class: int = 10
    margin: float = 0.6
    scale_init: float = 1.0
    scale_min: float = 1.0
    last_activation: str = "softplus"

    def spec(self, in_channels: int, image_size: int) -> dict:
        return {"in_channels": in_channels, "channels": tuple(self.channels), "pool": tuple(self.pool),
                "image_size": image_size, "proxies_per_class": self.proxies_per_class,
                "margin": self.margin, "scale_init": self.scale_init, "scale_min": self.scale_min,
                "last_activation": self.last_activation}


@dataclass
class ExemplarConfig:
    policy: str = "M2"
    budget: int = 10
    per_class: int = 2
    herding_normalize: bool = True


@dataclass
class SweepConfig:
    """Grid axes. An empty list means "use the base value" and counts as one point.

    ``components`` entries are strings over ``"lcs"`` naming the SSIM factors
    kept on (``"cs"`` drops luminance).
    """

    modes: list = field(default_factory=lambda: ["s2il"])
    p: list = field(default_factory=list)
    q: list = field(default_factory=list)
    r: list = field(default_factory=list)
    components: list = field(default_factory=list)
    include_oracle: bool = False


@dataclass
class OutputConfig:
    dir: str = "runs"
    checkpoints: bool = False


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    stream: StreamConfig = field(default_factory=StreamConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(
        dtype="float32", clip_norm=1.0, incremental_lr=0.02, finetune_lr=0.01))
    ssim: SSIMParams = field(default_factory=SSIMParams)
    exemplar: ExemplarConfig = field(default_factory=ExemplarConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    output: OutputConfig = field(default_factory=OutputConfig)
    seeds: list = field(default_factory=lambda: [0])
    gradcam: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError(f"duplicate seeds in {self.seeds}")
        bad = [m for m in self.sweep.modes if m not in DISTILL_MODES]
        if bad or not self.sweep.modes:
            raise ConfigError(f"sweep.modes must be a non-empty subset of {DISTILL_MODES}, got {self.sweep.modes}")
        for comp in self.sweep.components:
            if not isinstance(comp, str) or set(comp) - set("lcs"):
                raise ConfigError(f"component set {comp!r} may only contain the letters l, c, s")
        if self.exemplar.policy not in POLICIES:
            raise ConfigError(f"exemplar.policy must be one of {POLICIES}")
        if self.model.last_activation not in LAST_ACTIVATIONS:
            raise ConfigError(f"model.last_activation must be one of {tuple(LAST_ACTIVATIONS)}")
        if len(self.model.channels) != len(self.model.pool):
            raise ConfigError("model.channels and model.pool must have the same length")
        if self.stream.increment < 1 or self.stream.base < 1:
            raise ConfigError("stream.base and stream.increment must be positive")

    def grid_size(self) -> int:
        sw = self.sweep
        return len(sw.modes) * max(len(sw.p), 1) * max(len(sw.q), 1) * max(len(sw.r), 1) * max(len(sw.components), 1)

    def sweep_points(self) -> list["SweepPoint"]:
        """Expand the grid. Exponent and component axes only vary for ``s2il``."""
        sw = self.sweep
        points = []
        axes = itertools.product(sw.modes, sw.p or [None], sw.q or [None], sw.r or [None], sw.components or [None])
        for mode, p, q, r, comp in axes:
            points.append(SweepPoint(mode, p, q, r, comp))
        return points


@dataclass(frozen=True)
class SweepPoint:
    mode: str
    p: float | None = None
    q: float | None = None
    r: float | None = None
    components: str | None = None
    oracle: bool = False

    @property
    def name(self) -> str:
        if self.oracle:
            return "oracle"
        parts = [self.mode]
        for key in ("p", "q", "r"):
            val = getattr(self, key)
            if val is not None:
                parts.append(f"{key}{val:g}")
        if self.components is not None:
            parts.append(self.components)
        return "_".join(parts)

    def ssim_params(self, base: SSIMParams) -> SSIMParams:
        changes: dict[str, Any] = {k: getattr(self, k) for k in ("p", "q", "r") if getattr(self, k) is not None}
        if self.components is not None:
            changes.update(use_l="l" in self.components, use_c="c" in self.components,
                           use_s="s" in self.components)
        return dataclasses.replace(base, **changes)

    def train_config(self, base: TrainConfig, seed: int) -> TrainConfig:
        if self.oracle:
            return dataclasses.replace(base, seed=seed, distill="none", oracle=True)
        return dataclasses.replace(base, seed=seed, distill=self.mode, oracle=False)


ORACLE_POINT = SweepPoint("none", oracle=True)

_SECTIONS = ("data", "stream", "model", "train", "ssim", "exemplar", "sweep", "output")
_TOP_LEVEL = ("seeds", "gradcam")


def _parse_value(text: str) -> Any:
    text = text.strip()
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        if not text or any(ch in text for ch in "[](){},'\""):
            raise ConfigError(f"cannot parse value {text!r}") from None
        return text


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    """Parse the flat key-value format into an :class:`ExperimentConfig`."""
    values: dict[str, dict[str, Any]] = {s: {} for s in _SECTIONS}
    top: dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, _, val = line.partition("=")
        key = key.strip()
        try:
            value = _parse_value(val)
        except ConfigError as err:
            raise ConfigError(f"{source}:{lineno}: {err}") from None
        if "." in key:
            section, _, name = key.partition(".")
            if section not in values:
                raise ConfigError(f"{source}:{lineno}: unknown section {section!r}")
            if name in values[section]:
                raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
            values[section][name] = value
        elif key in _TOP_LEVEL:
            top[key] = value
        else:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
    return build_config(values, top)


def build_config(values: dict[str, dict[str, Any]], top: dict[str, Any] | None = None) -> ExperimentConfig:
    default = ExperimentConfig()
    kwargs: dict[str, Any] = {}
    for section in _SECTIONS:
        base = getattr(default, section)
        known = {f.name for f in dataclasses.fields(base)}
        unknown = set(values.get(section, {})) - known
        if unknown:
            raise ConfigError(f"unknown keys in section {section!r}: {sorted(unknown)}")
        try:
            kwargs[section] = dataclasses.replace(base, **values.get(section, {}))
        except S2ILError as err:
            raise ConfigError(f"invalid {section} settings: {err}") from err
        except TypeError as err:
            raise ConfigError(f"invalid {section} settings: {err}") from err
    for key, val in (top or {}).items():
        kwargs[key] = val
    if "seeds" in kwargs:
        seeds = kwargs["seeds"]
        if isinstance(seeds, int):
            seeds = [seeds]
        if not all(isinstance(s, int) for s in seeds):
            raise ConfigError("seeds must be integers")
        kwargs["seeds"] = list(seeds)
    if "channels" in values.get("model", {}):
        kwargs["model"].channels = tuple(kwargs["model"].channels)
    if "pool" in values.get("model", {}):
        kwargs["model"].pool = tuple(bool(p) for p in kwargs["model"].pool)
    return ExperimentConfig(**kwargs)


def format_config(cfg: ExperimentConfig) -> str:
    """Render every field, so the text reparses to an equal config."""
    lines = []
    for section in _SECTIONS:
        obj = getattr(cfg, section)
        for f in dataclasses.fields(obj):
            lines.append(f"{section}.{f.name} = {getattr(obj, f.name)!r}")
    for key in _TOP_LEVEL:
        lines.append(f"{key} = {getattr(cfg, key)!r}")
    return "\n".join(lines) + "\n"


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from err
    return parse_config(text, str(path))
