"""Experiment configuration: sectioned ``key = value`` text files.

Example::

    [data]
    train_count = 2000
    [solver]
    method = silo
    eta =            # empty means "use the method default"

Every field has a default, so an empty file is a valid config. ``dumps``
writes every field in a fixed order and ``loads(dumps(c)) == c``.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import os
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

ENV_ROOT = "SILO_LAB_DIR"
DEFAULT_ROOT = "silo_runs"


class ConfigError(ValueError):
    """Config text that cannot be parsed into an ExperimentConfig."""


@dataclass(frozen=True)
class DataSection:
    image_size: int = 16
    train_count: int = 2000
    test_count: int = 100
    master_seed: int = 0


@dataclass(frozen=True)
class ScheduleSection:
    T: int = 200
    beta_start: float | None = None
    beta_end: float | None = None


@dataclass(frozen=True)
class CodecSection:
    k: int = 32


@dataclass(frozen=True)
class DenoiserSection:
    backend: str = "gmm"
    n_components: int = 8
    reg_covar: float = 1e-4
    seed: int = 0
    steps: int = 4000
    batch_size: int = 256
    lr: float = 2e-3
    hidden: int = 256
    layers: int = 3


@dataclass(frozen=True)
class OperatorSection:
    variant: str = "tcond"
    steps: int = 3000
    batch_size: int = 256
    lr: float = 3e-3
    width_factor: int = 4
    sigma_choices: tuple[float, ...] = (0.0, 0.02, 0.06)
    clamp_target: bool = False
    skip: bool = True
    seed: int = 0


@dataclass(frozen=True)
class DegradationSection:
    kind: str = "blur"
    kernel_size: int = 7
    kernel_sigma: float = 1.0
    factor: int = 2
    box: int | None = None
    fill: float = 0.0
    quality: int = 10


@dataclass(frozen=True)
class MeasurementSection:
    sigma_y: float = 0.02
    noise_seed: int = 1000  # image i of the test set uses noise_seed + i


@dataclass(frozen=True)
class SolverSection:
    method: str = "silo"
    eta: float | None = None  # None: per-method default
    gamma: float | None = None
    seed: int = 0
    detach_denoiser: bool = False
    squared: bool = False
    n_images: int = 20


@dataclass(frozen=True)
class BenchSection:
    methods: tuple[str, ...] = ("silo", "ldps", "psld")
    n_images: int = 20
    repeats: int = 3


@dataclass(frozen=True)
class OutputSection:
    root: str = ""  # empty: $SILO_LAB_DIR, else ./silo_runs


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataSection = field(default_factory=DataSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    codec: CodecSection = field(default_factory=CodecSection)
    denoiser: DenoiserSection = field(default_factory=DenoiserSection)
    operator: OperatorSection = field(default_factory=OperatorSection)
    degradation: DegradationSection = field(default_factory=DegradationSection)
    measurement: MeasurementSection = field(default_factory=MeasurementSection)
    solver: SolverSection = field(default_factory=SolverSection)
    bench: BenchSection = field(default_factory=BenchSection)
    output: OutputSection = field(default_factory=OutputSection)

    def replace(self, section: str, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **{section: dataclasses.replace(getattr(self, section), **changes)})

    def output_root(self) -> Path:
        if self.output.root:
            return Path(self.output.root)
        return Path(os.environ.get(ENV_ROOT) or DEFAULT_ROOT)


# Sections that determine each trained artifact; a run hash covers all but output.
MODEL_SECTIONS = ("data", "schedule", "codec", "denoiser")
OPERATOR_SECTIONS = MODEL_SECTIONS + ("operator", "degradation")
RUN_SECTIONS = OPERATOR_SECTIONS + ("measurement", "solver")


def _format(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    return str(value)


def _parse(text: str, hint, where: str):
    text = text.strip()
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin in (typing.Union, types.UnionType):
        inner = [a for a in args if a is not type(None)]
        if text == "":
            return None
        return _parse(text, inner[0], where)
    if origin is tuple:
        if text == "":
            return ()
        return tuple(_parse(part, args[0], where) for part in text.split(","))
    try:
        if hint is bool:
            low = text.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(text)
        if hint is int:
            return int(text)
        if hint is float:
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {text!r} as {getattr(hint, '__name__', hint)}") from None


def _sections(cfg: ExperimentConfig, names=None):
    for f in dataclasses.fields(cfg):
        if names is None or f.name in names:
            yield f.name, getattr(cfg, f.name)


def dumps(cfg: ExperimentConfig, sections=None) -> str:
    lines = []
    for name, sec in _sections(cfg, sections):
        lines.append(f"[{name}]")
        for f in dataclasses.fields(sec):
            lines.append(f"{f.name} = {_format(getattr(sec, f.name))}".rstrip())
        lines.append("")
    return "\n".join(lines)


def loads(text: str, source: str = "<config>") -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str  # keys are case-sensitive (``T``)
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}".splitlines()[0]) from None
    defaults = ExperimentConfig()
    known = {f.name: f for f in dataclasses.fields(defaults)}
    built = {}
    for section in parser.sections():
        if section not in known:
            raise ConfigError(f"{source}: unknown section [{section}]; expected one of {sorted(known)}")
        sec_default = getattr(defaults, section)
        hints = typing.get_type_hints(type(sec_default))
        fields = {f.name for f in dataclasses.fields(sec_default)}
        values = {}
        for key, raw in parser.items(section):
            if key not in fields:
                raise ConfigError(f"{source}: unknown key {key!r} in [{section}]; expected one of {sorted(fields)}")
            values[key] = _parse(raw, hints[key], f"{source} [{section}] {key}")
        built[section] = dataclasses.replace(sec_default, **values)
    return dataclasses.replace(defaults, **built)


def load(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    return loads(path.read_text(encoding="utf-8"), str(path))


def config_hash(cfg: ExperimentConfig, sections=RUN_SECTIONS) -> str:
    """Short digest of the canonical text of ``sections``.

    Formatting, comments and key order in the source file do not matter, only
    the parsed values do.
    """
    return hashlib.sha256(dumps(cfg, sections).encode("utf-8")).hexdigest()[:12]
