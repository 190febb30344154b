"""Run configuration: sectioned ``key = value`` manifests with strict keys."""
from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from .data import SYNTH_KINDS
from .multires import TASKS, VARIANTS, NetworkSpec

PRECISIONS = ("float32", "float64")
AUG_MODES = ("gaussian", "uniform", "none")
TRAINABLE_TASKS = ("classifier", "vae", "segmenter")


@dataclass
class RunSection:
    task: str = "classifier"
    output_dir: str = "runs/default"
    precision: str = "float32"
    checkpoint_every: int = 1


@dataclass
class DataSection:
    # "synthetic" or a directory of OFF/OBJ meshes arranged as <dir>/<class>/<file>
    source: str = "synthetic"
    kinds: list[str] = field(default_factory=lambda: ["sphere", "cube", "torus"])
    train_count: int = 300
    test_count: int = 60
    n_points: int = 256
    jitter_low: float = 0.8
    jitter_high: float = 1.2


@dataclass
class ModelSection:
    k: int = 0  # 0 picks the task default (8 classifier, 4 otherwise)
    variant: str = "full"
    filters: list[int] = field(default_factory=list)
    decoder_filters: list[int] = field(default_factory=list)
    base_filters: int = 16
    max_filters: int = 1024
    latent_dim: int = 512
    head_channels: int = 128
    fc_hidden: int = 4096
    skip_connections: bool = True
    quarter_filters: bool = False


@dataclass
class OptimSection:
    batch_size: int = 8
    epochs: int = 30
    base_lr: float = 1e-3
    halve_every: int = 5  # 0 keeps the rate constant
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class LossSection:
    lam: float = 0.1
    delta_scale: float = 0.01
    mean_term: str = "norm"
    cov_divisor: str = "n"
    chamfer_backend: str = "tree"


@dataclass
class AugSection:
    mode: str = "gaussian"
    std: float = 0.5
    tta: int = 16


@dataclass
class SeedSection:
    data: int = 0
    init: int = 0
    tree: int = 0
    noise: int = 0


SECTIONS = {
    "run": RunSection,
    "data": DataSection,
    "model": ModelSection,
    "optim": OptimSection,
    "loss": LossSection,
    "aug": AugSection,
    "seeds": SeedSection,
}


class ConfigError(ValueError):
    pass


def _parse_value(kind: str, raw: str, where: str) -> Any:
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if kind == "list[int]":
            return [int(v) for v in raw.split(",") if v.strip()]
        if kind == "list[str]":
            return [v.strip() for v in raw.split(",") if v.strip()]
        return raw
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {kind}") from None


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return ",".join(str(v) for v in value)
    return str(value)


@dataclass
class RunConfig:
    """Every knob of a run. ``to_text`` is the run manifest."""

    run: RunSection = field(default_factory=RunSection)
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    optim: OptimSection = field(default_factory=OptimSection)
    loss: LossSection = field(default_factory=LossSection)
    aug: AugSection = field(default_factory=AugSection)
    seeds: SeedSection = field(default_factory=SeedSection)

    def __post_init__(self):
        self.validate()

    @classmethod
    def for_task(cls, task: str, **overrides) -> "RunConfig":
        """Task defaults: optimizer, augmentation and batch size per task.

        ``overrides`` maps ``"section.key"`` to values.
        """
        cfg = cls(run=RunSection(task=task))
        if task == "vae":
            cfg.optim = replace(cfg.optim, base_lr=1e-4, halve_every=0, batch_size=32)
            cfg.aug = replace(cfg.aug, mode="none", tta=1)
        elif task == "segmenter":
            cfg.aug = replace(cfg.aug, mode="uniform")
            cfg.data = replace(cfg.data, kinds=["two-part-chair"])
        return cfg.with_overrides(overrides)

    def with_overrides(self, overrides: dict) -> "RunConfig":
        sections = {name: getattr(self, name) for name in SECTIONS}
        for dotted, value in overrides.items():
            name, _, key = dotted.partition(".")
            if name not in sections:
                raise ConfigError(f"unknown config section {name!r}")
            known = {f.name: f for f in fields(sections[name])}
            if key not in known:
                raise ConfigError(f"unknown key {key!r} in section [{name}]")
            if isinstance(value, str):
                value = _parse_value(known[key].type, value, f"[{name}] {key}")
            sections[name] = replace(sections[name], **{key: value})
        return RunConfig(**sections)

    def validate(self) -> None:
        r, d, m, o, a = self.run, self.data, self.model, self.optim, self.aug
        if r.task not in TASKS:
            raise ConfigError(f"[run] task must be one of {TASKS}, got {r.task!r}")
        if r.precision not in PRECISIONS:
            raise ConfigError(f"[run] precision must be one of {PRECISIONS}")
        if m.variant not in VARIANTS + ("fc-decoder",):
            raise ConfigError(f"[model] unknown variant {m.variant!r}")
        if a.mode not in AUG_MODES:
            raise ConfigError(f"[aug] mode must be one of {AUG_MODES}")
        if a.tta < 1:
            raise ConfigError("[aug] tta must be >= 1")
        if o.batch_size < 1 or o.epochs < 0 or o.halve_every < 0:
            raise ConfigError("[optim] batch_size >= 1, epochs >= 0 and halve_every >= 0 are required")
        if d.source == "synthetic":
            bad = [k for k in d.kinds if k not in SYNTH_KINDS]
            if bad or not d.kinds:
                raise ConfigError(f"[data] unknown synthetic kinds {bad}; choose from {SYNTH_KINDS}")
        if d.n_points < 2 or d.n_points & (d.n_points - 1):
            raise ConfigError(f"[data] n_points must be a power of two, got {d.n_points}")

    # -- derived ---------------------------------------------------------

    @property
    def k(self) -> int:
        if self.model.k:
            return self.model.k
        return 8 if self.run.task == "classifier" else 4

    def network_spec(self, output_dim: int) -> NetworkSpec:
        m = self.model
        spec = NetworkSpec(
            task=self.run.task, n_points=self.data.n_points, k=self.k,
            filters=list(m.filters), decoder_filters=list(m.decoder_filters),
            head_channels=m.head_channels, latent_dim=m.latent_dim, output_dim=output_dim,
            tanh_output=self.run.task != "segmenter", variant=m.variant,
            skip_connections=m.skip_connections, base_filters=m.base_filters,
            max_filters=m.max_filters, fc_hidden=m.fc_hidden,
        )
        return spec.quartered() if m.quarter_filters else spec

    # -- text form ---------------------------------------------------------

    def to_text(self) -> str:
        out = io.StringIO()
        for name in SECTIONS:
            section = getattr(self, name)
            out.write(f"[{name}]\n")
            for f in fields(section):
                out.write(f"{f.name} = {_format_value(getattr(section, f.name))}\n")
            out.write("\n")
        return out.getvalue()

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        parser = configparser.ConfigParser(interpolation=None, delimiters=("=",),
                                           comment_prefixes=("#", ";"), inline_comment_prefixes=("#",))
        parser.optionxform = str  # keys are case-sensitive
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"malformed config: {exc}".splitlines()[0]) from None
        kwargs = {}
        for name in parser.sections():
            if name not in SECTIONS:
                raise ConfigError(f"unknown config section [{name}]")
            known = {f.name: f for f in fields(SECTIONS[name])}
            values = {}
            for key, raw in parser.items(name):
                if key not in known:
                    raise ConfigError(f"unknown key {key!r} in section [{name}]")
                values[key] = _parse_value(known[key].type, raw, f"[{name}] {key}")
            kwargs[name] = SECTIONS[name](**values)
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_text(Path(path).read_text())

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())
