"""Run configuration: nested dataclasses backed by TOML files."""
from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field
from pathlib import Path

import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class ConfigError(ValueError):
    pass


@dataclass
class ERMConfig:
    epochs: int = 10
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 1e-2
    batch_size: int = 64


@dataclass
class ClusterConfig:
    k: int = 8
    seed: int = 0
    threshold: float = 0.9
    max_iter: int = 300
    tol: float = 1e-6


@dataclass
class TaskConfig:
    fraction: float = 0.1
    p: int = 0  # 0 derives p from fraction
    anchors: int = 8
    positives: int = 4
    negatives: int = 16
    tau: float = 0.1


@dataclass
class MaskConfig:
    alpha: float = 1e-6
    beta: float = 0.05
    tau: float = 1.0
    gamma: float = 0.5
    init: float = 0.9
    epochs: int = 150
    optimizer: str = "adam"  # adam | sgd
    lr: float = 0.05
    momentum: float = 0.9
    batch_size: int = 64
    clamp: float = 10.0
    penalty: str = "logit"
    include_classifier: bool = False
    prune_ratio: float = 0.5  # 0 keeps the gamma threshold


@dataclass
class FinetuneConfig:
    epochs: int = 5
    lr: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 1e-2
    batch_size: int = 8


@dataclass
class PipelineConfig:
    hidden: list[int] = field(default_factory=lambda: [128, 128, 128])
    erm: ERMConfig = field(default_factory=ERMConfig)
    clustering: ClusterConfig = field(default_factory=ClusterConfig)
    taskdata: TaskConfig = field(default_factory=TaskConfig)
    masking: MaskConfig = field(default_factory=MaskConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    seed: int = 0
    variant: str = "default"
    ablation: int = 1

    def validate(self):
        pos = [self.erm.lr, self.masking.lr, self.finetune.lr, self.masking.tau, self.taskdata.tau]
        if any(v <= 0 for v in pos):
            raise ConfigError("rates and temperatures must be positive")
        if not 0 < self.taskdata.fraction <= 1:
            raise ConfigError("taskdata.fraction must lie in (0, 1]")
        if self.variant not in ("default", "neg_ablation", "supcon"):
            raise ConfigError(f"unknown variant {self.variant!r}")
        if not 1 <= self.ablation <= 7:
            raise ConfigError("ablation setting must be 1..7")
        if not 0 <= self.masking.prune_ratio < 1:
            raise ConfigError("masking.prune_ratio must lie in [0, 1)")
        return self


@dataclass
class MoonsSection:
    n: int = 2000
    noise: float = 0.1
    rho: float = 0.95
    spur_shift: float = 1.0
    split: list[float] = field(default_factory=lambda: [0.25, 0.05, 0.7])
    # the moons demo pins its own architecture, ERM length and rates
    hidden: list[int] = field(default_factory=lambda: [500] * 5)
    erm_epochs: int = 100
    erm_lr: float = 3e-3
    beta: float = 0.1
    finetune_lr: float = 3e-4


@dataclass
class AttributeSection:
    name: str = "corner"
    rho: float = 0.95
    kind: str = "corner"
    where: str = "tl"
    size: int = 3
    levels: list[float] = field(default_factory=lambda: [0.0, 1.0])


@dataclass
class ImagesSection:
    grid: int = 12
    classes: int = 2
    per_class: int = 3000
    core_intensity: float = 0.1
    pixel_noise: float = 0.1
    jitter: int = 0
    label_noise: float = 0.0
    attributes: list[AttributeSection] = field(default_factory=lambda: [
        AttributeSection("corner", 0.95, "corner", "tl"),
        AttributeSection("border", 0.95, "border", "right"),
    ])


@dataclass
class DataSection:
    kind: str = "images"  # images | moons
    seed: int = 0
    split: list[float] = field(default_factory=lambda: [0.5, 0.1, 0.4])  # images; moons has its own
    moons: MoonsSection = field(default_factory=MoonsSection)
    images: ImagesSection = field(default_factory=ImagesSection)


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    output: str = "runs"
    seeds: int = 5

    def for_moons(self) -> "RunConfig":
        """Copy switched to the two-moons data with the demo's pinned network and rates."""
        c = from_dict(to_dict(self))
        c.output = self.output
        m = c.data.moons
        c.data.kind = "moons"
        c.pipeline.hidden = list(m.hidden)
        c.pipeline.erm.epochs = m.erm_epochs
        c.pipeline.erm.lr = m.erm_lr
        c.pipeline.masking.beta = m.beta
        c.pipeline.finetune.lr = m.finetune_lr
        return c


def _build(cls, doc: dict, where: str):
    if not isinstance(doc, dict):
        raise ConfigError(f"[{where}] must be a table")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(doc) - set(fields)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{where}]: {', '.join(sorted(unknown))}")
    kwargs = {}
    for name, value in doc.items():
        sub = _NESTED.get((cls, name))
        if sub is not None and isinstance(value, list):
            kwargs[name] = [_build(sub, v, f"{where}.{name}") for v in value]
        elif sub is not None:
            kwargs[name] = _build(sub, value, f"{where}.{name}")
        else:
            kwargs[name] = value
    return cls(**kwargs)


_NESTED = {
    (PipelineConfig, "erm"): ERMConfig, (PipelineConfig, "clustering"): ClusterConfig,
    (PipelineConfig, "taskdata"): TaskConfig, (PipelineConfig, "masking"): MaskConfig,
    (PipelineConfig, "finetune"): FinetuneConfig,
    (DataSection, "moons"): MoonsSection, (DataSection, "images"): ImagesSection,
    (ImagesSection, "attributes"): AttributeSection,
    (RunConfig, "data"): DataSection, (RunConfig, "pipeline"): PipelineConfig,
}


def from_dict(doc: dict) -> RunConfig:
    cfg = _build(RunConfig, doc, "root")
    cfg.pipeline.validate()
    return cfg


def load_config(path) -> RunConfig:
    """Parse a TOML run config; relative output paths resolve against it."""
    path = Path(path)
    with open(path, "rb") as fh:
        cfg = from_dict(tomllib.load(fh))
    out = Path(cfg.output)
    if not out.is_absolute():
        cfg.output = str((path.parent / out).resolve())
    return cfg


def to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)


def dump_config(cfg: RunConfig, path):
    Path(path).write_text(tomli_w.dumps(to_dict(cfg)))
