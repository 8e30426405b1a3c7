"""Experiment configuration: flat key=value INI with sections.

One file describes a full run: data source, reduction/init method,
synthesis backend and budget, privileged-channel settings, and the
evaluation recipe. All randomness flows from master_seed through named
streams; config_hash is a stable digest of the canonicalized values.
"""

from __future__ import annotations

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field, fields

SCHEMA_VERSION = 1

INIT_METHODS = ("random", "herding", "kcenter", "forgetting", "dc", "dm")
FEATURE_INITS = ("weak-model", "noise", "assign", "none")


class ConfigError(Exception):
    pass


def _copyfields(cls, items: dict, section: str):
    """Build a dataclass from a {key: str} mapping with typed coercion."""
    out = {}
    known = {f.name: f for f in fields(cls)}
    for key, raw in items.items():
        if key not in known:
            raise ConfigError(f"[{section}] unknown key {key!r}")
        ftype = known[key].type
        try:
            if ftype == "bool":
                out[key] = raw.strip().lower() in ("1", "true", "yes", "on")
            elif ftype == "int":
                out[key] = int(raw)
            elif ftype == "float":
                out[key] = float(raw)
            elif ftype == "tuple":
                out[key] = tuple(int(p) for p in raw.lower().split("x"))
            elif ftype == "list":
                out[key] = [int(p) for p in raw.split(",") if p.strip() != ""]
            else:
                out[key] = raw.strip()
        except ValueError as e:
            raise ConfigError(f"[{section}] {key}: cannot parse {raw!r} ({e})") from e
    return cls(**out)


@dataclass
class DataSection:
    source: str = "blobs"
    classes: int = 3
    per_class: int = 40
    test_per_class: int = 60
    image_size: tuple = (1, 16, 16)
    sigma: float = 0.05
    class_sep: float = 0.013
    smoothness: float = 1.5
    template_seed: int = 7
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""


@dataclass
class ReduceSection:
    ipc: int = 0
    fraction: float = 0.0
    init: str = "random"
    backend: str = "dc"
    outer_steps: int = 15
    inner_steps: int = 5
    model_lr: float = 0.01
    data_lr: float = 0.1
    batch_real: int = 32
    batch_syn: int = 0
    update_images: str = "auto"
    score_epochs: int = 10


@dataclass
class ModelSection:
    family: str = "convnet"
    depth: int = 2
    width: int = 32


@dataclass
class PrivilegedSection:
    lambda_reg: float = 0.5
    lambda_task: float = 0.1
    lambda_soft: float = 0.0
    n_feat: int = 1
    aggregation: str = "average"
    tap: int = 0                      # 0 = final layer
    attention: str = "none"           # none | spatial | channel
    feature_init: str = "weak-model"  # weak-model | noise | assign | none
    soft_temperature: float = 4.0
    teacher_epochs: int = 120
    teacher_lr: float = 0.2


@dataclass
class EvalSection:
    epochs: int = 400
    lr: float = 0.03
    probe_epochs: int = 5
    probe_lr: float = 0.1


@dataclass
class ExperimentConfig:
    schema_version: int = SCHEMA_VERSION
    master_seed: int = 0
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    out_dir: str = "runs/exp"
    data: DataSection = field(default_factory=DataSection)
    reduce: ReduceSection = field(default_factory=ReduceSection)
    model: ModelSection = field(default_factory=ModelSection)
    privileged: PrivilegedSection = field(default_factory=PrivilegedSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def validate(self) -> "ExperimentConfig":
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(
                f"[experiment] schema_version {self.schema_version} != {SCHEMA_VERSION}"
            )
        if not self.seeds:
            raise ConfigError("[experiment] seeds must be non-empty")
        if self.data.source not in ("blobs", "idx"):
            raise ConfigError(f"[data] unknown source {self.data.source!r}")
        if self.data.source == "idx":
            for key in ("train_images", "train_labels", "test_images", "test_labels"):
                if not getattr(self.data, key):
                    raise ConfigError(f"[data] {key} required for idx source")
        has_ipc, has_frac = self.reduce.ipc > 0, self.reduce.fraction > 0
        if has_ipc == has_frac:
            raise ConfigError("[reduce] exactly one of ipc / fraction must be set")
        if self.reduce.init not in INIT_METHODS:
            raise ConfigError(f"[reduce] unknown init {self.reduce.init!r}")
        if self.reduce.backend not in ("dc", "dm"):
            raise ConfigError(f"[reduce] unknown backend {self.reduce.backend!r}")
        if self.reduce.update_images not in ("auto", "true", "false"):
            raise ConfigError("[reduce] update_images must be auto|true|false")
        p = self.privileged
        if p.feature_init not in FEATURE_INITS:
            raise ConfigError(f"[privileged] unknown feature_init {p.feature_init!r}")
        if p.aggregation not in ("average", "random-pick"):
            raise ConfigError(f"[privileged] unknown aggregation {p.aggregation!r}")
        if p.attention not in ("none", "spatial", "channel"):
            raise ConfigError(f"[privileged] unknown attention {p.attention!r}")
        if p.n_feat < 1:
            raise ConfigError("[privileged] n_feat must be >= 1")
        if p.feature_init == "none" and (p.lambda_reg > 0 or p.lambda_task > 0):
            raise ConfigError(
                "[privileged] feature_init=none needs lambda_reg = lambda_task = 0"
            )
        if p.attention != "none" and p.lambda_task > 0:
            raise ConfigError(
                "[privileged] attention labels cannot feed the classifier; "
                "set lambda_task = 0"
            )
        if p.tap < 0 or (p.tap > self.model.depth):
            raise ConfigError(f"[privileged] tap {p.tap} outside 0..{self.model.depth}")
        if p.tap not in (0, self.model.depth) and p.lambda_task > 0:
            raise ConfigError(
                "[privileged] task supervision needs final-layer features; "
                "set tap = 0 (final) or lambda_task = 0"
            )
        for name, v in (("lambda_reg", p.lambda_reg), ("lambda_task", p.lambda_task),
                        ("lambda_soft", p.lambda_soft)):
            if v < 0:
                raise ConfigError(f"[privileged] {name} must be >= 0")
        if self.eval.epochs < 1 or self.eval.lr <= 0:
            raise ConfigError("[eval] epochs >= 1 and lr > 0 required")
        return self

    def canonical_items(self) -> list:
        items = [
            ("experiment.schema_version", self.schema_version),
            ("experiment.master_seed", self.master_seed),
            ("experiment.seeds", ",".join(str(s) for s in self.seeds)),
        ]
        for section in ("data", "reduce", "model", "privileged", "eval"):
            obj = getattr(self, section)
            for f in fields(obj):
                v = getattr(obj, f.name)
                if isinstance(v, tuple):
                    v = "x".join(str(x) for x in v)
                items.append((f"{section}.{f.name}", v))
        return sorted(items)

    @property
    def config_hash(self) -> str:
        blob = "\n".join(f"{k}={v}" for k, v in self.canonical_items()).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


def load_config(path) -> ExperimentConfig:
    cp = configparser.ConfigParser()
    read = cp.read(path)
    if not read:
        raise ConfigError(f"cannot read config file {path}")
    sections = {
        "data": DataSection, "reduce": ReduceSection, "model": ModelSection,
        "privileged": PrivilegedSection, "eval": EvalSection,
    }
    kwargs = {}
    for name in cp.sections():
        if name == "experiment":
            continue
        if name not in sections:
            raise ConfigError(f"unknown section [{name}]")
        kwargs[name] = _copyfields(sections[name], dict(cp.items(name)), name)
    exp_items = dict(cp.items("experiment")) if cp.has_section("experiment") else {}
    top = {}
    for key, raw in exp_items.items():
        if key == "schema_version":
            top["schema_version"] = int(raw)
        elif key == "master_seed":
            top["master_seed"] = int(raw)
        elif key == "seeds":
            top["seeds"] = [int(p) for p in raw.split(",") if p.strip() != ""]
        elif key == "out_dir":
            top["out_dir"] = raw.strip()
        else:
            raise ConfigError(f"[experiment] unknown key {key!r}")
    cfg = ExperimentConfig(**top, **kwargs)
    return cfg.validate()


def dump_config(cfg: ExperimentConfig) -> str:
    lines = ["[experiment]",
             f"schema_version = {cfg.schema_version}",
             f"master_seed = {cfg.master_seed}",
             f"seeds = {','.join(str(s) for s in cfg.seeds)}",
             f"out_dir = {cfg.out_dir}", ""]
    for section in ("data", "reduce", "model", "privileged", "eval"):
        obj = getattr(cfg, section)
        lines.append(f"[{section}]")
        for f in fields(obj):
            v = getattr(obj, f.name)
            if isinstance(v, tuple):
                v = "x".join(str(x) for x in v)
            lines.append(f"{f.name} = {v}")
        lines.append("")
    return "\n".join(lines)
