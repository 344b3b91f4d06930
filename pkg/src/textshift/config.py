"""Run configuration: dataclasses, YAML round-trip, and a semantic digest.

The digest covers every field that changes what gets computed (seed, encoder,
domains, classes, toy world, stage hyperparameters) and deliberately excludes
paths, so moving artifacts around never invalidates them. Artifacts embed the
digest and refuse to mix with a differently-configured run.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import yaml

from .toyworld import DomainShift, ToySpec, default_domain_shifts

FORMAT_VERSION = 1


@dataclass
class EncoderConfig:
    kind: str = "toy"
    feature_dim: int = 16
    text_dim: int = 16
    stride: int = 4
    hidden_channels: int = 32
    seed: int = 11
    calibration_images: int = 16

    def validate(self):
        if self.kind not in ("toy", "external-adapter"):
            raise ValueError(f"unknown encoder kind {self.kind!r}")
        for name in ("feature_dim", "text_dim", "stride", "hidden_channels",
                     "calibration_images"):
            if getattr(self, name) < 1:
                raise ValueError(f"encoder.{name} must be positive")


@dataclass
class DomainSpec:
    id: str
    description: str

    def validate(self):
        if not self.id.strip():
            raise ValueError("domain id must be non-empty")
        if not self.description.strip():
            raise ValueError(f"domain {self.id!r} needs a description")


@dataclass
class HeadConfig:
    """Segmentation head shape plus its source-only pretraining schedule."""

    hidden: int = 32
    pretrain_iterations: int = 400
    pretrain_lr: float = 0.05
    momentum: float = 0.9

    def validate(self):
        if self.hidden < 1:
            raise ValueError("head.hidden must be positive")
        if self.pretrain_iterations < 1:
            raise ValueError("head.pretrain_iterations must be >= 1")
        if self.pretrain_lr <= 0:
            raise ValueError("head.pretrain_lr must be positive")


@dataclass
class Stage1Config:
    """Style-mining hyperparameters."""

    steps: int = 100
    # small lr keeps the momentum transient from inflating mu/sigma norms
    # (the cosine terms are scale-blind); larger values overshoot on the toy
    lr: float = 0.001
    momentum: float = 0.9
    lambda_hc: float = 1.0
    lambda_dc: float = 1.0
    lambda_seg: float = 0.5
    # 0.1 keeps the sharp (tau=0.1) contrastive gradients within one order
    # of the scene term on the toy world; 0.5 lets them dominate early steps
    lambda_r: float = 0.1
    lambda_p: float = 0.1
    tau: float = 0.1
    eps: float = 1e-5
    sigma_floor: float = 1e-4

    def validate(self):
        if self.steps < 1:
            raise ValueError("stage1.steps must be >= 1")
        if self.lr <= 0:
            raise ValueError("stage1.lr must be positive")
        for name in ("lambda_hc", "lambda_dc", "lambda_seg", "lambda_r", "lambda_p"):
            if getattr(self, name) < 0:
                raise ValueError(f"stage1.{name} must be >= 0")
        if self.tau <= 0:
            raise ValueError("stage1.tau must be positive")
        if self.eps < 0:
            raise ValueError("stage1.eps must be >= 0")
        if self.sigma_floor <= 0:
            raise ValueError("stage1.sigma_floor must be positive")


@dataclass
class Stage2Config:
    """Unified-head fine-tuning hyperparameters."""

    iterations: int = 2000
    # small enough that 2000 iterations refine rather than overfit the head
    # to the simulated feature distribution
    lr: float = 0.001
    momentum: float = 0.9
    batch_size: int = 1
    rectifier: bool = True
    beta_init: float = 0.1
    freeze_beta: bool = False

    def validate(self):
        if self.iterations < 1:
            raise ValueError("stage2.iterations must be >= 1")
        if self.lr <= 0:
            raise ValueError("stage2.lr must be positive")
        if self.batch_size < 1:
            raise ValueError("stage2.batch_size must be >= 1")


@dataclass
class PathsConfig:
    """Artifact locations; excluded from the config digest."""

    dataset_dir: str = "runs/toy/dataset"
    style_bank: str = "runs/toy/style_bank.tsb"
    baseline_checkpoint: str = "runs/toy/baseline.tsc"
    checkpoint: str = "runs/toy/adapted.tsc"
    report: str = "runs/toy/report.tsv"
    figures_dir: str = "runs/toy/figures"
    stage1_log: str = "runs/toy/stage1_log.tsv"
    stage2_log: str = "runs/toy/stage2_log.tsv"


def default_domains() -> list[DomainSpec]:
    return [
        DomainSpec("fog", "driving in dense fog"),
        DomainSpec("night", "driving at night"),
        DomainSpec("rain", "driving under heavy rain"),
    ]


def default_classes() -> list[str]:
    return ["road", "building", "car", "vegetation"]


@dataclass
class RunConfig:
    seed: int = 7
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    domains: list[DomainSpec] = field(default_factory=default_domains)
    classes: list[str] = field(default_factory=default_classes)
    toyworld: ToySpec = field(default_factory=lambda: ToySpec(domain_shifts=default_domain_shifts()))
    head: HeadConfig = field(default_factory=HeadConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def validate(self) -> "RunConfig":
        self.encoder.validate()
        self.head.validate()
        self.stage1.validate()
        self.stage2.validate()
        if not self.domains:
            raise ValueError("at least one target domain is required")
        ids = [d.id for d in self.domains]
        if len(set(ids)) != len(ids):
            raise ValueError("domain ids must be unique")
        for d in self.domains:
            d.validate()
        if not self.classes:
            raise ValueError("class list must be non-empty")
        if len(set(self.classes)) != len(self.classes):
            raise ValueError("class names must be unique")
        if len(self.classes) != self.toyworld.n_classes:
            raise ValueError(
                f"{len(self.classes)} class names vs toyworld.n_classes = "
                f"{self.toyworld.n_classes}"
            )
        if self.encoder.kind == "toy":
            missing = [d.id for d in self.domains
                       if d.id not in self.toyworld.domain_shifts]
            if missing:
                raise ValueError(f"domains {missing} have no toyworld shift")
            if self.toyworld.image_size % self.encoder.stride:
                raise ValueError("image_size must be divisible by encoder stride")
        return self

    def domain_pairs(self) -> list[tuple[str, str]]:
        return [(d.id, d.description) for d in self.domains]


def default_config(root: str | Path = "runs/toy") -> RunConfig:
    root = Path(root)
    cfg = RunConfig()
    cfg.paths = PathsConfig(
        dataset_dir=str(root / "dataset"),
        style_bank=str(root / "style_bank.tsb"),
        baseline_checkpoint=str(root / "baseline.tsc"),
        checkpoint=str(root / "adapted.tsc"),
        report=str(root / "report.tsv"),
        figures_dir=str(root / "figures"),
        stage1_log=str(root / "stage1_log.tsv"),
        stage2_log=str(root / "stage2_log.tsv"),
    )
    return cfg.validate()


def _toyworld_to_dict(spec: ToySpec) -> dict:
    return {
        "n_classes": spec.n_classes,
        "image_size": spec.image_size,
        "n_train": spec.n_train,
        "n_eval_per_domain": spec.n_eval_per_domain,
        "seed": spec.seed,
        "domain_shifts": {
            did: {"gain": list(s.gain), "bias": list(s.bias), "noise": s.noise}
            for did, s in spec.domain_shifts.items()
        },
    }


def _toyworld_from_dict(d: dict) -> ToySpec:
    shifts = {
        did: DomainShift(tuple(s["gain"]), tuple(s["bias"]), float(s.get("noise", 0.0)))
        for did, s in d.get("domain_shifts", {}).items()
    }
    known = {"n_classes", "image_size", "n_train", "n_eval_per_domain", "seed",
             "domain_shifts"}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown toyworld keys: {sorted(unknown)}")
    return ToySpec(
        n_classes=int(d.get("n_classes", 4)),
        image_size=int(d.get("image_size", 32)),
        n_train=int(d.get("n_train", 40)),
        n_eval_per_domain=int(d.get("n_eval_per_domain", 10)),
        domain_shifts=shifts,
        seed=int(d.get("seed", 5)),
    )


def _section_from_dict(cls, d: dict, name: str):
    allowed = {f.name for f in fields(cls)}
    unknown = set(d) - allowed
    if unknown:
        raise ValueError(f"unknown {name} keys: {sorted(unknown)}")
    return cls(**d)


def to_dict(cfg: RunConfig) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "seed": cfg.seed,
        "encoder": asdict(cfg.encoder),
        "domains": [{"id": d.id, "description": d.description} for d in cfg.domains],
        "classes": list(cfg.classes),
        "toyworld": _toyworld_to_dict(cfg.toyworld),
        "head": asdict(cfg.head),
        "stage1": asdict(cfg.stage1),
        "stage2": asdict(cfg.stage2),
        "paths": asdict(cfg.paths),
    }


def from_dict(d: dict) -> RunConfig:
    known = {"format_version", "seed", "encoder", "domains", "classes", "toyworld",
             "head", "stage1", "stage2", "paths"}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    version = int(d.get("format_version", FORMAT_VERSION))
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported config format_version {version}")
    cfg = RunConfig(
        seed=int(d.get("seed", 7)),
        encoder=_section_from_dict(EncoderConfig, d.get("encoder", {}), "encoder"),
        domains=[DomainSpec(x["id"], x["description"]) for x in d.get("domains", [])]
        or default_domains(),
        classes=list(d.get("classes", default_classes())),
        toyworld=_toyworld_from_dict(d.get("toyworld", _toyworld_to_dict(
            ToySpec(domain_shifts=default_domain_shifts())))),
        head=_section_from_dict(HeadConfig, d.get("head", {}), "head"),
        stage1=_section_from_dict(Stage1Config, d.get("stage1", {}), "stage1"),
        stage2=_section_from_dict(Stage2Config, d.get("stage2", {}), "stage2"),
        paths=_section_from_dict(PathsConfig, d.get("paths", {}), "paths"),
    )
    return cfg.validate()


def save_config(cfg: RunConfig, path: str | Path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(yaml.safe_dump(to_dict(cfg), sort_keys=False))


def load_config(path: str | Path) -> RunConfig:
    data = yaml.safe_load(Path(path).read_text())
    if not isinstance(data, dict):
        raise ValueError(f"config file {path} does not hold a mapping")
    return from_dict(data)


# per-scope config sections: an artifact's digest covers exactly the fields
# its bytes depend on, so changing later-stage knobs never invalidates it
_DIGEST_SCOPES = {
    "data": ("seed", "encoder", "domains", "classes", "toyworld"),
    "stage1": ("seed", "encoder", "domains", "classes", "toyworld",
               "head", "stage1"),
    "full": ("seed", "encoder", "domains", "classes", "toyworld",
             "head", "stage1", "stage2"),
}


def config_digest(cfg: RunConfig, scope: str = "full") -> str:
    """sha256 over the canonical dump of the fields the scope depends on."""
    if scope not in _DIGEST_SCOPES:
        raise ValueError(f"unknown digest scope {scope!r}")
    payload = to_dict(cfg)
    payload = {k: payload[k] for k in _DIGEST_SCOPES[scope]}
    text = yaml.safe_dump(payload, sort_keys=True)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def with_root(cfg: RunConfig, root: str | Path) -> RunConfig:
    """Same run, artifacts relocated under a new directory."""
    root = Path(root)
    return replace(cfg, paths=PathsConfig(
        dataset_dir=str(root / "dataset"),
        style_bank=str(root / "style_bank.tsb"),
        baseline_checkpoint=str(root / "baseline.tsc"),
        checkpoint=str(root / "adapted.tsc"),
        report=str(root / "report.tsv"),
        figures_dir=str(root / "figures"),
        stage1_log=str(root / "stage1_log.tsv"),
        stage2_log=str(root / "stage2_log.tsv"),
    ))
