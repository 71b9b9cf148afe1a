"""JSON experiment configuration.

Unknown keys are rejected at every level. ``ExperimentConfig()`` holds the
defaults that ``evil-lab defaults`` prints.
"""

from __future__ import annotations

import json
import sys
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from . import mask as M
from .envdata import ColoredDigitSpec
from .errors import ConfigError
from .objectives import DEFAULT_LAMBDA, ObjectiveConfig
from .optim import SamConfig
from .prop_oracle import DEFAULT_GRID, PropositionConfig
from .trainer import TrainLoopConfig

SCHEMA_VERSION = 1


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True, populate_by_name=True)


class DataSection(_Strict):
    source: Literal["synthetic", "idx"] = "synthetic"
    idx_images: str | None = None
    idx_labels: str | None = None
    environments: tuple[float, ...] = (0.9, 0.8, 0.1)
    label_noise: float = Field(0.25, ge=0.0, le=0.5)
    n: int = Field(5000, ge=1)
    n_classes: Literal[2, 10] = 2
    size: int = Field(14, ge=8, le=28)
    holdout: int = Field(-1, description="index of the test environment; negative counts from the end")

    @field_validator("environments")
    @classmethod
    def _probs(cls, v):
        if len(v) < 2:
            raise ValueError("need at least two environments")
        for p in v:
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"color agreement {p} outside [0, 1]")
        return v


class SparsitySection(_Strict):
    r: float = 0.6
    alpha: float = 0.2
    delta_t: int = Field(300, ge=1)
    t_total: int = Field(5000, ge=1)
    t_pre: int = Field(1000, ge=0)

    @field_validator("r")
    @classmethod
    def _r(cls, v):
        if not 0.0 < v < 1.0:
            raise ValueError(f"{v} outside the accepted range (0, 1)")
        return v

    @field_validator("alpha")
    @classmethod
    def _alpha(cls, v):
        if not 0.0 <= v < 1.0:
            raise ValueError(f"{v} outside the accepted range [0, 1)")
        return v

    @model_validator(mode="after")
    def _schedule(self):
        if self.t_pre >= self.t_total:
            raise ValueError(f"t_pre ({self.t_pre}) must be below t_total ({self.t_total})")
        return self


class ObjectiveSection(_Strict):
    kind: Literal["erm", "irm", "rex", "dro"] = "erm"
    lam: float | None = Field(None, alias="lambda", ge=0.0)
    eta: float = Field(1e-2, gt=0.0)
    hard_max: bool = False


class SamSection(_Strict):
    enabled: bool = False
    rho: float = Field(0.05, ge=0.0)
    masked: bool = True


class TrainSection(_Strict):
    batch_size: int = Field(64, ge=1)
    widths: tuple[int, ...] = (256, 256)
    activation: Literal["relu", "none"] = "relu"
    lr: float = Field(1e-3, gt=0.0)
    mask_init: Literal["magnitude", "random", "connection_sensitivity", "fisher"] = "magnitude"
    log_every: int = Field(50, ge=1)

    @field_validator("widths")
    @classmethod
    def _widths(cls, v):
        if not v or any(w < 1 for w in v):
            raise ValueError("widths must be a non-empty list of positive integers")
        return v


class MetricsSection(_Strict):
    gradient_variance: bool = True
    sharpness: bool = True
    spectrum: bool = True
    diagnostics_every: int = Field(0, ge=0)
    sharpness_rho: float = Field(0.05, ge=0.0)
    lanczos_iterations: int = Field(30, ge=5)
    spectrum_k: int = Field(5, ge=5)
    spectrum_samples: int = Field(1000, ge=1, description="per-environment rows used for Hessian products")


class OracleSection(_Strict):
    m_inv: int = Field(10, ge=1)
    m_var: tuple[int, ...] = (90,)
    p_grid: tuple[float, ...] = DEFAULT_GRID
    q_e: float = Field(0.5, ge=0.0, le=1.0)
    trials: int = Field(100_000, ge=1000)
    chunk: int = Field(10_000, ge=1)


class SweepSection(_Strict):
    alphas: tuple[float, ...] = (0.1, 0.2, 0.3)
    delta_ts: tuple[int, ...] = (1, 100, 200, 300, 400, 500)


class ExperimentConfig(_Strict):
    schema_version: int = SCHEMA_VERSION
    seed: int = Field(0, ge=0)
    variant: Literal["evil", "evil_sam", "dense_baseline", "rigl_ablation"] = "evil"
    data: DataSection = DataSection()
    sparsity: SparsitySection = SparsitySection()
    objective: ObjectiveSection = ObjectiveSection()
    sam: SamSection = SamSection()
    train: TrainSection = TrainSection()
    metrics: MetricsSection = MetricsSection()
    oracle: OracleSection = OracleSection()
    sweep: SweepSection = SweepSection()

    @field_validator("schema_version")
    @classmethod
    def _schema(cls, v):
        if v != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema_version {v}, expected {SCHEMA_VERSION}")
        return v


def _describe(err: ValidationError) -> str:
    parts = []
    for e in err.errors():
        path = ".".join(str(x) for x in e["loc"]) or "<root>"
        parts.append(f"{path}: {e['msg']}")
    return "; ".join(parts)


def parse_config_text(text: str) -> ExperimentConfig:
    """Parse a JSON document. Empty or whitespace-only text yields the defaults."""
    if not text.strip():
        return ExperimentConfig()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"config must be a JSON object, got {type(raw).__name__}")
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(_describe(exc)) from None


def parse_config(path: str | None) -> ExperimentConfig:
    """Read a config from ``path``; ``None`` means defaults and ``"-"`` means stdin."""
    if path is None:
        return ExperimentConfig()
    if path == "-":
        return parse_config_text(sys.stdin.read())
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config_text(text)


def dump_config(cfg: ExperimentConfig) -> str:
    return json.dumps(cfg.model_dump(mode="json", by_alias=True), indent=2, sort_keys=True) + "\n"


def defaults_json() -> str:
    return dump_config(ExperimentConfig())


def with_overrides(cfg: ExperimentConfig, seed: int | None = None, variant: str | None = None) -> ExperimentConfig:
    data = cfg.model_dump(by_alias=True)
    if seed is not None:
        data["seed"] = seed
    if variant is not None:
        data["variant"] = variant
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_describe(exc)) from None


def to_train_config(cfg: ExperimentConfig, **changes) -> TrainLoopConfig:
    s, o, t = cfg.sparsity, cfg.objective, cfg.train
    sparsity = M.SparsityConfig(changes.pop("r", s.r), changes.pop("alpha", s.alpha),
                                changes.pop("delta_t", s.delta_t), s.t_total, s.t_pre)
    lam = DEFAULT_LAMBDA[o.kind] if o.lam is None else o.lam
    sam = SamConfig(cfg.sam.rho, cfg.sam.masked) if cfg.sam.enabled else None
    kwargs = dict(
        sparsity=sparsity, objective=ObjectiveConfig(o.kind, lam, o.eta, o.hard_max), sam=sam,
        batch_size=t.batch_size, widths=t.widths, activation=t.activation, seed=cfg.seed,
        variant=cfg.variant, lr=t.lr, mask_init=t.mask_init, log_every=t.log_every,
        diagnostics_every=cfg.metrics.diagnostics_every,
    )
    kwargs.update(changes)
    return TrainLoopConfig(**kwargs)


def to_data_spec(cfg: ExperimentConfig) -> ColoredDigitSpec:
    d = cfg.data
    return ColoredDigitSpec(environments=d.environments, label_noise=d.label_noise, source=d.source,
                            idx_images=d.idx_images or "", idx_labels=d.idx_labels or "", n=d.n, seed=cfg.seed,
                            n_classes=d.n_classes, size=d.size)


def to_oracle_configs(cfg: ExperimentConfig) -> list[PropositionConfig]:
    o = cfg.oracle
    return [PropositionConfig(o.m_inv, m_var, o.p_grid, o.q_e, o.trials, cfg.seed, o.chunk) for m_var in o.m_var]
