"""Experiment configuration: a strict YAML schema plus the built-in presets.

Every key is validated; unknown keys are errors, because a silently ignored
typo would corrupt a whole sweep. Defaults are filled in on parse and written
back with the run, so a run directory always holds its fully resolved config.

Schema (all keys except ``models`` and ``datasets`` are optional)::

    name: lpka_full            # variant label used in reports
    seed: 0
    total_steps: 1000
    eval_every: 0              # 0 = evaluate only after the last step
    batch_size: 64
    output_dir: null           # overrides the output root when set
    models:                    # roles: l (large/source) and s (small/target);
      l: {kind: mlp_large}     # give only l for a self-transfer run
      s: {kind: mlp_small}
    datasets:                  # one entry per model role
      l: {source: synthetic, classes: 10, dim: 64, train_size: 10000, ...}
      s: {source: cifar10, path: data_batch_1.bin, test_path: test_batch.bin}
    plan:
      pairs: [[fc1, fc1]]      # [l slot, s slot]
      t_cycle: 4
      freq_ratio: {l: 1, s: 1}
      directions: both         # l2s, s2l or both
      frozen_source: false
      pretrain_steps: 0        # source warm-up before a frozen-source run
      residual: false
      literal_t0: false
    adapter: {kind: lpka_full, r: 8, d: 16, layers: 1, omega_trainable: true}
    lr: {l: 0.05, s: 0.05, adapter: 0.05}
    kd: {temperature: 4.0, alpha: 0.9}
"""

from __future__ import annotations

import hashlib
import json
import math
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .zoo import ConfigError

ADAPTER_KINDS = ("mlp", "lpka_full", "lpka_row_only", "lpka_avg", "none", "copy_share", "kd")


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", strict=True)


class ModelSpec(_Strict):
    kind: Literal["mlp_small", "mlp_large", "cnn_small", "cnn_large"]


class DatasetSpec(_Strict):
    """A seeded synthetic task or CIFAR binary files.

    ``shape`` reshapes synthetic vectors into images (``dim`` must match its
    product); CIFAR inputs are always ``[3, 32, 32]``.
    """

    source: Literal["synthetic", "cifar10", "cifar100"] = "synthetic"
    classes: int = Field(10, ge=2)
    dim: int = Field(32, ge=1)
    shape: Optional[list[int]] = None
    train_size: int = Field(1000, ge=1)
    test_size: int = Field(1000, ge=1)
    separation: float = Field(3.0, gt=0)
    components: int = Field(1, ge=1)
    noise: float = Field(1.0, ge=0)
    informative_dims: Optional[int] = Field(None, ge=1)
    task_seed: int = 0
    path: Optional[str] = None
    test_path: Optional[str] = None
    limit: Optional[int] = Field(None, ge=1)
    test_limit: Optional[int] = Field(None, ge=1)

    @model_validator(mode="after")
    def _check(self):
        if self.source == "synthetic":
            if self.shape is not None and math.prod(self.shape) != self.dim:
                raise ValueError(f"shape {self.shape} does not hold dim={self.dim} values")
            if self.informative_dims is not None and self.informative_dims > self.dim:
                raise ValueError("informative_dims cannot exceed dim")
        else:
            if not self.path or not self.test_path:
                raise ValueError(f"source {self.source} needs both path and test_path")
            self.classes = 10 if self.source == "cifar10" else 100
            self.dim = 3 * 32 * 32
            self.shape = [3, 32, 32]
        return self

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.shape) if self.shape else (self.dim,)


class PlanSpec(_Strict):
    pairs: list[list[str]] = Field(default_factory=lambda: [["head", "head"]])
    t_cycle: int = Field(4, ge=1)
    freq_ratio: dict[str, int] = Field(default_factory=lambda: {"l": 1, "s": 1})
    directions: Literal["l2s", "s2l", "both"] = "both"
    frozen_source: bool = False
    pretrain_steps: int = Field(0, ge=0)
    residual: bool = False
    literal_t0: bool = False

    @field_validator("pairs")
    @classmethod
    def _pairs(cls, v):
        for p in v:
            if len(p) != 2:
                raise ValueError(f"each pair is [l_slot, s_slot], got {p}")
        return v

    @field_validator("freq_ratio")
    @classmethod
    def _ratio(cls, v):
        bad = {k: r for k, r in v.items() if k not in ("l", "s") or r < 1}
        if bad:
            raise ValueError(f"freq_ratio takes roles l/s with positive integers, got {bad}")
        return {"l": 1, "s": 1} | v


class AdapterSpec(_Strict):
    kind: Literal["mlp", "lpka_full", "lpka_row_only", "lpka_avg", "none", "copy_share", "kd"] = "lpka_full"
    r: int = Field(8, ge=1)
    d: int = Field(16, ge=1)
    layers: int = Field(1, ge=1)
    omega_trainable: bool = True


class LearningRates(_Strict):
    l: float = Field(0.05, gt=0)
    s: float = Field(0.05, gt=0)
    adapter: float = Field(0.05, ge=0)


class KDSpec(_Strict):
    temperature: float = Field(4.0, gt=0)
    alpha: float = Field(0.9, ge=0, le=1)


class ExperimentConfig(_Strict):
    name: str = "run"
    seed: int = 0
    total_steps: int = Field(1000, ge=1)
    eval_every: int = Field(0, ge=0)
    batch_size: int = Field(64, ge=1)
    output_dir: Optional[str] = None
    models: dict[str, ModelSpec]
    datasets: dict[str, DatasetSpec]
    plan: PlanSpec = Field(default_factory=PlanSpec)
    adapter: AdapterSpec = Field(default_factory=AdapterSpec)
    lr: LearningRates = Field(default_factory=LearningRates)
    kd: KDSpec = Field(default_factory=KDSpec)

    @model_validator(mode="after")
    def _check(self):
        roles = set(self.models)
        if roles not in ({"l", "s"}, {"l"}):
            raise ValueError(f"models must have roles l and s (or only l for self-transfer), got {sorted(roles)}")
        if set(self.datasets) != roles:
            raise ValueError(f"datasets must have exactly the model roles {sorted(roles)}, got {sorted(self.datasets)}")
        kind = self.adapter.kind
        if self.self_transfer and kind in ("kd", "copy_share"):
            raise ValueError(f"adapter kind {kind} needs two models")
        if kind == "kd":
            dl, ds = self.datasets["l"], self.datasets["s"]
            if dl.classes != ds.classes or dl.input_shape != ds.input_shape:
                raise ValueError(
                    "adapter kind kd needs both models on the same labels and inputs, got "
                    f"classes {dl.classes}/{ds.classes} and inputs {dl.input_shape}/{ds.input_shape}"
                )
        if self.plan.frozen_source:
            if self.self_transfer:
                raise ValueError("plan.frozen_source needs two models")
            if self.plan.directions != "l2s":
                raise ValueError("plan.frozen_source only supports directions l2s")
        for role, spec in self.models.items():
            if spec.kind.startswith("cnn") and len(self.datasets[role].input_shape) != 3:
                raise ValueError(f"datasets.{role} must set shape [channels, height, width] for {spec.kind}")
        return self

    @property
    def self_transfer(self) -> bool:
        return set(self.models) == {"l"}

    @property
    def transfers(self) -> bool:
        return self.adapter.kind not in ("none", "kd") and bool(self.plan.pairs)


def _format_errors(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        key = ".".join(str(p) for p in err["loc"]) or "<root>"
        msg = err["msg"]
        if err["type"] == "extra_forbidden":
            msg = "unknown key"
        lines.append(f"{key}: {msg}")
    return "; ".join(lines)


def config_from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError(f"config must be a mapping, got {type(data).__name__}")
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_format_errors(exc)) from None


def parse_config(text: str) -> ExperimentConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"not valid YAML: {exc}") from None
    return config_from_dict(data)


def parse_configs(text: str) -> list[ExperimentConfig]:
    """A single config mapping, or a YAML list of them."""
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"not valid YAML: {exc}") from None
    if isinstance(data, list):
        if not data:
            raise ConfigError("config list is empty")
        return [config_from_dict(d) for d in data]
    return [config_from_dict(data)]


def emit_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.model_dump(mode="json"), sort_keys=False)


def config_hash(cfg: ExperimentConfig) -> str:
    """Stable id of everything that defines the experiment except seed and output location."""
    body = cfg.model_dump(mode="json", exclude={"seed", "output_dir"})
    return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()[:12]


# ---------------------------------------------------------------------------
# presets


def _task(train_size: int, **kw) -> dict:
    base = dict(classes=10, dim=64, train_size=train_size, test_size=2000, separation=4.0,
                components=2, informative_dims=6, task_seed=7)
    return base | kw


def _base(name: str, steps: int = 300, **over) -> dict:
    cfg = {
        "name": name,
        "total_steps": steps,
        "eval_every": max(steps // 10, 1),
        "models": {"l": {"kind": "mlp_large"}, "s": {"kind": "mlp_small"}},
        "datasets": {"l": _task(10000), "s": _task(1000)},
        "plan": {"pairs": [["fc1", "fc1"]], "directions": "l2s"},
        "adapter": {"kind": "lpka_full"},
    }
    for key, value in over.items():
        cfg[key] = cfg.get(key, {}) | value if isinstance(value, dict) else value
    return cfg


def _synthetic_transfer() -> list[dict]:
    return [
        _base("lpka_full", steps=1000),
        _base("vanilla", steps=1000, adapter={"kind": "none"}),
    ]


def _cross_structure() -> list[dict]:
    img = {"dim": 192, "shape": [3, 8, 8]}
    return [
        _base(
            name,
            models={"s": {"kind": "cnn_small"}},
            datasets={"l": _task(10000, dim=192), "s": _task(1000, **img)},
            plan={"pairs": [["head", "conv2"]], "directions": "both"},
            adapter={"kind": kind},
        )
        for name, kind in (("lpka_full", "lpka_full"), ("vanilla", "none"))
    ]


def _self_transfer() -> list[dict]:
    one = {"models": {"l": {"kind": "mlp_small"}}, "datasets": {"l": _task(1000)}}
    out = [dict(_base("vanilla", adapter={"kind": "none"}), **one)]
    for inner in ("fc1", "fc2"):
        out.append(dict(_base(f"head_to_{inner}", plan={"pairs": [["head", inner]]}), **one))
    return out


def _frozen_source() -> list[dict]:
    frozen = {"frozen_source": True, "pretrain_steps": 300}
    return [
        _base("frozen_lpka_full", plan=frozen),
        _base("frozen_vanilla", plan=frozen, adapter={"kind": "none"}),
    ]


def _cross_layer() -> list[dict]:
    pairings = (("fc1", "fc1"), ("fc2", "fc2"), ("fc3", "fc2"), ("head", "head"))
    return [_base(f"{a}_to_{b}", plan={"pairs": [[a, b]]}) for a, b in pairings]


def _tcycle_sweep() -> list[dict]:
    return [_base(f"tcycle_{t}", plan={"t_cycle": t}) for t in (1, 2, 4, 8, 16)]


def _ablation() -> list[dict]:
    return [_base(k, adapter={"kind": k}) for k in ("mlp", "lpka_row_only", "lpka_avg", "lpka_full")]


def _baselines() -> list[dict]:
    return [_base(k, adapter={"kind": k}) for k in ("copy_share", "kd", "none")]


PRESETS = {
    "synthetic_transfer": _synthetic_transfer,
    "cross_structure": _cross_structure,
    "self_transfer": _self_transfer,
    "frozen_source": _frozen_source,
    "cross_layer": _cross_layer,
    "tcycle_sweep": _tcycle_sweep,
    "ablation_table7": _ablation,
    "baselines": _baselines,
}


def preset(name: str) -> list[ExperimentConfig]:
    try:
        build = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; presets are {sorted(PRESETS)}") from None
    return [config_from_dict(d) for d in build()]
