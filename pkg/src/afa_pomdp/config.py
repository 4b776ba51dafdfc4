"""Experiment configuration: one YAML file, strict schema, dotted overrides."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any, Literal, Optional, Sequence

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

# per-environment defaults (VAE tables; RL sizes follow the architecture descriptions)
VAE_LR = {
    ("bouncing_ball", "nonseq-zi"): 1e-4,
    ("bouncing_ball", "seq-po-vae"): 5e-4,
    ("sepsis", "nonseq-zi"): 1e-4,
    ("sepsis", "seq-po-vae"): 1e-3,
}
VAE_BETA = {"bouncing_ball": 1.0, "sepsis": 0.01}
POLICY_HIDDEN = {"bouncing_ball": 1024, "sepsis": 256}
POLICY_INPUT_PROJ = {"bouncing_ball": 1024, "sepsis": None}


class ConfigError(ValueError):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class EnvConfig(_Strict):
    name: Literal["bouncing_ball", "sepsis"] = "sepsis"
    dynamics_path: Optional[str] = Field(None, description="Sepsis dynamics file; null = shipped default")


class CostConfig(_Strict):
    unit_cost: float = Field(0.01, ge=0.0)
    discount: float = Field(0.99, ge=0.0, lt=1.0)


class DataConfig(_Strict):
    n_train: int = Field(2000, gt=0)
    n_test: int = Field(2000, gt=0)
    random_fraction: float = Field(0.5, ge=0.0, le=1.0)
    random_acq_prob: float = Field(0.5, ge=0.0, le=1.0)
    collection_policy: Optional[str] = None
    allow_random_fallback: bool = False
    dataset_dir: Optional[str] = Field(None, description="directory holding train/ and test/ splits")


class VAEConfig(_Strict):
    model: Literal["seq-po-vae", "nonseq-zi"] = "seq-po-vae"
    supervision: Literal["partial", "full", "fraction"] = "full"
    fraction: float = Field(1.0, gt=0.0, le=1.0)
    beta: Optional[float] = Field(None, ge=0.0)
    learning_rate: Optional[float] = Field(None, gt=0.0)
    batch_size: int = Field(8, gt=0)
    epochs: int = Field(20, gt=0)
    latent_dim: Optional[int] = Field(None, gt=0)
    checkpoint: Optional[str] = None


class RLConfig(_Strict):
    input: Literal["belief", "end_to_end"] = "belief"
    learning_rate: float = Field(5e-4, gt=0.0)
    workers: int = Field(16, gt=0)
    rollout_length: int = Field(20, gt=0)
    entropy_coef: float = Field(0.01, ge=0.0)
    value_coef: float = Field(0.5, ge=0.0)
    max_grad_norm: float = Field(40.0, gt=0.0)
    total_env_steps: int = Field(300_000, gt=0)
    eval_interval: int = Field(30_000, gt=0)
    eval_episodes: int = Field(100, gt=0)
    hidden_size: Optional[int] = Field(None, gt=0)
    random_acq_prob: Optional[float] = Field(None, ge=0.0, le=1.0)
    # [[env_step, unit_cost], ...]: switch the acquisition cost once env_step is reached
    cost_schedule: Optional[list[tuple[int, float]]] = None
    serialized_updates: bool = True
    checkpoint: Optional[str] = None


class EvalConfig(_Strict):
    costs: list[float] = Field(default_factory=lambda: [0.0, 0.01, 0.025])
    random_probs: list[float] = Field(default_factory=lambda: [0.25, 0.5, 0.75, 1.0])
    seeds: list[int] = Field(default_factory=lambda: [0, 1, 2])
    metrics: list[str] = Field(default_factory=list, description="metrics CSVs for the plot command")

    @field_validator("costs")
    @classmethod
    def _nonempty(cls, v):
        if not v:
            raise ValueError("cost list must be nonempty")
        return v


class ExperimentConfig(_Strict):
    env: EnvConfig = Field(default_factory=EnvConfig)
    cost: CostConfig = Field(default_factory=CostConfig)
    data: DataConfig = Field(default_factory=DataConfig)
    vae: VAEConfig = Field(default_factory=VAEConfig)
    rl: RLConfig = Field(default_factory=RLConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    master_seed: int = 0
    output_dir: str = "runs/default"

    @model_validator(mode="after")
    def _fraction_mode(self):
        if self.vae.supervision != "fraction" and self.vae.fraction != 1.0:
            raise ValueError("vae.fraction is only meaningful with vae.supervision = fraction")
        return self

    # resolved defaults -------------------------------------------------------
    @property
    def vae_learning_rate(self) -> float:
        return self.vae.learning_rate or VAE_LR[(self.env.name, self.vae.model)]

    @property
    def vae_beta(self) -> float:
        return VAE_BETA[self.env.name] if self.vae.beta is None else self.vae.beta

    @property
    def policy_hidden(self) -> int:
        return self.rl.hidden_size or POLICY_HIDDEN[self.env.name]

    @property
    def config_hash(self) -> str:
        return config_hash(self)

    def snapshot(self) -> dict[str, Any]:
        return self.model_dump(mode="json")

    def check_paths(self) -> None:
        """Every file reference given must resolve."""
        refs = {
            "env.dynamics_path": self.env.dynamics_path,
            "data.collection_policy": self.data.collection_policy,
            "data.dataset_dir": self.data.dataset_dir,
            "vae.checkpoint": self.vae.checkpoint,
            "rl.checkpoint": self.rl.checkpoint,
        }
        refs.update({f"eval.metrics[{i}]": p for i, p in enumerate(self.eval.metrics)})
        missing = [f"{k} -> {v}" for k, v in refs.items() if v is not None and not Path(v).exists()]
        if missing:
            raise ConfigError("unresolvable file references: " + ", ".join(missing))


def config_hash(cfg: ExperimentConfig) -> str:
    content = cfg.model_dump(mode="json")
    content.pop("output_dir")
    return hashlib.sha256(json.dumps(content, sort_keys=True).encode()).hexdigest()[:16]


def documented_keys(model: type[BaseModel] = ExperimentConfig, prefix: str = "") -> list[str]:
    keys = []
    for name, info in model.model_fields.items():
        ann = info.annotation
        if isinstance(ann, type) and issubclass(ann, BaseModel):
            keys += documented_keys(ann, f"{prefix}{name}.")
        else:
            keys.append(prefix + name)
    return keys


def _set_dotted(doc: dict, dotted: str, value: Any) -> None:
    parts = dotted.split(".")
    node = doc
    for part in parts[:-1]:
        nxt = node.setdefault(part, {})
        if not isinstance(nxt, dict):
            raise ConfigError(f"override {dotted!r}: {part!r} is not a section")
        node = nxt
    node[parts[-1]] = value


def parse_overrides(overrides: Sequence[str]) -> list[tuple[str, Any]]:
    out = []
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key.path=value")
        key, raw = item.split("=", 1)
        out.append((key.strip(), yaml.safe_load(raw)))
    return out


def _format_errors(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"])
        if err["type"] == "extra_forbidden":
            lines.append(f"unknown config key {loc!r}")
        else:
            lines.append(f"{loc}: {err['msg']}")
    return "; ".join(lines)


def build_config(doc: Optional[dict] = None, overrides: Sequence[str] = ()) -> ExperimentConfig:
    doc = json.loads(json.dumps(doc or {}))
    # snapshots carry their own hash; it must still match the content
    claimed = doc.pop("config_hash", None)
    for key, value in parse_overrides(overrides):
        _set_dotted(doc, key, value)
    try:
        cfg = ExperimentConfig.model_validate(doc)
    except ValidationError as exc:
        raise ConfigError(_format_errors(exc)) from None
    if claimed is not None and not overrides and claimed != cfg.config_hash:
        raise ConfigError(f"config_hash {claimed} does not match content hash {cfg.config_hash}")
    return cfg


def load_config(path: Optional[str | Path] = None, overrides: Sequence[str] = ()) -> ExperimentConfig:
    doc: dict = {}
    if path is not None:
        try:
            doc = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"config {path} must be a mapping at top level")
    return build_config(doc, overrides)


def dump_config(cfg: ExperimentConfig, path: str | Path) -> None:
    snap = cfg.snapshot()
    snap["config_hash"] = cfg.config_hash
    Path(path).write_text(yaml.safe_dump(snap, sort_keys=True))
