"""
run_config.py: RunConfig pydantic model + YAML load/save

One YAML file fully describes one experiment (all seeds). The resolved
config is written back into the run directory (resolved_config.yaml) so
the run can be repeated from that directory alone.

Design principles:
- schema_version versions the config format
- StrategyConfig checks strategy/hyperparameter consistency
  (β only for UpOnly/UpDown, α only for BiML)
- validation errors become ConfigError carrying the field path (e.g. strategy.beta)

Version: 1.0.0
Last Updated: 2026-10-19
"""

from __future__ import annotations

from pathlib import Path
from typing import List, Literal, Optional

import yaml
from pydantic import BaseModel, Field, ValidationError, model_validator

from binary_net import LayerSpec, TrainConfig, conv_architecture, dense_architecture
from errors import ConfigError
from federation import BIML, StrategyConfig

SCHEMA_VERSION = 1
RESOLVED_CONFIG_NAME = "resolved_config.yaml"

ExperimentKind = Literal["federated", "convergence-lab", "estimator-audit", "centralized"]


# ============================================================
# Sections
# ============================================================

class DatasetSpec(BaseModel):
    """Dataset: MNIST (IDX files) or synthetic Gaussian blobs."""
    kind: Literal["mnist", "synthetic"] = "synthetic"

    # mnist
    train_images: Optional[str] = None
    train_labels: Optional[str] = None
    test_images: Optional[str] = None
    test_labels: Optional[str] = None
    train_subset: Optional[int] = Field(6000, ge=1)
    test_subset: Optional[int] = Field(1000, ge=1)
    subset_seed: int = 0

    # synthetic
    classes: int = Field(10, ge=2)
    per_class: int = Field(100, ge=1)
    test_per_class: int = Field(20, ge=1)
    dims: int = Field(20, ge=1)
    margin: float = Field(4.0, gt=0)
    synth_seed: int = 0

    @model_validator(mode="after")
    def _check_paths(self) -> "DatasetSpec":
        if self.kind == "mnist":
            missing = [name for name in ("train_images", "train_labels", "test_images", "test_labels")
                       if getattr(self, name) is None]
            if missing:
                raise ValueError(f"mnist dataset needs {', '.join(missing)}")
        return self


class PartitionSpec(BaseModel):
    """How the training set is split across clients."""
    scheme: Literal["iid", "noniid", "unbalanced"] = "iid"
    classes_per_client: Optional[int] = Field(None, ge=1)

    @model_validator(mode="after")
    def _check_noniid(self) -> "PartitionSpec":
        if self.scheme == "noniid" and self.classes_per_client is None:
            raise ValueError("noniid needs classes_per_client")
        return self


class ModelSpec(BaseModel):
    """Network layout."""
    architecture: Literal["dense", "conv"] = "dense"
    hidden: int = Field(64, ge=1)
    channels: int = Field(8, ge=1)
    kernel_size: int = Field(5, ge=1)

    def layer_specs(self, image_dims, num_classes: int) -> List[LayerSpec]:
        if self.architecture == "dense":
            return dense_architecture(image_dims, self.hidden, num_classes)
        dims = tuple(image_dims)
        if len(dims) == 2:
            dims = (1,) + dims
        return conv_architecture(dims, self.channels, self.kernel_size, num_classes)


class LabSpec(BaseModel):
    """Convergence-condition checks on convex quadratics."""
    problems: int = Field(100, ge=1)
    n_min: int = Field(4, ge=1)
    n_max: int = Field(12, le=20)
    steps: int = Field(40, ge=1)
    eta: Optional[float] = Field(None, gt=0)
    geometry_samples: int = Field(10000, ge=1)
    geometry_n: int = Field(16, ge=1)
    phi_samples: int = Field(1000, ge=1)
    bias_m: int = Field(100, ge=1)
    bias_mus: List[float] = Field(default_factory=lambda: [0.0, 0.05, 0.1, 0.2])
    bias_sigmas: List[float] = Field(default_factory=lambda: [0.1, 0.2])
    alphas: List[float] = Field(default_factory=lambda: [1.0, 1.25, 1.5, 1.75, 2.0, 2.5])
    bias_trials: int = Field(10000, ge=1)
    seed: int = 0

    @model_validator(mode="after")
    def _check_range(self) -> "LabSpec":
        if self.n_min > self.n_max:
            raise ValueError("n_min must not exceed n_max")
        return self


class AuditSpec(BaseModel):
    """ML-PU estimator audit (oracle agreement, curve fits, contraction)."""
    m_values: List[float] = Field(default_factory=lambda: [10.0, 50.0, 100.0])
    grid_step: float = Field(1e-4, gt=0)
    contraction_samples: int = Field(100000, ge=1)
    fit_m: List[float] = Field(default_factory=lambda: [100.0])
    seed: int = 0


# ============================================================
# RunConfig
# ============================================================

class RunConfig(BaseModel):
    """Complete description of one experiment."""
    schema_version: int = SCHEMA_VERSION
    experiment: ExperimentKind = "federated"
    name: str = "run"

    dataset: DatasetSpec = Field(default_factory=DatasetSpec)
    partition: PartitionSpec = Field(default_factory=PartitionSpec)
    strategy: StrategyConfig = Field(default_factory=lambda: StrategyConfig(kind=BIML, alpha=1.25))
    train: TrainConfig = Field(default_factory=TrainConfig)
    model: ModelSpec = Field(default_factory=ModelSpec)
    lab: LabSpec = Field(default_factory=LabSpec)
    audit: AuditSpec = Field(default_factory=AuditSpec)

    M: int = Field(10, ge=1)
    participation: float = Field(1.0, gt=0, le=1)
    rounds: int = Field(60, ge=1)
    seeds: List[int] = Field(default_factory=lambda: [0])
    output_dir: str = "runs/latest"
    workers: int = Field(1, ge=1)
    client_workers: int = Field(1, ge=1)
    eval_clients: Optional[int] = Field(None, ge=1)
    centralized_mode: Literal["baseline", "bnn"] = "bnn"
    save_checkpoints: bool = False

    @model_validator(mode="after")
    def _check_run(self) -> "RunConfig":
        if self.schema_version != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema_version {self.schema_version}")
        if not self.seeds:
            raise ValueError("seeds must not be empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seeds must be distinct")
        return self


def _field_path(err: dict) -> str:
    return ".".join(str(p) for p in err["loc"])


def parse_config(data: dict) -> RunConfig:
    """dict -> RunConfig (validation errors raise ConfigError)."""
    try:
        return RunConfig.model_validate(data or {})
    except ValidationError as exc:
        err = exc.errors()[0]
        raise ConfigError(err["msg"], field=_field_path(err) or None) from exc


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
    if data is not None and not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return parse_config(data)


def dump_config(config: RunConfig) -> str:
    """Deterministic YAML: sorted keys, no timestamps."""
    return yaml.safe_dump(config.model_dump(mode="json"), sort_keys=True, default_flow_style=False)


def save_resolved(config: RunConfig, run_dir) -> Path:
    path = Path(run_dir) / RESOLVED_CONFIG_NAME
    path.write_text(dump_config(config))
    return path
