"""Run configuration loading, validation and hashing."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any, Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class AblationConfig(_Strict):
    disable_multi_supervision: bool = False
    disable_disentangle: bool = False
    additive_fusion: bool = False
    disable_temporal: bool = False
    disable_spatial: bool = False
    disable_graph_pe: bool = False

    def labels(self) -> list[str]:
        tags = {
            "disable_multi_supervision": "-MS",
            "disable_disentangle": "-DF",
            "additive_fusion": "-F",
            "disable_temporal": "-T",
            "disable_spatial": "-S",
            "disable_graph_pe": "-GPE",
        }
        return [tag for name, tag in tags.items() if getattr(self, name)]


class STWaveConfig(_Strict):
    """Model hyperparameters. d_model = heads * head_dim."""

    t_in: int = Field(default=12, ge=1)
    t_out: int = Field(default=12, ge=1)
    heads: int = Field(default=8, ge=1)
    head_dim: int = Field(default=16, ge=1)
    layers: int = Field(default=2, ge=1)
    kernel_size: int = Field(default=2, ge=1)
    dilation: int = Field(default=1, ge=1)
    wavelet: str = "haar"
    sample_base: int = Field(default=2, ge=2)
    sample_size: int | None = Field(default=None, ge=1)
    spatial_mode: Literal["esgat", "full", "gat"] = "esgat"
    pad_odd: bool = False
    residual: bool = True
    dropout: float = Field(default=0.0, ge=0.0, lt=1.0)
    pe_init_scale: float = -1.0
    ablations: AblationConfig = Field(default_factory=AblationConfig)

    @property
    def d_model(self) -> int:
        return self.heads * self.head_dim

    @field_validator("wavelet")
    @classmethod
    def validate_wavelet(cls, v: str) -> str:
        from stwave.wavelet import WaveletPair

        WaveletPair.from_name(v)
        return v

    @model_validator(mode="after")
    def check_even_horizons(self) -> "STWaveConfig":
        if not self.pad_odd:
            odd = [n for n, v in (("t_in", self.t_in), ("t_out", self.t_out)) if v % 2]
            if odd:
                joined = ", ".join(odd)
                raise ValueError(f"{joined} must be even for the wavelet path (or set pad_odd)")
        return self


class TrainConfig(_Strict):
    epochs: int = Field(default=200, ge=0)
    batch_size: int = Field(default=64, ge=1)
    lr: float = Field(default=1e-3, gt=0.0)
    lr_decay: float = Field(default=0.1, gt=0.0, le=1.0)
    decay_patience: int = Field(default=10, ge=1)
    early_stop_patience: int = Field(default=30, ge=1)
    seed: int = 0
    normalization: Literal["zscore", "none"] = "zscore"
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = Field(default=1e-8, gt=0.0)
    eval_batch_size: int = Field(default=256, ge=1)


class SyntheticConfig(_Strict):
    n_nodes: int = Field(default=20, ge=2)
    steps: int = Field(default=4000, ge=2)
    seed: int = 7
    graph: Literal["ring", "grid"] = "ring"
    period: int = Field(default=288, ge=2)
    base_flow: float = Field(default=200.0, ge=0.0)
    amplitude: float = Field(default=120.0, ge=0.0)
    burst_rate: float = Field(default=0.01, ge=0.0, le=1.0)
    burst_scale: float = Field(default=80.0, ge=0.0)
    burst_decay: float = Field(default=0.7, ge=0.0, lt=1.0)
    propagation: float = Field(default=0.5, ge=0.0, le=1.0)
    noise: float = Field(default=5.0, ge=0.0)


class DataConfig(_Strict):
    source: Literal["synthetic", "csv", "binary"] = "synthetic"
    path: str | None = None
    edges_path: str | None = None
    name: str | None = None
    n_nodes: int | None = Field(default=None, ge=1)
    ratios: tuple[float, float, float] = (0.6, 0.2, 0.2)
    edge_weighting: Literal["binary", "gaussian"] = "binary"
    temporal_k: int | None = Field(default=None, ge=1)
    dtw_period: int | None = Field(default=288, ge=2)
    dtw_workers: int = Field(default=1, ge=1)
    synthetic: SyntheticConfig = Field(default_factory=SyntheticConfig)

    @field_validator("ratios")
    @classmethod
    def validate_ratios(cls, v: tuple[float, float, float]) -> tuple[float, float, float]:
        if any(r < 0 for r in v) or abs(sum(v) - 1.0) > 1e-9:
            raise ValueError(f"split ratios must be non-negative and sum to 1, got {v}")
        if v[0] == 0:
            raise ValueError("training ratio must be positive")
        return v

    @model_validator(mode="after")
    def check_paths(self) -> "DataConfig":
        if self.source != "synthetic" and not (self.path and self.edges_path):
            raise ValueError(f"source '{self.source}' needs both path and edges_path")
        return self


class AblateConfig(_Strict):
    variants: list[str] = Field(
        default_factory=lambda: ["full", "no-ms", "no-df", "no-f", "no-t", "no-s"]
    )
    baseline: str = "full"
    max_parallel: int = Field(default=1, ge=1, le=16)


class BenchConfig(_Strict):
    sizes: list[int] = Field(default_factory=lambda: [256, 512, 1024, 2048])
    d_model: int = Field(default=64, ge=1)
    heads: int = Field(default=4, ge=1)
    steps: int = Field(default=12, ge=1)
    repeats: int = Field(default=5, ge=1)
    modes: list[Literal["esgat", "full", "gat"]] = Field(
        default_factory=lambda: ["esgat", "full", "gat"]
    )
    avg_degree: int = Field(default=4, ge=1)
    seed: int = 0


class RunConfig(_Strict):
    """Everything a run needs; its hash stamps every artifact."""

    name: str = "stwave"
    data: DataConfig = Field(default_factory=DataConfig)
    model: STWaveConfig = Field(default_factory=STWaveConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    ablate: AblateConfig = Field(default_factory=AblateConfig)
    bench: BenchConfig = Field(default_factory=BenchConfig)
    output_dir: str = "runs"
    seed: int | None = None

    @model_validator(mode="after")
    def apply_seed(self) -> "RunConfig":
        if self.seed is not None:
            self.train.seed = self.seed
        return self


def get_base_dir() -> Path:
    """Return the stwave package directory."""
    return Path(__file__).resolve().parent


def parse_override(item: str) -> tuple[list[str], Any]:
    """``model.layers=3`` -> (["model", "layers"], 3)."""
    if "=" not in item:
        raise ValueError(f"Override must look like key.path=value, got '{item}'")
    key, raw = item.split("=", 1)
    parts = [p for p in key.strip().split(".") if p]
    if not parts:
        raise ValueError(f"Override has an empty key: '{item}'")
    return parts, yaml.safe_load(raw) if raw.strip() else None


def apply_overrides(data: dict[str, Any], overrides: list[str] | None) -> dict[str, Any]:
    for item in overrides or []:
        parts, value = parse_override(item)
        node = data
        for part in parts[:-1]:
            child = node.get(part)
            if not isinstance(child, dict):
                child = {}
                node[part] = child
            node = child
        node[parts[-1]] = value
    return data


def load_run_config(
    path: str | Path | None = None, overrides: list[str] | None = None
) -> RunConfig:
    """Load a YAML run config (or defaults when ``path`` is None) and apply overrides."""
    data: dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"Run config not found: {path}")
        with open(path) as f:
            data = yaml.safe_load(f) or {}
        if not isinstance(data, dict):
            raise ValueError(f"Run config must be a mapping: {path}")
    return RunConfig(**apply_overrides(data, overrides))


def config_hash(config: BaseModel) -> str:
    canonical = json.dumps(config.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()[:12]


def dump_config(config: BaseModel) -> str:
    return yaml.safe_dump(config.model_dump(mode="json"), sort_keys=False)
