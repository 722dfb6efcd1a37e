"""Experiment engine: data preparation, training runs, re-evaluation and ablation sweeps."""

from __future__ import annotations

import asyncio
import io
import json
import logging
import uuid
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
import torch
from rich.console import Console
from rich.panel import Panel

from stwave.artifacts import atomic_write, write_text
from stwave.config import RunConfig, STWaveConfig, config_hash, dump_config
from stwave.data import Dataset, ingest_flow, synth_traffic
from stwave.env import get_db_path
from stwave.errors import STWaveError
from stwave.graphs import EigenCache, Graph, build_temporal_graph
from stwave.model import STWave, count_parameters, load_checkpoint
from stwave.state import RunStatus, RunStore
from stwave.task_queue import TaskQueue, TaskResult
from stwave.training import (
    EpochRecord,
    ForecastReport,
    TrainResult,
    Windows,
    ZScoreScaler,
    build_windows,
    chronological_split,
    evaluate,
    ha_report,
    train,
)
from stwave.variant_manager import VariantManager
from stwave.wavelet import WaveletPair

console = Console()
logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")


@dataclass
class PreparedData:
    dataset: Dataset
    scaler: ZScoreScaler
    spatial: Graph
    temporal: Graph
    windows: dict[str, Windows]


@dataclass
class RunOutcome:
    label: str
    output_dir: Path
    config_hash: str
    result: TrainResult
    test: ForecastReport
    val: ForecastReport | None
    baseline: ForecastReport
    parameters: int = 0
    artifacts: dict[str, Path] = field(default_factory=dict)


def load_dataset(config: RunConfig) -> Dataset:
    data = config.data
    if data.source == "synthetic":
        syn = data.synthetic
        return synth_traffic(syn.n_nodes, syn.steps, syn.seed, syn.graph, syn)
    return ingest_flow(
        data.path,
        data.source,
        data.edges_path,
        n_nodes=data.n_nodes,
        name=data.name,
        edge_weighting=data.edge_weighting,
    )


def temporal_k(config: RunConfig, spatial: Graph) -> int:
    """Configured k, else the spatial mean degree, clamped to [1, N-1]."""
    k = config.data.temporal_k or int(round(spatial.mean_degree()))
    return min(max(k, 1), spatial.n_nodes - 1)


def prepare_data(config: RunConfig, dataset: Dataset | None = None) -> PreparedData:
    """Split chronologically, fit normalization on train, build the DTW graph, window."""
    dataset = dataset if dataset is not None else load_dataset(config)
    model = config.model
    window = model.t_in + model.t_out
    flows = chronological_split(dataset.flow, config.data.ratios, window=window)
    masks = chronological_split(dataset.mask.unsqueeze(-1), config.data.ratios)

    if config.train.normalization == "zscore":
        scaler = ZScoreScaler.fit(flows[0], masks[0])
    else:
        scaler = ZScoreScaler.identity()

    train_history = torch.where(masks[0], flows[0], torch.zeros_like(flows[0]))
    temporal = build_temporal_graph(
        train_history,
        temporal_k(config, dataset.graph),
        period=config.data.dtw_period,
        workers=config.data.dtw_workers,
    )
    pair = WaveletPair.from_name(model.wavelet)
    windows = {
        split: build_windows(
            flow, mask, scaler, model.t_in, model.t_out, pair, pad_odd=model.pad_odd
        )
        for split, flow, mask in zip(SPLITS, flows, masks)
    }
    logger.info(
        "Windows: train=%d val=%d test=%d (temporal k=%d)",
        *(len(windows[s]) for s in SPLITS), temporal.metadata["k"],
    )
    return PreparedData(dataset, scaler, dataset.graph, temporal, windows)


def _data_key(config: RunConfig) -> str:
    m = config.model
    payload = {
        "data": config.data.model_dump(mode="json"),
        "normalization": config.train.normalization,
        "window": [m.t_in, m.t_out, m.wavelet, m.pad_odd],
    }
    return json.dumps(payload, sort_keys=True)


def write_config(path: Path, config: RunConfig) -> Path:
    header = f"# config_hash: {config_hash(config)}\n"
    return write_text(path, header + dump_config(config))


def write_predictions(path: Path, windows: Windows, predictions: torch.Tensor) -> Path:
    buffer = io.BytesIO()
    np.savez_compressed(
        buffer,
        predictions=predictions[..., 0].numpy(),
        targets=windows.raw_targets[..., 0].numpy(),
        mask=windows.mask[..., 0].numpy(),
    )
    return atomic_write(path, lambda f: f.write(buffer.getvalue()))


class ExperimentRunner:
    """Trains, evaluates and ablates STWave models for one RunConfig."""

    def __init__(
        self,
        config: RunConfig,
        output_dir: str | Path | None = None,
        *,
        state: RunStore | None = None,
        variants: VariantManager | None = None,
        eigen_cache: EigenCache | None = None,
    ):
        self.config = config
        self.output_dir = Path(output_dir or Path(config.output_dir) / config.name)
        self.state = state
        self.variants = variants or VariantManager()
        self.eigen_cache = eigen_cache or EigenCache(self.output_dir / ".eigen-cache")
        self._prepared: dict[str, PreparedData] = {}
        self._dataset: Dataset | None = None

    @classmethod
    async def create(
        cls,
        config: RunConfig,
        output_dir: str | Path | None = None,
        db_path: str | Path | None = None,
    ) -> "ExperimentRunner":
        state = RunStore(db_path or get_db_path())
        await state.initialize()
        return cls(config, output_dir, state=state)

    async def cleanup(self) -> None:
        if self.state is not None:
            await self.state.close()

    # ── Data and models ───────────────────────────────────────────────

    def prepare(self, config: RunConfig | None = None) -> PreparedData:
        config = config or self.config
        key = _data_key(config)
        if key not in self._prepared:
            if config.data == self.config.data:
                if self._dataset is None:
                    self._dataset = load_dataset(config)
                dataset = self._dataset
            else:
                dataset = load_dataset(config)
            self._prepared[key] = prepare_data(config, dataset)
        return self._prepared[key]

    def build_model(self, model_config: STWaveConfig, data: PreparedData, seed: int) -> STWave:
        return STWave(
            model_config, data.spatial, data.temporal, seed=seed, eigen_cache=self.eigen_cache
        )

    # ── Training ──────────────────────────────────────────────────────

    def fit(
        self,
        config: RunConfig,
        output_dir: Path,
        *,
        label: str = "STWave",
        verbose: bool = True,
    ) -> RunOutcome:
        """Train one model and write every artifact into ``output_dir``. Blocking."""
        data = self.prepare(config)
        chash = config_hash(config)
        output_dir.mkdir(parents=True, exist_ok=True)
        artifacts = {"config": write_config(output_dir / "config.yaml", config)}

        model = self.build_model(config.model, data, config.train.seed)
        n_params = count_parameters(model)
        logger.info("%s: %d parameters, d_model=%d", label, n_params, config.model.d_model)

        def on_epoch(record: EpochRecord) -> None:
            if verbose:
                console.print(
                    f"  [dim]{label} epoch {record.epoch:>3}[/]  "
                    f"loss {record.train_loss:.4f}  val MAE {record.val_mae:.3f}"
                )

        checkpoint = output_dir / "checkpoint.pt"
        result = train(
            model,
            data.windows["train"],
            data.windows["val"],
            config.train,
            data.scaler,
            checkpoint_path=checkpoint,
            checkpoint_extra={
                "config_hash": chash,
                "run_config": config.model_dump(mode="json"),
                "label": label,
            },
            on_epoch=on_epoch,
        )
        artifacts["checkpoint"] = checkpoint

        batch = config.train.eval_batch_size
        test, predictions = evaluate(
            model, data.windows["test"], data.scaler, batch_size=batch,
            label=label, split="test", config_hash=chash, return_predictions=True,
        )
        val = None
        if len(data.windows["val"]):
            val = evaluate(
                model, data.windows["val"], data.scaler, batch_size=batch,
                label=label, split="val", config_hash=chash,
            )
        baseline = ha_report(
            data.windows["test"], config.model.t_out, split="test", config_hash=chash
        )

        artifacts["report_test"] = test.to_json(output_dir / "report_test.json")
        artifacts["report_test_csv"] = test.to_csv(output_dir / "report_test.csv")
        if val is not None:
            artifacts["report_val"] = val.to_json(output_dir / "report_val.json")
        artifacts["baseline_ha"] = baseline.to_json(output_dir / "baseline_ha.json")
        artifacts["predictions"] = write_predictions(
            output_dir / "predictions.npz", data.windows["test"], predictions
        )
        history = pd.DataFrame([vars(r) for r in result.history])
        artifacts["history"] = write_text(
            output_dir / "history.csv", history.to_csv(index=False, float_format="%.10g")
        )

        return RunOutcome(
            label=label,
            output_dir=output_dir,
            config_hash=chash,
            result=result,
            test=test,
            val=val,
            baseline=baseline,
            parameters=n_params,
            artifacts=artifacts,
        )

    async def _record(self, run_id: str, outcome: RunOutcome) -> None:
        if self.state is None:
            return
        for r in outcome.result.history:
            await self.state.add_epoch(
                run_id, r.epoch, r.train_loss, r.val_mae, r.lr, label=outcome.label
            )
        for report in (outcome.test, outcome.val, outcome.baseline):
            if report is not None:
                await self.state.add_report(run_id, report.to_dict())

    async def run(self) -> tuple[str, RunOutcome]:
        """Train the configured model. Returns the run id and the outcome."""
        run_id = f"run-{uuid.uuid4().hex[:12]}"
        chash = config_hash(self.config)
        console.print(Panel(
            f"[bold]Run:[/] {self.config.name}\n"
            f"[bold]Data:[/] {self.config.data.source}\n"
            f"[bold]Config hash:[/] {chash}\n"
            f"[bold]Output:[/] {self.output_dir}\n"
            f"[bold]Run ID:[/] {run_id}",
            title="[bold cyan]STWave[/]",
            border_style="cyan",
        ))
        if self.state is not None:
            await self.state.create_run(
                run_id, self.config.name, kind="train", config_hash=chash,
                output_dir=str(self.output_dir),
                config_snapshot=self.config.model_dump(mode="json"),
            )
            await self.state.update_run_status(run_id, RunStatus.RUNNING)
        try:
            outcome = await asyncio.to_thread(self.fit, self.config, self.output_dir)
        except Exception:
            if self.state is not None:
                await self.state.update_run_status(run_id, RunStatus.FAILED)
            raise
        await self._record(run_id, outcome)
        if self.state is not None:
            await self.state.update_run_status(run_id, RunStatus.COMPLETED)
        return run_id, outcome

    # ── Evaluation ────────────────────────────────────────────────────

    def evaluate(
        self, checkpoint: str | Path, split: str = "test"
    ) -> tuple[ForecastReport, RunConfig]:
        """Rebuild the data and model a checkpoint was trained with and report on ``split``."""
        payload = load_checkpoint(checkpoint)
        extra = payload.get("extra") or {}
        if "run_config" not in extra:
            raise ValueError(f"Checkpoint {checkpoint} carries no run config")
        config = RunConfig(**extra["run_config"])
        data = self.prepare(config)
        model = self.build_model(STWaveConfig(**payload["model_config"]), data, payload["seed"])
        model.load_state_dict(payload["state_dict"])
        scaler = ZScoreScaler(**extra["scaler"])
        report = evaluate(
            model,
            data.windows[split],
            scaler,
            batch_size=config.train.eval_batch_size,
            label=extra.get("label", "STWave"),
            split=split,
            config_hash=extra.get("config_hash", config_hash(config)),
        )
        return report, config

    # ── Ablation ──────────────────────────────────────────────────────

    async def ablate(self) -> pd.DataFrame:
        """Train every configured variant through the task queue and compare them."""
        if self.state is None:
            raise RuntimeError("ablate() needs a RunStore; build the runner with create()")
        run_id = f"ablate-{uuid.uuid4().hex[:12]}"
        names = list(dict.fromkeys(self.config.ablate.variants))
        variants = {name: self.variants.get(name) for name in names}
        configs = {name: v.apply(self.config) for name, v in variants.items()}

        console.print(Panel(
            f"[bold]Variants:[/] {', '.join(names)}\n"
            f"[bold]Baseline:[/] {self.config.ablate.baseline}\n"
            f"[bold]Parallel:[/] {self.config.ablate.max_parallel}\n"
            f"[bold]Run ID:[/] {run_id}",
            title="[bold cyan]STWave ablation[/]",
            border_style="cyan",
        ))
        await self.state.create_run(
            run_id, self.config.name, kind="ablate", config_hash=config_hash(self.config),
            output_dir=str(self.output_dir), config_snapshot=self.config.model_dump(mode="json"),
        )
        await self.state.update_run_status(run_id, RunStatus.RUNNING)

        # data is shared, so build it before any worker thread starts
        for cfg in configs.values():
            self.prepare(cfg)

        task_ids = []
        for name in names:
            task_id = f"{run_id}-{name}"
            await self.state.create_task(
                task_id, run_id, f"Train {variants[name].label} ({name})", variant=name
            )
            task_ids.append(task_id)
        await self.state.create_task(
            f"{run_id}-compare", run_id, "Compare variants", priority=-1, dependencies=task_ids
        )

        outcomes: dict[str, RunOutcome] = {}
        table_path = self.output_dir / "ablation.csv"
        table_path.unlink(missing_ok=True)

        async def executor(task: dict) -> TaskResult:
            name = task["variant"]
            if name is None:
                table = ablation_table(
                    [outcomes[n] for n in names], names, self.config.ablate.baseline
                )
                write_text(table_path, table.to_csv(index=False, float_format="%.10g"))
                return TaskResult(task["id"], True, output=str(table_path))
            outcome = await asyncio.to_thread(
                self.fit, configs[name], self.output_dir / name,
                label=variants[name].label, verbose=False,
            )
            outcomes[name] = outcome
            await self._record(run_id, outcome)
            return TaskResult(
                task["id"], True, output=f"test MAE {outcome.test.mae:.4f}",
                payload={"mae": outcome.test.mae},
            )

        queue = TaskQueue(self.state, max_parallel=self.config.ablate.max_parallel)
        await queue.execute_all(run_id, executor)

        if not table_path.exists() or len(outcomes) != len(names):
            await self.state.update_run_status(run_id, RunStatus.FAILED)
            failed = [n for n in names if n not in outcomes]
            raise STWaveError(f"Ablation incomplete; failed variants: {failed}")
        await self.state.update_run_status(run_id, RunStatus.COMPLETED)
        return pd.read_csv(table_path)


def ablation_table(
    outcomes: list[RunOutcome], names: list[str], baseline: str
) -> pd.DataFrame:
    """One row per variant; ``*_change`` columns are relative to the baseline variant."""
    frame = pd.DataFrame(
        [
            {
                "variant": name,
                "label": o.test.label,
                "mae": o.test.mae,
                "rmse": o.test.rmse,
                "mape": o.test.mape,
                "best_epoch": o.result.best_epoch,
                "parameters": o.parameters,
                "config_hash": o.config_hash,
            }
            for name, o in zip(names, outcomes)
        ]
    )
    base = frame.loc[frame["variant"] == baseline]
    for metric in ("mae", "rmse", "mape"):
        if base.empty:
            frame[f"{metric}_change"] = np.nan
        else:
            ref = float(base[metric].iloc[0])
            frame[f"{metric}_change"] = (frame[metric] - ref) / ref if ref else np.nan
    return frame
