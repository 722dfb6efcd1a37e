"""Splitting, normalization, metrics, the HA baseline and the training loop."""

from __future__ import annotations

import logging
import math
from collections.abc import Callable, Iterable
from dataclasses import asdict, dataclass, field
from pathlib import Path

import pandas as pd
import torch
from torch.optim.lr_scheduler import ReduceLROnPlateau
from torch.utils.data import DataLoader, TensorDataset

from stwave.artifacts import atomic_write, read_json, write_json
from stwave.attention import seed_dropout
from stwave.config import TrainConfig
from stwave.errors import (
    ConstantSeriesError,
    DivergenceError,
    InsufficientDataError,
    NonFiniteGradientError,
    NumericError,
)
from stwave.model import STWave, save_checkpoint
from stwave.numerics import generator
from stwave.wavelet import WaveletPair, low_target

logger = logging.getLogger(__name__)

MAPE_THRESHOLD = 1.0


# ── Splits and windows ────────────────────────────────────────────────


def split_bounds(length: int, ratios: tuple[float, float, float]) -> list[tuple[int, int]]:
    if any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must be non-negative and sum to 1, got {ratios}")
    n_train = math.floor(length * ratios[0] + 1e-9)
    n_val = math.floor(length * ratios[1] + 1e-9)
    cuts = [0, n_train, n_train + n_val, length]
    return [(cuts[i], cuts[i + 1]) for i in range(3)]


def chronological_split(
    series: torch.Tensor,
    ratios: tuple[float, float, float] = (0.6, 0.2, 0.2),
    *,
    window: int | None = None,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Contiguous train/val/test segments along the first axis.

    Every segment with a non-zero ratio must hold at least one ``window``.
    """
    bounds = split_bounds(series.shape[0], ratios)
    if window is not None:
        for label, ratio, (lo, hi) in zip(("train", "val", "test"), ratios, bounds):
            if ratio > 0 and hi - lo < window:
                raise InsufficientDataError(
                    f"{label} segment has {hi - lo} steps but a window needs {window}"
                )
    return tuple(series[lo:hi] for lo, hi in bounds)


def make_windows(
    segment: torch.Tensor, t_in: int, t_out: int
) -> tuple[torch.Tensor, torch.Tensor]:
    """Sliding (history, future) pairs; count = len - t_in - t_out + 1."""
    span = t_in + t_out
    count = segment.shape[0] - span + 1
    if count <= 0:
        empty = segment.new_zeros((0, span, *segment.shape[1:]))
        return empty[:, :t_in], empty[:, t_in:]
    # unfold puts the window axis last
    frames = segment.unfold(0, span, 1).movedim(-1, 1)
    return frames[:, :t_in], frames[:, t_in:]


# ── Normalization ─────────────────────────────────────────────────────


@dataclass
class ZScoreScaler:
    """Global mean/std fitted on valid training entries only."""

    mean: float = 0.0
    std: float = 1.0

    @classmethod
    def fit(cls, values: torch.Tensor, mask: torch.Tensor | None = None) -> "ZScoreScaler":
        data = values if mask is None else values[mask.to(torch.bool)]
        if data.numel() == 0:
            raise InsufficientDataError("no valid training entries to fit normalization")
        mean = float(data.mean())
        std = float(torch.std(data, correction=0))
        if not std > 0:
            raise ConstantSeriesError(f"training data is constant ({mean}); cannot z-score")
        return cls(mean=mean, std=std)

    @classmethod
    def identity(cls) -> "ZScoreScaler":
        return cls(0.0, 1.0)

    def transform(self, values: torch.Tensor) -> torch.Tensor:
        return (values - self.mean) / self.std

    def inverse_transform(self, values: torch.Tensor) -> torch.Tensor:
        return values * self.std + self.mean

    def to_dict(self) -> dict[str, float]:
        return asdict(self)


@dataclass
class Windows:
    """Windowed split. ``inputs``/``targets``/``low`` are normalized; ``raw_*`` are flow units."""

    inputs: torch.Tensor
    targets: torch.Tensor
    low: torch.Tensor
    mask: torch.Tensor
    raw_inputs: torch.Tensor
    raw_targets: torch.Tensor
    input_mask: torch.Tensor

    def __len__(self) -> int:
        return int(self.inputs.shape[0])


def build_windows(
    raw: torch.Tensor,
    mask: torch.Tensor,
    scaler: ZScoreScaler,
    t_in: int,
    t_out: int,
    pair: WaveletPair,
    *,
    pad_odd: bool = False,
) -> Windows:
    """Window a (T, N, 1) segment. Missing entries become 0 after normalization."""
    valid = mask.to(torch.bool)
    raw = torch.where(valid, raw, torch.zeros_like(raw))
    norm = torch.where(valid, scaler.transform(raw), torch.zeros_like(raw))
    x, y = make_windows(norm, t_in, t_out)
    raw_x, raw_y = make_windows(raw, t_in, t_out)
    m_x, m_y = make_windows(valid, t_in, t_out)
    low = low_target(y, pair, axis=1, pad_odd=pad_odd) if len(y) else y.clone()
    return Windows(
        inputs=x.contiguous(),
        targets=y.contiguous(),
        low=low.contiguous(),
        mask=m_y.contiguous(),
        raw_inputs=raw_x.contiguous(),
        raw_targets=raw_y.contiguous(),
        input_mask=m_x.contiguous(),
    )


# ── Optimizer ─────────────────────────────────────────────────────────


def make_optimizer(
    params: Iterable[torch.nn.Parameter], config: TrainConfig
) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=config.lr, betas=tuple(config.betas), eps=config.eps)


def adam_step(
    optimizer: torch.optim.Optimizer,
    named_params: Iterable[tuple[str, torch.Tensor]],
) -> None:
    """One Adam update; refuses to step when any gradient is non-finite."""
    bad = [
        name for name, p in named_params
        if p.grad is not None and not torch.isfinite(p.grad).all()
    ]
    if bad:
        raise NonFiniteGradientError(bad)
    optimizer.step()


# ── Metrics ───────────────────────────────────────────────────────────


def _select(y_true: torch.Tensor, y_pred: torch.Tensor, mask: torch.Tensor | None):
    if y_true.shape != y_pred.shape:
        raise ValueError(
            f"metric operands differ in shape: {tuple(y_true.shape)} vs {tuple(y_pred.shape)}"
        )
    if mask is None:
        return y_true.reshape(-1), y_pred.reshape(-1)
    keep = mask.to(torch.bool).expand_as(y_true)
    return y_true[keep], y_pred[keep]


def mae(y_true: torch.Tensor, y_pred: torch.Tensor, mask: torch.Tensor | None = None) -> float:
    t, p = _select(y_true, y_pred, mask)
    return float((t - p).abs().mean()) if t.numel() else 0.0


def rmse(y_true: torch.Tensor, y_pred: torch.Tensor, mask: torch.Tensor | None = None) -> float:
    t, p = _select(y_true, y_pred, mask)
    return float(torch.sqrt(((t - p) ** 2).mean())) if t.numel() else 0.0


def mape(
    y_true: torch.Tensor,
    y_pred: torch.Tensor,
    mask: torch.Tensor | None = None,
    threshold: float = MAPE_THRESHOLD,
) -> float:
    """Mean |x - y|/|x| over entries with |x| > threshold (fraction, not percent)."""
    t, p = _select(y_true, y_pred, mask)
    keep = t.abs() > threshold
    if not bool(keep.any()):
        return 0.0
    return float(((t[keep] - p[keep]).abs() / t[keep].abs()).mean())


@dataclass
class HorizonMetrics:
    horizon: int
    mae: float
    rmse: float
    mape: float


@dataclass
class ForecastReport:
    """Per-horizon and aggregate errors in flow units."""

    label: str
    split: str
    mae: float
    rmse: float
    mape: float
    n_samples: int
    config_hash: str = ""
    horizons: list[HorizonMetrics] = field(default_factory=list)

    @classmethod
    def from_predictions(
        cls,
        y_true: torch.Tensor,
        y_pred: torch.Tensor,
        mask: torch.Tensor | None = None,
        *,
        label: str = "stwave",
        split: str = "test",
        config_hash: str = "",
    ) -> "ForecastReport":
        """Inputs are (B, T2, N, 1); horizon h uses slice [:, h-1]."""
        horizons = []
        for h in range(y_true.shape[1]):
            m = None if mask is None else mask[:, h]
            horizons.append(
                HorizonMetrics(
                    horizon=h + 1,
                    mae=mae(y_true[:, h], y_pred[:, h], m),
                    rmse=rmse(y_true[:, h], y_pred[:, h], m),
                    mape=mape(y_true[:, h], y_pred[:, h], m),
                )
            )
        return cls(
            label=label,
            split=split,
            mae=mae(y_true, y_pred, mask),
            rmse=rmse(y_true, y_pred, mask),
            mape=mape(y_true, y_pred, mask),
            n_samples=int(y_true.shape[0]),
            config_hash=config_hash,
            horizons=horizons,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ForecastReport":
        horizons = [HorizonMetrics(**h) for h in data.get("horizons", [])]
        return cls(**{**data, "horizons": horizons})

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [asdict(h) for h in self.horizons], columns=["horizon", "mae", "rmse", "mape"]
        )

    def to_json(self, path: str | Path) -> Path:
        return write_json(path, self.to_dict())

    @classmethod
    def from_json(cls, path: str | Path) -> "ForecastReport":
        return cls.from_dict(read_json(path))

    def to_csv(self, path: str | Path) -> Path:
        text = self.to_frame().to_csv(index=False, float_format="%.10g")
        return atomic_write(path, lambda f: f.write(text.encode()))


# ── Evaluation ────────────────────────────────────────────────────────


@torch.no_grad()
def predict(model: STWave, inputs: torch.Tensor, batch_size: int = 256) -> torch.Tensor:
    """Normalized flow predictions (B, T2, N, 1), batches in order."""
    was_training = model.training
    model.eval()
    try:
        outs = [model(inputs[i : i + batch_size])[0] for i in range(0, len(inputs), batch_size)]
    finally:
        model.train(was_training)
    if not outs:
        return inputs.new_zeros((0, model.config.t_out, *inputs.shape[2:]))
    return torch.cat(outs, dim=0)


def evaluate(
    model: STWave,
    windows: Windows,
    scaler: ZScoreScaler,
    *,
    batch_size: int = 256,
    label: str = "stwave",
    split: str = "test",
    config_hash: str = "",
    return_predictions: bool = False,
):
    """Denormalized MAE/RMSE/MAPE per horizon and overall, missing targets excluded."""
    if len(windows) == 0:
        raise InsufficientDataError(f"{split} split has no windows to evaluate")
    pred = scaler.inverse_transform(predict(model, windows.inputs, batch_size))
    report = ForecastReport.from_predictions(
        windows.raw_targets, pred, windows.mask,
        label=label, split=split, config_hash=config_hash,
    )
    return (report, pred) if return_predictions else report


def ha_baseline(
    history: torch.Tensor, t_out: int, mask: torch.Tensor | None = None
) -> torch.Tensor:
    """Mean of the history window (..., T1, N, C) repeated for ``t_out`` steps."""
    if mask is None:
        mean = history.mean(dim=-3, keepdim=True)
    else:
        w = mask.to(history.dtype)
        mean = (history * w).sum(dim=-3, keepdim=True) / w.sum(dim=-3, keepdim=True).clamp(min=1.0)
    shape = list(mean.shape)
    shape[-3] = t_out
    return mean.expand(*shape).clone()


def ha_report(
    windows: Windows, t_out: int, *, split: str = "test", config_hash: str = ""
) -> ForecastReport:
    if len(windows) == 0:
        raise InsufficientDataError(f"{split} split has no windows to evaluate")
    pred = ha_baseline(windows.raw_inputs, t_out, windows.input_mask)
    return ForecastReport.from_predictions(
        windows.raw_targets, pred, windows.mask, label="HA", split=split, config_hash=config_hash
    )


# ── Training loop ─────────────────────────────────────────────────────


class EarlyStopping:
    """Tracks the best validation score and keeps a copy of its weights."""

    def __init__(self, patience: int = 30, min_delta: float = 0.0):
        self.patience = patience
        self.min_delta = min_delta
        self.best = float("inf")
        self.best_epoch = 0
        self.best_weights: dict[str, torch.Tensor] | None = None
        self.wait = 0

    def __call__(self, epoch: int, model: torch.nn.Module, current: float) -> bool:
        """Record ``current``; returns True when the improvement just happened."""
        if current < self.best - self.min_delta:
            self.best = current
            self.best_epoch = epoch
            self.wait = 0
            self.best_weights = {k: v.detach().clone() for k, v in model.state_dict().items()}
            return True
        self.wait += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.wait >= self.patience

    def restore(self, model: torch.nn.Module) -> None:
        if self.best_weights is not None:
            model.load_state_dict(self.best_weights)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_mae: float
    lr: float


@dataclass
class TrainResult:
    history: list[EpochRecord]
    best_epoch: int
    best_val_mae: float
    stopped_early: bool
    checkpoint: str | None = None


def _loader(windows: Windows, batch_size: int, seed: int) -> DataLoader:
    data = TensorDataset(windows.inputs, windows.targets, windows.low, windows.mask)
    return DataLoader(data, batch_size=batch_size, shuffle=True, generator=generator(seed))


def train(
    model: STWave,
    train_windows: Windows,
    val_windows: Windows | None,
    config: TrainConfig,
    scaler: ZScoreScaler,
    *,
    checkpoint_path: str | Path | None = None,
    checkpoint_extra: dict | None = None,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> TrainResult:
    """Adam with plateau lr decay and early stopping on validation MAE.

    The best-validation weights are restored before returning (and saved to
    ``checkpoint_path`` whenever they improve). With no validation windows the
    mean training loss is monitored instead.
    """
    if len(train_windows) == 0:
        raise InsufficientDataError("training split has no windows")
    seed_dropout(model, generator(config.seed))
    optimizer = make_optimizer(model.parameters(), config)
    scheduler = None
    if config.lr_decay < 1.0:
        scheduler = ReduceLROnPlateau(
            optimizer, mode="min", factor=config.lr_decay, patience=config.decay_patience - 1
        )
    stopper = EarlyStopping(patience=config.early_stop_patience)
    loader = _loader(train_windows, config.batch_size, config.seed)
    history: list[EpochRecord] = []
    has_val = val_windows is not None and len(val_windows) > 0
    saved: str | None = None

    def _save(epoch: int) -> None:
        nonlocal saved
        if checkpoint_path is None:
            return
        save_checkpoint(
            checkpoint_path, model, optimizer=optimizer, seed=config.seed, epoch=epoch,
            extra={"scaler": scaler.to_dict(), **(checkpoint_extra or {})},
        )
        saved = str(checkpoint_path)

    if config.epochs == 0:
        _save(0)
        return TrainResult(history, 0, float("nan"), False, saved)

    try:
        for epoch in range(1, config.epochs + 1):
            model.train()
            total, count = 0.0, 0
            for xb, yb, lowb, mb in loader:
                optimizer.zero_grad()
                y_hat, low_hat = model(xb)
                batch_loss = model.loss(y_hat, low_hat, yb, lowb, mask=mb)
                if not torch.isfinite(batch_loss):
                    raise DivergenceError(epoch, float(batch_loss), saved)
                batch_loss.backward()
                adam_step(optimizer, model.named_parameters())
                total += float(batch_loss) * len(xb)
                count += len(xb)
            train_loss = total / count

            if has_val:
                val_mae = evaluate(
                    model, val_windows, scaler, batch_size=config.eval_batch_size, split="val"
                ).mae
            else:
                val_mae = train_loss

            lr_before = optimizer.param_groups[0]["lr"]
            if scheduler is not None:
                scheduler.step(val_mae)
            lr_now = optimizer.param_groups[0]["lr"]
            if lr_now < lr_before:
                logger.info("Epoch %d: learning rate decayed to %.3g", epoch, lr_now)

            if stopper(epoch, model, val_mae):
                _save(epoch)
            record = EpochRecord(epoch, train_loss, val_mae, lr_before)
            history.append(record)
            logger.debug("epoch %d train_loss=%.5f val_mae=%.5f", epoch, train_loss, val_mae)
            if on_epoch is not None:
                on_epoch(record)

            if stopper.should_stop:
                logger.info(
                    "Early stop at epoch %d (best epoch %d, val MAE %.4f)",
                    epoch, stopper.best_epoch, stopper.best,
                )
                break
    except NumericError as e:
        stopper.restore(model)
        logger.error("Training aborted: %s", e)
        raise

    stopper.restore(model)
    return TrainResult(
        history=history,
        best_epoch=stopper.best_epoch,
        best_val_mae=stopper.best,
        stopped_early=stopper.should_stop,
        checkpoint=saved,
    )

