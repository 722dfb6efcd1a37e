"""Tests for splitting, normalization, metrics, the HA baseline and training."""

from __future__ import annotations

import math

import pandas as pd
import pytest
import torch

from stwave.config import TrainConfig
from stwave.errors import ConstantSeriesError, InsufficientDataError, NonFiniteGradientError
from stwave.graphs import grid_graph, ring_graph
from stwave.model import STWave, load_checkpoint
from stwave.numerics import DTYPE
from stwave.training import (
    EarlyStopping,
    ForecastReport,
    ZScoreScaler,
    adam_step,
    build_windows,
    chronological_split,
    evaluate,
    ha_baseline,
    ha_report,
    make_optimizer,
    make_windows,
    mae,
    mape,
    rmse,
    split_bounds,
    train,
)
from stwave.wavelet import WaveletPair


def t(values):
    return torch.tensor(values, dtype=DTYPE)


@pytest.fixture
def series():
    """A (T, N, 1) daily-ish signal with a little noise."""
    gen = torch.Generator().manual_seed(0)
    steps = torch.arange(160, dtype=DTYPE)[:, None]
    phase = torch.arange(5, dtype=DTYPE)[None, :] * 0.3
    flow = 50 + 20 * torch.sin(2 * math.pi * steps / 24 + phase)
    flow = flow + torch.randn(160, 5, dtype=DTYPE, generator=gen)
    return flow.unsqueeze(-1)


@pytest.fixture
def splits(series, small_model_config):
    pair = WaveletPair.from_name("haar")
    mask = torch.ones_like(series, dtype=torch.bool)
    train_raw, val_raw, test_raw = chronological_split(series, window=8)
    train_mask, val_mask, test_mask = chronological_split(mask, window=8)
    scaler = ZScoreScaler.fit(train_raw, train_mask)
    cfg = small_model_config
    return scaler, [
        build_windows(raw, m, scaler, cfg.t_in, cfg.t_out, pair)
        for raw, m in ((train_raw, train_mask), (val_raw, val_mask), (test_raw, test_mask))
    ]


def fresh_model(config, seed=0):
    return STWave(config, ring_graph(5), grid_graph(5), seed=seed)


class TestSplits:
    def test_sixty_twenty_twenty(self):
        assert split_bounds(10, (0.6, 0.2, 0.2)) == [(0, 6), (6, 8), (8, 10)]

    def test_train_only(self):
        train_part, val_part, test_part = chronological_split(torch.arange(10), (1.0, 0.0, 0.0))
        assert len(train_part) == 10
        assert len(val_part) == 0 and len(test_part) == 0

    def test_segments_are_contiguous(self):
        parts = chronological_split(torch.arange(20))
        assert torch.equal(torch.cat(parts), torch.arange(20))

    def test_insufficient_data(self):
        with pytest.raises(InsufficientDataError, match="val"):
            chronological_split(torch.arange(10), window=5)

    def test_bad_ratios(self):
        with pytest.raises(ValueError):
            split_bounds(10, (0.5, 0.2, 0.2))


class TestWindows:
    def test_count_and_content(self):
        segment = torch.arange(10, dtype=DTYPE).reshape(10, 1, 1)
        x, y = make_windows(segment, 3, 2)
        assert x.shape == (6, 3, 1, 1) and y.shape == (6, 2, 1, 1)
        assert x[0].flatten().tolist() == [0, 1, 2]
        assert y[0].flatten().tolist() == [3, 4]
        assert y[-1].flatten().tolist() == [8, 9]

    def test_too_short(self):
        x, y = make_windows(torch.zeros(4, 2, 1), 3, 2)
        assert len(x) == 0 and len(y) == 0

    def test_missing_entries(self):
        pair = WaveletPair.from_name("haar")
        raw = torch.arange(12, dtype=DTYPE).reshape(6, 2, 1) + 1
        mask = torch.ones_like(raw, dtype=torch.bool)
        mask[4, 1, 0] = False
        scaler = ZScoreScaler(mean=1.0, std=2.0)
        w = build_windows(raw, mask, scaler, 2, 2, pair)
        assert len(w) == 3
        # step 4 is the first target of the last window
        assert w.raw_targets[2, 0, 1, 0] == 0.0
        assert not w.mask[2, 0, 1, 0]
        assert w.mask[2, 0, 0, 0]
        assert w.targets[2, 0, 1, 0] == 0.0
        assert not w.input_mask[1, 1, 1, 0]
        assert w.inputs[0, 0, 0, 0] == pytest.approx((1.0 - 1.0) / 2.0)


class TestScaler:
    def test_fit(self):
        s = ZScoreScaler.fit(t([1.0, 2.0, 3.0]))
        assert s.mean == pytest.approx(2.0)
        assert s.std == pytest.approx(math.sqrt(2 / 3))
        x = t([5.0, -1.0])
        assert torch.allclose(s.inverse_transform(s.transform(x)), x)

    def test_mask_excludes_missing(self):
        s = ZScoreScaler.fit(t([1.0, 3.0, 1000.0]), torch.tensor([True, True, False]))
        assert s.mean == pytest.approx(2.0)

    def test_constant_raises(self):
        with pytest.raises(ConstantSeriesError):
            ZScoreScaler.fit(torch.full((5,), 4.0, dtype=DTYPE))

    def test_nothing_valid(self):
        with pytest.raises(InsufficientDataError):
            ZScoreScaler.fit(t([1.0]), torch.tensor([False]))


class TestAdam:
    def test_first_step_moves_by_lr(self):
        p = torch.nn.Parameter(t([1.0, -2.0]))
        opt = make_optimizer([p], TrainConfig(lr=0.01))
        p.grad = t([3.0, -0.5])
        adam_step(opt, [("p", p)])
        assert torch.allclose(p.detach(), t([0.99, -1.99]), atol=1e-8)

    def test_zero_gradient_is_noop(self):
        p = torch.nn.Parameter(t([1.0]))
        opt = make_optimizer([p], TrainConfig(lr=0.01))
        p.grad = t([0.0])
        adam_step(opt, [("p", p)])
        assert p.item() == 1.0

    def test_non_finite_gradient(self):
        p = torch.nn.Parameter(t([1.0]))
        opt = make_optimizer([p], TrainConfig())
        p.grad = t([float("nan")])
        with pytest.raises(NonFiniteGradientError, match="p"):
            adam_step(opt, [("p", p)])
        assert p.item() == 1.0


class TestMetrics:
    def test_reference_values(self):
        y, y_hat = t([1.0, 2.0]), t([1.0, 4.0])
        assert mae(y, y_hat) == pytest.approx(1.0)
        assert rmse(y, y_hat) == pytest.approx(math.sqrt(2.0))
        assert mape(y, y_hat) == pytest.approx(1.0)

    def test_mask(self):
        y, y_hat = t([1.0, 2.0]), t([1.0, 4.0])
        assert mae(y, y_hat, torch.tensor([True, False])) == 0.0

    def test_mape_all_below_threshold(self):
        assert mape(t([0.0, 0.5]), t([3.0, 3.0])) == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="differ in shape"):
            mae(t([1.0]), t([1.0, 2.0]))


class TestHistoricalAverage:
    def test_constant_history(self):
        hist = torch.full((2, 4, 3, 1), 7.0, dtype=DTYPE)
        out = ha_baseline(hist, 6)
        assert out.shape == (2, 6, 3, 1)
        assert torch.all(out == 7.0)

    def test_ramp(self):
        hist = torch.arange(12, dtype=DTYPE).reshape(1, 12, 1, 1)
        assert torch.all(ha_baseline(hist, 3) == 5.5)

    def test_masked_history(self):
        hist = t([1.0, 3.0, 100.0]).reshape(1, 3, 1, 1)
        mask = torch.tensor([True, True, False]).reshape(1, 3, 1, 1)
        assert torch.all(ha_baseline(hist, 2, mask) == 2.0)

    def test_report(self, splits):
        _, (_, _, test_w) = splits
        report = ha_report(test_w, 4)
        assert report.label == "HA"
        assert report.n_samples == len(test_w)
        assert len(report.horizons) == 4


class TestForecastReport:
    def test_per_horizon(self):
        y = torch.zeros(2, 2, 1, 1, dtype=DTYPE)
        y_hat = y.clone()
        y_hat[:, 1] = 3.0
        report = ForecastReport.from_predictions(y, y_hat, split="val", config_hash="abc")
        assert [h.mae for h in report.horizons] == [0.0, 3.0]
        assert report.mae == pytest.approx(1.5)
        assert report.split == "val"

    def test_json_and_csv(self, tmp_path):
        y = t([[1.0, 2.0], [3.0, 4.0]]).reshape(2, 2, 1, 1)
        report = ForecastReport.from_predictions(y, y + 1, label="STWave", config_hash="abc")
        again = ForecastReport.from_json(report.to_json(tmp_path / "report.json"))
        assert again == report
        frame = pd.read_csv(report.to_csv(tmp_path / "report.csv"))
        assert list(frame.columns) == ["horizon", "mae", "rmse", "mape"]
        assert frame["horizon"].tolist() == [1, 2]


class TestEarlyStopping:
    def test_patience(self):
        stopper = EarlyStopping(patience=2)
        model = torch.nn.Linear(1, 1)
        assert stopper(1, model, 3.0)
        assert stopper(2, model, 2.0)
        assert not stopper(3, model, 2.5)
        assert not stopper.should_stop
        assert not stopper(4, model, 2.6)
        assert stopper.should_stop
        assert stopper.best_epoch == 2

    def test_restore(self):
        model = torch.nn.Linear(1, 1)
        stopper = EarlyStopping()
        stopper(1, model, 1.0)
        kept = model.weight.detach().clone()
        with torch.no_grad():
            model.weight.add_(5.0)
        stopper.restore(model)
        assert torch.equal(model.weight, kept)


class TestTrain:
    def test_deterministic(self, splits, small_model_config):
        scaler, (train_w, val_w, _) = splits
        cfg = TrainConfig(epochs=2, batch_size=16, seed=4)
        first = train(fresh_model(small_model_config), train_w, val_w, cfg, scaler)
        second = train(fresh_model(small_model_config), train_w, val_w, cfg, scaler)
        assert [r.train_loss for r in first.history] == [r.train_loss for r in second.history]
        assert [r.val_mae for r in first.history] == [r.val_mae for r in second.history]
        assert len(first.history) == 2
        assert first.best_val_mae == min(r.val_mae for r in first.history)

    def test_dropout_ignores_global_rng(self, splits, small_model_config):
        scaler, (train_w, val_w, _) = splits
        config = small_model_config.model_copy(update={"dropout": 0.2})
        cfg = TrainConfig(epochs=1, batch_size=16, seed=4)
        torch.manual_seed(1)
        first = train(fresh_model(config), train_w, val_w, cfg, scaler)
        torch.manual_seed(2)
        second = train(fresh_model(config), train_w, val_w, cfg, scaler)
        assert first.history[0].train_loss == second.history[0].train_loss

        reseeded = cfg.model_copy(update={"seed": 5})
        other = train(fresh_model(config), train_w, val_w, reseeded, scaler)
        assert other.history[0].train_loss != first.history[0].train_loss

    def test_checkpoint_and_callback(self, tmp_path, splits, small_model_config):
        scaler, (train_w, val_w, test_w) = splits
        seen = []
        model = fresh_model(small_model_config)
        result = train(
            model, train_w, val_w, TrainConfig(epochs=2, batch_size=32), scaler,
            checkpoint_path=tmp_path / "best.pt", checkpoint_extra={"label": "STWave"},
            on_epoch=seen.append,
        )
        assert [r.epoch for r in seen] == [1, 2]
        payload = load_checkpoint(result.checkpoint)
        assert payload["epoch"] == result.best_epoch
        assert payload["extra"]["scaler"] == scaler.to_dict()
        assert payload["extra"]["label"] == "STWave"

        report = evaluate(model, test_w, scaler, label="STWave")
        assert report.n_samples == len(test_w)
        assert report.mae > 0

    def test_zero_epochs(self, tmp_path, splits, small_model_config):
        scaler, (train_w, val_w, _) = splits
        result = train(
            fresh_model(small_model_config), train_w, val_w, TrainConfig(epochs=0), scaler,
            checkpoint_path=tmp_path / "init.pt",
        )
        assert result.history == []
        assert load_checkpoint(result.checkpoint)["epoch"] == 0

    def test_without_validation(self, splits, small_model_config):
        scaler, (train_w, _, _) = splits
        result = train(
            fresh_model(small_model_config), train_w, None,
            TrainConfig(epochs=1, batch_size=32), scaler,
        )
        assert result.history[0].val_mae == result.history[0].train_loss

    def test_empty_evaluation(self, splits, small_model_config):
        scaler, (train_w, _, _) = splits
        empty = build_windows(
            torch.zeros(3, 5, 1, dtype=DTYPE), torch.ones(3, 5, 1, dtype=torch.bool),
            scaler, 4, 4, WaveletPair.from_name("haar"),
        )
        with pytest.raises(InsufficientDataError):
            evaluate(fresh_model(small_model_config), empty, scaler)
