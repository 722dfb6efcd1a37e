"""Tests for the convolution, the loss and the assembled network."""

from __future__ import annotations

import pytest
import torch

from stwave.config import AblationConfig, STWaveConfig
from stwave.errors import DimensionError
from stwave.graphs import grid_graph, ring_graph
from stwave.model import (
    EncoderLayer,
    STWave,
    count_parameters,
    dilated_causal_conv,
    load_checkpoint,
    loss,
    save_checkpoint,
)
from stwave.numerics import DTYPE, grad_check


def build(config: STWaveConfig, n: int = 5, seed: int = 0) -> STWave:
    return STWave(config, ring_graph(n), grid_graph(n), seed=seed)


def batch(config: STWaveConfig, n: int = 5, b: int = 3, seed: int = 0) -> torch.Tensor:
    gen = torch.Generator().manual_seed(seed)
    return torch.randn(b, config.t_in, n, 1, dtype=DTYPE, generator=gen)


class TestDilatedCausalConv:
    def test_single_tap_is_pointwise(self, rng):
        x = torch.randn(4, 2, 3, dtype=DTYPE, generator=rng)
        theta = torch.randn(1, 3, 3, dtype=DTYPE, generator=rng)
        bias = torch.randn(3, dtype=DTYPE, generator=rng)
        out = dilated_causal_conv(x, theta, bias)
        assert torch.allclose(out, torch.relu(x @ theta[0] + bias))

    def test_impulse_with_dilation(self):
        x = torch.zeros(6, 1, 1, dtype=DTYPE)
        x[0] = 1.0
        theta = torch.ones(2, 1, 1, dtype=DTYPE)
        out = dilated_causal_conv(x, theta, torch.zeros(1, dtype=DTYPE), dilation=2)
        assert torch.nonzero(out.flatten()).flatten().tolist() == [0, 2]

    def test_against_loop(self, rng):
        t, j_max, c = 7, 3, 2
        x = torch.randn(t, 2, 3, dtype=DTYPE, generator=rng)
        theta = torch.randn(j_max, 3, 4, dtype=DTYPE, generator=rng)
        bias = torch.randn(4, dtype=DTYPE, generator=rng)
        out = dilated_causal_conv(x, theta, bias, dilation=c)
        for step in range(t):
            acc = bias.clone()
            for j in range(j_max):
                if step - c * j >= 0:
                    acc = acc + x[step - c * j] @ theta[j]
            assert torch.allclose(out[step], torch.relu(acc), atol=1e-12)

    def test_kernel_mismatch(self, rng):
        theta = torch.zeros(2, 1, 1, dtype=DTYPE)
        with pytest.raises(DimensionError):
            dilated_causal_conv(
                torch.zeros(3, 1, 1, dtype=DTYPE), theta, torch.zeros(1), kernel_size=3
            )


class TestLoss:
    def test_perfect_prediction(self):
        y = torch.randn(2, 4, 3, 1, dtype=DTYPE)
        assert loss(y, y, y, y).item() == 0.0

    def test_unit_offset(self):
        y = torch.zeros(2, 4, 3, 1, dtype=DTYPE)
        assert loss(y + 1, y, y, y).item() == pytest.approx(1.0)
        assert loss(y + 1, y + 1, y, y).item() == pytest.approx(2.0)
        assert loss(y + 1, y + 1, y, y, multi_supervision=False).item() == pytest.approx(1.0)

    def test_mask_excludes_entries(self):
        y = torch.zeros(1, 2, 2, 1, dtype=DTYPE)
        y_hat = y.clone()
        y_hat[0, 0, 0, 0] = 100.0
        mask = torch.ones_like(y, dtype=torch.bool)
        mask[0, 0, 0, 0] = False
        assert loss(y_hat, y, y, y, mask=mask).item() == 0.0

    def test_shape_mismatch(self):
        a = torch.zeros(2, 4, 3, 1, dtype=DTYPE)
        with pytest.raises(DimensionError):
            loss(a, a, a[:, :2], a)


class TestSTWave:
    def test_output_shapes(self, small_model_config):
        model = build(small_model_config)
        y, y_low = model(batch(small_model_config))
        assert y.shape == (3, 4, 5, 1)
        assert y_low.shape == (3, 4, 5, 1)
        assert y.dtype == DTYPE

    def test_samples_are_independent(self, small_model_config):
        model = build(small_model_config).eval()
        x = batch(small_model_config)
        with torch.no_grad():
            together, _ = model(x)
            apart = torch.cat([model(x[i : i + 1])[0] for i in range(3)])
        assert torch.allclose(together, apart, atol=1e-12)

    def test_bad_input_shape(self, small_model_config):
        model = build(small_model_config)
        with pytest.raises(DimensionError):
            model(torch.zeros(2, 6, 5, 1, dtype=DTYPE))
        with pytest.raises(DimensionError):
            model(torch.zeros(2, 4, 7, 1, dtype=DTYPE))

    def test_graph_sizes_must_agree(self, small_model_config):
        with pytest.raises(DimensionError):
            STWave(small_model_config, ring_graph(5), ring_graph(6))

    def test_encoder_off_passes_lift_through(self, small_model_config):
        config = small_model_config.model_copy(
            update={"ablations": AblationConfig(disable_temporal=True, disable_spatial=True)}
        )
        model = build(config)
        parts = model.disentangle(batch(config))
        low, high = model.encode(parts)
        assert torch.equal(low, parts.low)
        assert torch.equal(high, parts.high)

    def test_graph_pe_off_is_zero(self, small_model_config):
        config = small_model_config.model_copy(
            update={"ablations": AblationConfig(disable_graph_pe=True)}
        )
        model = build(config)
        assert torch.count_nonzero(model.pe_spa()) == 0
        assert torch.count_nonzero(model.pe_tem()) == 0

    def test_seed_determinism(self, small_model_config):
        a = build(small_model_config, seed=11).state_dict()
        b = build(small_model_config, seed=11).state_dict()
        c = build(small_model_config, seed=12).state_dict()
        assert all(torch.equal(a[k], b[k]) for k in a)
        assert any(not torch.equal(a[k], c[k]) for k in a)

    def test_parameter_counts(self, small_model_config):
        one = count_parameters(build(small_model_config))
        assert one == count_parameters(build(small_model_config, seed=5))
        two = count_parameters(build(small_model_config.model_copy(update={"layers": 2})))
        assert two > one
        additive = small_model_config.model_copy(
            update={"ablations": AblationConfig(additive_fusion=True)}
        )
        assert count_parameters(build(additive)) < one

    def test_loss_respects_multi_supervision(self, small_model_config):
        off = small_model_config.model_copy(
            update={"ablations": AblationConfig(disable_multi_supervision=True)}
        )
        model = build(off)
        y = torch.zeros(1, 4, 5, 1, dtype=DTYPE)
        assert model.loss(y + 1, y + 1, y, y).item() == pytest.approx(1.0)

    def test_multi_supervision_leaves_forward_unchanged(self, small_model_config):
        off = small_model_config.model_copy(
            update={"ablations": AblationConfig(disable_multi_supervision=True)}
        )
        x = batch(small_model_config)
        y_on, low_on = build(small_model_config, seed=2)(x)
        y_off, low_off = build(off, seed=2)(x)
        assert torch.equal(y_on, y_off)
        assert torch.equal(low_on, low_off)

    def test_every_parameter_receives_gradient(self, small_model_config):
        assert small_model_config.spatial_mode == "esgat"
        model = build(small_model_config, seed=3)
        x = batch(small_model_config, seed=1)
        y = batch(small_model_config, seed=2)
        y_hat, y_low_hat = model(x)
        model.loss(y_hat, y_low_hat, y, y).backward()
        missing = [name for name, p in model.named_parameters() if p.grad is None]
        assert missing == []
        grads = dict(model.named_parameters())
        ranked = ("projector", "scorer.query.weight", "scorer.key.weight", "scorer.value.weight")
        for name in ranked:
            assert torch.count_nonzero(grads[f"layers.0.spatial_low.{name}"].grad) > 0, name

    @pytest.mark.parametrize("mode", ["full", "esgat"])
    def test_gradients_match_finite_differences(self, mode):
        config = STWaveConfig(t_in=4, t_out=4, heads=2, head_dim=4, layers=1, spatial_mode=mode)
        model = STWave(config, ring_graph(5), grid_graph(5), seed=3)
        gen = torch.Generator().manual_seed(9)
        x = torch.randn(2, 4, 5, 1, dtype=DTYPE, generator=gen)
        y = torch.randn(2, 4, 5, 1, dtype=DTYPE, generator=gen)
        y_low = torch.randn(2, 4, 5, 1, dtype=DTYPE, generator=gen)

        def objective():
            y_hat, y_low_hat = model(x)
            return model.loss(y_hat, y_low_hat, y, y_low)

        # Query ranking is piecewise constant, so its straight-through
        # gradient has no finite-difference counterpart.
        params = {
            name: p for name, p in model.named_parameters()
            if "projector" not in name and "scorer" not in name
        }
        err = grad_check(objective, params, max_entries=3000, atol=1e-8)
        assert err < 1e-4


class TestEncoderLayer:
    def test_causal_without_spatial(self, small_model_config):
        config = small_model_config.model_copy(
            update={"ablations": AblationConfig(disable_spatial=True)}
        )
        torch.manual_seed(0)
        layer = EncoderLayer(config)
        gen = torch.Generator().manual_seed(4)
        low = torch.randn(2, 4, 5, 8, dtype=DTYPE, generator=gen)
        high = torch.randn(2, 4, 5, 8, dtype=DTYPE, generator=gen)
        before = layer(low, high, None, None, None)

        low2, high2 = low.clone(), high.clone()
        low2[:, -1] += 3.0
        high2[:, -1] -= 2.0
        after = layer(low2, high2, None, None, None)

        for a, b in zip(before, after):
            assert torch.allclose(a[:, :-1], b[:, :-1], rtol=0.0, atol=1e-14)
            assert not torch.allclose(a[:, -1], b[:, -1])


class TestCheckpoint:
    def test_round_trip(self, tmp_path, small_model_config):
        model = build(small_model_config, seed=1)
        path = save_checkpoint(
            tmp_path / "ckpt" / "model.pt", model, seed=1, epoch=4, extra={"label": "STWave"}
        )
        payload = load_checkpoint(path)
        assert payload["epoch"] == 4
        assert payload["extra"]["label"] == "STWave"

        restored = STWave(
            STWaveConfig(**payload["model_config"]), ring_graph(5), grid_graph(5), seed=99
        )
        restored.load_state_dict(payload["state_dict"])
        x = batch(small_model_config)
        with torch.no_grad():
            assert torch.equal(model(x)[0], restored(x)[0])

    def test_missing(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_checkpoint(tmp_path / "nope.pt")

    def test_wrong_version(self, tmp_path, small_model_config):
        path = tmp_path / "old.pt"
        torch.save({"version": 0}, path)
        with pytest.raises(ValueError, match="Unsupported checkpoint version"):
            load_checkpoint(path)
