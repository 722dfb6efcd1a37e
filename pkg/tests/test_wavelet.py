"""Tests for the one-level DWT, its adjoint and the disentangling lift."""

from __future__ import annotations

import math

import numpy as np
import pytest
import pywt
import torch

from stwave.errors import SequenceTooShortError
from stwave.numerics import DTYPE
from stwave.wavelet import (
    DisentanglingFlow,
    WaveletPair,
    analysis_matrix,
    disentangle,
    dwt_decompose,
    dwt_upsample,
    low_target,
    split_frequencies,
)

SQRT2 = math.sqrt(2.0)


@pytest.fixture
def haar():
    return WaveletPair.from_name("haar")


def t(values):
    return torch.tensor(values, dtype=DTYPE)


class TestWaveletPair:
    def test_haar_coefficients(self, haar):
        assert haar.length == 2
        assert np.allclose(haar.analysis_low, [1 / SQRT2, 1 / SQRT2])
        assert np.allclose(haar.analysis_high, [1 / SQRT2, -1 / SQRT2])

    def test_db2_is_orthonormal(self):
        pair = WaveletPair.from_name("db2")
        g = np.asarray(pair.analysis_low)
        h = np.asarray(pair.analysis_high)
        assert pair.length == 4
        assert abs(g @ g - 1) < 1e-12 and abs(g @ h) < 1e-12

    def test_unknown_name(self):
        with pytest.raises(ValueError, match="Unknown wavelet"):
            WaveletPair.from_name("nope")

    def test_biorthogonal_rejected(self):
        with pytest.raises(ValueError, match="not orthogonal"):
            WaveletPair.from_name("bior2.2")

    def test_odd_filter_rejected(self):
        with pytest.raises(ValueError):
            WaveletPair("odd", (1.0,), (1.0,), (1.0,), (1.0,), orthonormal=False)


class TestDecompose:
    def test_constant_has_no_detail(self, haar):
        low, high = dwt_decompose(t([1, 1, 1, 1]), haar)
        assert torch.allclose(low, t([SQRT2, SQRT2]))
        assert torch.allclose(high, t([0, 0]), atol=1e-15)

    def test_alternating_is_pure_detail(self, haar):
        low, high = dwt_decompose(t([1, -1, 1, -1]), haar)
        assert torch.allclose(low, t([0, 0]), atol=1e-15)
        assert torch.allclose(high, t([SQRT2, SQRT2]))

    def test_against_double_loop(self, haar):
        x = [3, 1, 4, 1, 5, 9, 2, 6]
        low, high = dwt_decompose(t(x), haar)
        exp_low = [sum(c * x[(2 * k + m) % 8] for m, c in enumerate(haar.analysis_low))
                   for k in range(4)]
        exp_high = [sum(c * x[(2 * k + m) % 8] for m, c in enumerate(haar.analysis_high))
                    for k in range(4)]
        assert torch.allclose(low, t(exp_low), atol=1e-14)
        assert torch.allclose(high, t(exp_high), atol=1e-14)

    def test_matches_pywavelets_haar(self, haar):
        x = np.array([3, 1, 4, 1, 5, 9, 2, 6], dtype=np.float64)
        ca, cd = pywt.dwt(x, "haar", mode="periodization")
        low, high = dwt_decompose(torch.from_numpy(x), haar)
        assert np.allclose(low.numpy(), ca)
        assert np.allclose(high.numpy(), cd)

    def test_along_axis(self, haar, rng):
        x = torch.randn(3, 8, 2, dtype=DTYPE, generator=rng)
        low, high = dwt_decompose(x, haar, axis=1)
        assert low.shape == (3, 4, 2) and high.shape == (3, 4, 2)
        ref, _ = dwt_decompose(x[1, :, 0], haar)
        assert torch.allclose(low[1, :, 0], ref)

    def test_too_short(self):
        with pytest.raises(SequenceTooShortError):
            dwt_decompose(torch.ones(2, dtype=DTYPE), WaveletPair.from_name("db2"))

    def test_odd_length_needs_padding(self, haar):
        with pytest.raises(ValueError, match="odd"):
            dwt_decompose(torch.ones(5, dtype=DTYPE), haar)
        low, high = dwt_decompose(torch.ones(5, dtype=DTYPE), haar, pad_odd=True)
        assert low.shape == (3,)
        assert torch.allclose(high, torch.zeros(3, dtype=DTYPE), atol=1e-15)


class TestUpsample:
    def test_inverts_constant_case(self, haar):
        out = dwt_upsample(t([SQRT2, SQRT2]), haar, "low")
        assert torch.allclose(out, t([1, 1, 1, 1]))

    @pytest.mark.parametrize("name", ["haar", "db2"])
    def test_perfect_reconstruction(self, name, rng):
        pair = WaveletPair.from_name(name)
        x = torch.randn(8, 3, dtype=DTYPE, generator=rng)
        low, high = split_frequencies(x, pair, axis=0)
        assert torch.allclose(low + high, x, atol=1e-10)

    def test_adjoint(self, haar, rng):
        a = analysis_matrix(haar, 8, "high")
        c = torch.randn(4, dtype=DTYPE, generator=rng)
        assert torch.allclose(dwt_upsample(c, haar, "high"), a.T @ c)

    def test_bad_branch(self, haar):
        with pytest.raises(ValueError, match="branch"):
            dwt_upsample(t([1.0, 1.0]), haar, "middle")

    def test_truncation_undoes_padding(self, haar, rng):
        x = torch.randn(7, dtype=DTYPE, generator=rng)
        low, high = split_frequencies(x, haar, pad_odd=True)
        assert low.shape == (7,)
        assert torch.allclose(low + high, x, atol=1e-10)


class TestDisentangle:
    def test_identity_lift_on_constant(self, haar):
        x = torch.full((4, 3, 1), 2.5, dtype=DTYPE)
        one = torch.ones(1, 1, dtype=DTYPE)
        zero = torch.zeros(1, dtype=DTYPE)
        parts = disentangle(x, haar, one, zero, one, zero)
        assert torch.allclose(parts.low, x)
        assert torch.allclose(parts.high, torch.zeros_like(x), atol=1e-14)

    def test_lift_shapes(self, haar, rng):
        flow = DisentanglingFlow(8, haar)
        x = torch.randn(2, 4, 5, 1, dtype=DTYPE, generator=rng)
        parts = flow(x)
        assert parts.low.shape == (2, 4, 5, 8)
        assert parts.high.shape == (2, 4, 5, 8)

    def test_disabled_lifts_raw_input(self, haar, rng):
        flow = DisentanglingFlow(4, haar, enabled=False)
        x = torch.randn(4, 3, 1, dtype=DTYPE, generator=rng)
        parts = flow(x)
        assert torch.allclose(parts.low, flow.low_proj(x))
        assert torch.allclose(parts.high, flow.high_proj(x))


class TestLowTarget:
    def test_constant_window(self, haar):
        x = torch.full((4, 2, 1), 7.0, dtype=DTYPE)
        assert torch.allclose(low_target(x, haar), x)

    def test_alternating_window(self, haar):
        x = t([1, -1, 1, -1]).reshape(4, 1, 1)
        assert torch.allclose(low_target(x, haar), torch.zeros_like(x), atol=1e-15)

    def test_complement_of_high_branch(self, haar, rng):
        x = torch.randn(6, 3, 1, dtype=DTYPE, generator=rng)
        _, high = split_frequencies(x, haar)
        assert torch.allclose(low_target(x, haar), x - high, atol=1e-12)


class TestRandomSignals:
    def test_reconstruction_and_energy(self, haar):
        gen = torch.Generator().manual_seed(42)
        x = torch.randn(1000, 12, dtype=DTYPE, generator=gen)
        low, high = dwt_decompose(x, haar, axis=1)
        energy = (low**2).sum(1) + (high**2).sum(1)
        assert (energy - (x**2).sum(1)).abs().max() < 1e-10
        rebuilt = dwt_upsample(low, haar, "low", axis=1) + dwt_upsample(high, haar, "high", axis=1)
        assert (rebuilt - x).abs().max() < 1e-10
