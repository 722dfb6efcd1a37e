"""One-level discrete wavelet analysis/synthesis along the time axis.

Filters come from PyWavelets. Analysis is written in correlation form with
periodic extension::

    low[k]  = sum_m g[m] * x[(2k + m) mod T]
    high[k] = sum_m h[m] * x[(2k + m) mod T]

and up-sampling is the exact adjoint of that operator, so for orthonormal
families ``upsample(low) + upsample(high)`` reconstructs the input.
"""

from __future__ import annotations

import functools
import logging
from dataclasses import dataclass, field

import numpy as np
import pywt
import torch
import torch.nn.functional as F
from torch import nn

from stwave.errors import SequenceTooShortError
from stwave.numerics import DTYPE, matmul

logger = logging.getLogger(__name__)

BRANCHES = ("low", "high")
_ORTHO_TOL = 1e-12


@dataclass(frozen=True)
class WaveletPair:
    """Analysis and synthesis filter coefficients of one wavelet family."""

    name: str
    analysis_low: tuple[float, ...]
    analysis_high: tuple[float, ...]
    synthesis_low: tuple[float, ...]
    synthesis_high: tuple[float, ...]
    orthonormal: bool = field(default=True)

    def __post_init__(self):
        n = len(self.analysis_low)
        if n == 0 or n % 2 or len(self.analysis_high) != n:
            raise ValueError(
                f"Wavelet '{self.name}' needs equal, even-length filters "
                f"(got {n} and {len(self.analysis_high)})"
            )
        if self.orthonormal:
            g = np.asarray(self.analysis_low)
            h = np.asarray(self.analysis_high)
            if (
                abs(g @ g - 1.0) > _ORTHO_TOL
                or abs(h @ h - 1.0) > _ORTHO_TOL
                or abs(g @ h) > _ORTHO_TOL
            ):
                raise ValueError(f"Wavelet '{self.name}' filters are not orthonormal")

    @property
    def length(self) -> int:
        return len(self.analysis_low)

    @classmethod
    def from_name(cls, name: str) -> "WaveletPair":
        """Build a pair from a PyWavelets orthogonal discrete family (haar, db2, ...)."""
        available = pywt.wavelist(kind="discrete")
        if name not in available:
            raise ValueError(f"Unknown wavelet: {name}. Available: {available}")
        w = pywt.Wavelet(name)
        if not w.orthogonal:
            raise ValueError(f"Wavelet '{name}' is not orthogonal")
        # pywt's reconstruction filters are the time-reversed decomposition
        # filters, i.e. exactly the correlation-form analysis coefficients.
        return cls(
            name=name,
            analysis_low=tuple(float(c) for c in w.rec_lo),
            analysis_high=tuple(float(c) for c in w.rec_hi),
            synthesis_low=tuple(float(c) for c in w.rec_lo),
            synthesis_high=tuple(float(c) for c in w.rec_hi),
            orthonormal=True,
        )


@dataclass
class Disentangled:
    """Lifted low- and high-frequency components, both shaped like the lifted input."""

    low: torch.Tensor
    high: torch.Tensor


# ── Operators ─────────────────────────────────────────────────────────


@functools.lru_cache(maxsize=64)
def _analysis_matrix(pair: WaveletPair, length: int, branch: str) -> torch.Tensor:
    coeffs = pair.analysis_low if branch == "low" else pair.analysis_high
    half = length // 2
    a = np.zeros((half, length), dtype=np.float64)
    for k in range(half):
        for m, c in enumerate(coeffs):
            a[k, (2 * k + m) % length] += c
    return torch.from_numpy(a).to(DTYPE)


def analysis_matrix(pair: WaveletPair, length: int, branch: str) -> torch.Tensor:
    """Periodic (length/2 x length) analysis operator of one branch."""
    if branch not in BRANCHES:
        raise ValueError(f"Unknown branch: {branch}. Available: {list(BRANCHES)}")
    if length < pair.length:
        raise SequenceTooShortError(
            f"sequence of length {length} is shorter than the '{pair.name}' filter ({pair.length})"
        )
    return _analysis_matrix(pair, length, branch)


def _pad_repeat_last(x: torch.Tensor, axis: int) -> torch.Tensor:
    last = x.narrow(axis, x.shape[axis] - 1, 1)
    return torch.cat([x, last], dim=axis)


def dwt_decompose(
    x: torch.Tensor,
    pair: WaveletPair,
    axis: int = 0,
    *,
    pad_odd: bool = False,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Split ``x`` along ``axis`` into half-length low and high components."""
    length = x.shape[axis]
    if length % 2:
        if not pad_odd:
            raise ValueError(
                f"time extent {length} is odd; enable pad_odd to right-pad with the last sample"
            )
        x = _pad_repeat_last(x, axis)
        length += 1
    a_low = analysis_matrix(pair, length, "low").to(x.dtype)
    a_high = analysis_matrix(pair, length, "high").to(x.dtype)
    moved = x.movedim(axis, -1)
    low = matmul(moved, a_low.T).movedim(-1, axis)
    high = matmul(moved, a_high.T).movedim(-1, axis)
    return low, high


def dwt_upsample(
    c: torch.Tensor,
    pair: WaveletPair,
    branch: str,
    axis: int = 0,
    length: int | None = None,
) -> torch.Tensor:
    """Adjoint of the ``branch`` analysis operator; doubles the time extent.

    ``length`` truncates the result, which undoes odd-length padding.
    """
    if branch not in BRANCHES:
        raise ValueError(f"Unknown branch: {branch}. Available: {list(BRANCHES)}")
    full = 2 * c.shape[axis]
    a = analysis_matrix(pair, full, branch).to(c.dtype)
    out = matmul(c.movedim(axis, -1), a).movedim(-1, axis)
    if length is not None and length < full:
        out = out.narrow(axis, 0, length)
    return out


def split_frequencies(
    x: torch.Tensor, pair: WaveletPair, axis: int = 0, *, pad_odd: bool = False
) -> tuple[torch.Tensor, torch.Tensor]:
    """Pre-lift low/high reconstructions at the input's own time extent."""
    length = x.shape[axis]
    low, high = dwt_decompose(x, pair, axis, pad_odd=pad_odd)
    return (
        dwt_upsample(low, pair, "low", axis, length),
        dwt_upsample(high, pair, "high", axis, length),
    )


def low_target(
    x_future: torch.Tensor, pair: WaveletPair, axis: int = 0, *, pad_odd: bool = False
) -> torch.Tensor:
    """Low-frequency reconstruction of the future window, the auxiliary target."""
    length = x_future.shape[axis]
    low, _ = dwt_decompose(x_future, pair, axis, pad_odd=pad_odd)
    return dwt_upsample(low, pair, "low", axis, length)


# ── Lift ──────────────────────────────────────────────────────────────


def disentangle(
    x: torch.Tensor,
    pair: WaveletPair,
    w_g: torch.Tensor,
    b_g: torch.Tensor,
    w_h: torch.Tensor,
    b_h: torch.Tensor,
    *,
    axis: int | None = None,
    pad_odd: bool = False,
) -> Disentangled:
    """Decompose, up-sample each branch and lift channels C -> d.

    ``w_g``/``w_h`` are (d, C) weights. ``axis`` defaults to the third axis from
    the end, i.e. time in (..., T, N, C).
    """
    axis = x.dim() - 3 if axis is None else axis
    low, high = split_frequencies(x, pair, axis, pad_odd=pad_odd)
    return Disentangled(low=F.linear(low, w_g, b_g), high=F.linear(high, w_h, b_h))


class DisentanglingFlow(nn.Module):
    """Learnable disentangling layer holding W^g, b^g, W^h, b^h."""

    def __init__(
        self,
        d_model: int,
        pair: WaveletPair,
        in_channels: int = 1,
        *,
        enabled: bool = True,
        pad_odd: bool = False,
    ):
        super().__init__()
        self.pair = pair
        self.enabled = enabled
        self.pad_odd = pad_odd
        self.low_proj = nn.Linear(in_channels, d_model, dtype=DTYPE)
        self.high_proj = nn.Linear(in_channels, d_model, dtype=DTYPE)

    def forward(self, x: torch.Tensor) -> Disentangled:
        if not self.enabled:
            return Disentangled(low=self.low_proj(x), high=self.high_proj(x))
        return disentangle(
            x,
            self.pair,
            self.low_proj.weight,
            self.low_proj.bias,
            self.high_proj.weight,
            self.high_proj.bias,
            pad_odd=self.pad_odd,
        )
