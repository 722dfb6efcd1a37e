"""The STWave network: disentangling flow, dual-channel encoder, frequency-specific decoder."""

from __future__ import annotations

import io
import logging
import math
from pathlib import Path
from typing import Any

import torch
import torch.nn.functional as F
from torch import nn

from stwave.artifacts import atomic_write
from stwave.attention import (
    AttentionHeads,
    esgat,
    full_spatial_attention,
    fusion_attention,
    gat_score,
    neighbour_index,
    temporal_attention,
)
from stwave.config import STWaveConfig
from stwave.errors import DimensionError
from stwave.graphs import EigenCache, Graph, padded_positional_encoding
from stwave.numerics import DTYPE, generator, matmul
from stwave.wavelet import Disentangled, DisentanglingFlow, WaveletPair

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


# ── Building blocks ───────────────────────────────────────────────────


def dilated_causal_conv(
    x: torch.Tensor,
    theta: torch.Tensor,
    bias: torch.Tensor,
    dilation: int = 1,
    kernel_size: int | None = None,
) -> torch.Tensor:
    """relu(sum_j x[t - c*j] @ theta[j] + bias) over (..., T, N, d), zero left padding.

    ``theta`` is (J, d_in, d_out).
    """
    j_max = theta.shape[0] if kernel_size is None else kernel_size
    if theta.shape[0] != j_max:
        raise DimensionError("conv kernel does not match kernel_size", theta.shape, (j_max,))
    t = x.shape[-3]
    acc = matmul(x, theta[0])
    for j in range(1, j_max):
        shift = dilation * j
        if shift >= t:
            break
        past = F.pad(x.narrow(-3, 0, t - shift), (0, 0, 0, 0, shift, 0))
        acc = acc + matmul(past, theta[j])
    return torch.relu(acc + bias)


class DilatedCausalConv(nn.Module):
    def __init__(self, d_model: int, kernel_size: int = 2, dilation: int = 1):
        super().__init__()
        self.kernel_size = kernel_size
        self.dilation = dilation
        self.theta = nn.Parameter(torch.empty(kernel_size, d_model, d_model, dtype=DTYPE))
        self.bias = nn.Parameter(torch.zeros(d_model, dtype=DTYPE))
        nn.init.xavier_uniform_(self.theta)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return dilated_causal_conv(x, self.theta, self.bias, self.dilation, self.kernel_size)


class SpectralGraphAttention(nn.Module):
    """Spatial sublayer of one channel: ESGAT, full attention or plain GAT."""

    def __init__(self, config: STWaveConfig):
        super().__init__()
        self.mode = config.spatial_mode
        self.base = config.sample_base
        self.size = config.sample_size
        self.heads = AttentionHeads(config.heads, config.head_dim, config.dropout)
        if self.mode == "esgat":
            self.scorer = AttentionHeads(config.heads, config.head_dim, config.dropout)
            self.projector = nn.Parameter(torch.empty(config.d_model, 1, dtype=DTYPE))
            nn.init.xavier_uniform_(self.projector)

    def forward(
        self,
        x: torch.Tensor,
        edges: tuple[torch.Tensor, torch.Tensor],
        rho_spa: torch.Tensor,
        rho_tem: torch.Tensor,
    ) -> torch.Tensor:
        if self.mode == "esgat":
            return esgat(
                x, rho_spa, rho_tem, edges, self.heads, self.projector,
                gat_heads=self.scorer, base=self.base, size=self.size,
            )
        x = x + rho_spa + rho_tem
        if self.mode == "full":
            return full_spatial_attention(x, self.heads)
        return gat_score(x, edges, self.heads)


class EncoderLayer(nn.Module):
    """One dual-channel layer; low and high channels keep separate parameters."""

    def __init__(self, config: STWaveConfig):
        super().__init__()
        self.residual = config.residual
        self.ablations = config.ablations
        self.temporal = AttentionHeads(config.heads, config.head_dim, config.dropout)
        self.conv = DilatedCausalConv(config.d_model, config.kernel_size, config.dilation)
        self.spatial_low = SpectralGraphAttention(config)
        self.spatial_high = SpectralGraphAttention(config)

    def _wrap(self, x: torch.Tensor, out: torch.Tensor) -> torch.Tensor:
        return x + out if self.residual else out

    def forward(
        self,
        low: torch.Tensor,
        high: torch.Tensor,
        edges: tuple[torch.Tensor, torch.Tensor],
        rho_spa: torch.Tensor,
        rho_tem: torch.Tensor,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        if not self.ablations.disable_temporal:
            low = self._wrap(low, temporal_attention(low, self.temporal))
            high = self._wrap(high, self.conv(high))
        if not self.ablations.disable_spatial:
            low = self._wrap(low, self.spatial_low(low, edges, rho_spa, rho_tem))
            high = self._wrap(high, self.spatial_high(high, edges, rho_spa, rho_tem))
        return low, high


# ── Loss ──────────────────────────────────────────────────────────────


def _masked_mean_abs(diff: torch.Tensor, mask: torch.Tensor | None) -> torch.Tensor:
    if mask is None:
        return diff.abs().mean()
    weight = mask.to(diff.dtype)
    return (diff.abs() * weight).sum() / weight.sum().clamp(min=1.0)


def loss(
    y_hat: torch.Tensor,
    y_low_hat: torch.Tensor,
    y_true: torch.Tensor,
    y_low_true: torch.Tensor,
    *,
    multi_supervision: bool = True,
    mask: torch.Tensor | None = None,
) -> torch.Tensor:
    """Mean L1 on the flow plus mean L1 on the low-frequency target."""
    if y_hat.shape != y_true.shape or y_low_hat.shape != y_low_true.shape:
        raise DimensionError("loss operands differ in shape", y_hat.shape, y_true.shape)
    total = _masked_mean_abs(y_true - y_hat, mask)
    if multi_supervision:
        total = total + _masked_mean_abs(y_low_true - y_low_hat, mask)
    return total


# ── Network ───────────────────────────────────────────────────────────


def glorot_(tensor: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
    if tensor.dim() == 3:
        fan_in = tensor.shape[0] * tensor.shape[1]
        fan_out = tensor.shape[0] * tensor.shape[2]
    else:
        fan_out, fan_in = tensor.shape[0], tensor.shape[-1]
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    with torch.no_grad():
        return tensor.uniform_(-bound, bound, generator=gen)


class STWave(nn.Module):
    """Full forecaster over inputs shaped (B, T1, N, 1)."""

    def __init__(
        self,
        config: STWaveConfig,
        spatial: Graph,
        temporal: Graph,
        *,
        seed: int = 0,
        eigen_cache: EigenCache | None = None,
    ):
        super().__init__()
        if spatial.n_nodes != temporal.n_nodes:
            raise DimensionError(
                "spatial and temporal graphs differ in size",
                (spatial.n_nodes,), (temporal.n_nodes,),
            )
        self.config = config
        self.n_nodes = spatial.n_nodes
        ab = config.ablations
        d = config.d_model

        self.pair = WaveletPair.from_name(config.wavelet)
        self.flow = DisentanglingFlow(
            d, self.pair, enabled=not ab.disable_disentangle, pad_odd=config.pad_odd
        )
        self.pe_spa = padded_positional_encoding(
            spatial, d, config.pe_init_scale, cache=eigen_cache, enabled=not ab.disable_graph_pe
        )
        self.pe_tem = padded_positional_encoding(
            temporal, d, config.pe_init_scale, cache=eigen_cache, enabled=not ab.disable_graph_pe
        )
        src, dst = neighbour_index(spatial)
        self.register_buffer("edge_src", src, persistent=False)
        self.register_buffer("edge_dst", dst, persistent=False)

        self.layers = nn.ModuleList(EncoderLayer(config) for _ in range(config.layers))
        self.predict_low = nn.Linear(config.t_in, config.t_out, dtype=DTYPE)
        self.predict_high = nn.Linear(config.t_in, config.t_out, dtype=DTYPE)
        if not ab.additive_fusion:
            self.fusion_self = AttentionHeads(config.heads, config.head_dim, config.dropout)
            self.fusion_cross = AttentionHeads(config.heads, config.head_dim, config.dropout)
        self.head = nn.Linear(d, 1, dtype=DTYPE)
        self.low_head = nn.Linear(d, 1, dtype=DTYPE)
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int) -> None:
        """Glorot-uniform weights, zero biases, PE scales at their initial value."""
        gen = generator(seed)
        with torch.no_grad():
            for name, p in self.named_parameters():
                leaf = name.rsplit(".", 1)[-1]
                if leaf == "bias":
                    p.zero_()
                elif leaf == "scale":
                    p.fill_(self.config.pe_init_scale)
                else:
                    glorot_(p, gen)

    @property
    def edges(self) -> tuple[torch.Tensor, torch.Tensor]:
        return self.edge_src, self.edge_dst

    def disentangle(self, x: torch.Tensor) -> Disentangled:
        return self.flow(x)

    def encode(self, parts: Disentangled) -> tuple[torch.Tensor, torch.Tensor]:
        rho_spa = self.pe_spa()
        rho_tem = self.pe_tem()
        low, high = parts.low, parts.high
        for layer in self.layers:
            low, high = layer(low, high, self.edges, rho_spa, rho_tem)
        return low, high

    def decode(
        self, z_low: torch.Tensor, z_high: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        y_low = self.predict_low(z_low.movedim(-3, -1)).movedim(-1, -3)
        y_high = self.predict_high(z_high.movedim(-3, -1)).movedim(-1, -3)
        if self.config.ablations.additive_fusion:
            fused = y_low + y_high
        else:
            fused = fusion_attention(y_low, y_high, self.fusion_self, self.fusion_cross)
        return self.head(fused), self.low_head(y_low)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if x.shape[-2] != self.n_nodes or x.shape[-3] != self.config.t_in:
            raise DimensionError(
                "input must be (..., t_in, n_nodes, C)",
                tuple(x.shape), (self.config.t_in, self.n_nodes, 1),
            )
        return self.decode(*self.encode(self.disentangle(x)))

    def loss(
        self,
        y_hat: torch.Tensor,
        y_low_hat: torch.Tensor,
        y_true: torch.Tensor,
        y_low_true: torch.Tensor,
        mask: torch.Tensor | None = None,
    ) -> torch.Tensor:
        return loss(
            y_hat, y_low_hat, y_true, y_low_true,
            multi_supervision=not self.config.ablations.disable_multi_supervision,
            mask=mask,
        )


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


# ── Checkpoints ───────────────────────────────────────────────────────


def save_checkpoint(
    path: str | Path,
    model: STWave,
    *,
    optimizer: torch.optim.Optimizer | None = None,
    run_config: dict | None = None,
    seed: int = 0,
    epoch: int = 0,
    extra: dict | None = None,
) -> Path:
    payload = {
        "version": CHECKPOINT_VERSION,
        "model_config": model.config.model_dump(mode="json"),
        "run_config": run_config,
        "state_dict": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "seed": seed,
        "epoch": epoch,
        "extra": extra or {},
    }
    buffer = io.BytesIO()
    torch.save(payload, buffer)
    return atomic_write(path, lambda f: f.write(buffer.getvalue()))


def load_checkpoint(path: str | Path) -> dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"Unsupported checkpoint version {version} in {path}")
    return payload
