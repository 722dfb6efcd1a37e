"""Attention kernels: multi-head self-attention, temporal, spatial, GAT, ESGAT, fusion.

All kernels take features with the node axis second to last and the model
dimension last, i.e. (..., T, N, d). Leading axes are batched.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from stwave.errors import DimensionError
from stwave.graphs import Graph, GraphPE
from stwave.numerics import DTYPE, matmul, softmax_lastdim


class SeededDropout(nn.Module):
    """Inverted dropout drawing its masks from an attached generator.

    Without a generator it falls back to the global RNG. Each training run
    attaches its own, so runs sharing a process do not reseed each other.
    """

    def __init__(self, p: float = 0.0):
        super().__init__()
        if not 0.0 <= p < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {p}")
        self.p = p
        self.generator: torch.Generator | None = None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if not self.training or self.p == 0.0:
            return x
        keep = torch.rand(x.shape, generator=self.generator, dtype=x.dtype, device=x.device)
        return x * (keep >= self.p) / (1.0 - self.p)


def seed_dropout(module: nn.Module, gen: torch.Generator) -> int:
    """Attach ``gen`` to every dropout layer under ``module``; returns how many."""
    layers = [m for m in module.modules() if isinstance(m, SeededDropout)]
    for layer in layers:
        layer.generator = gen
    return len(layers)


class AttentionHeads(nn.Module):
    """Query/key/value/output projections for ``n_heads`` heads of size ``head_dim``."""

    def __init__(self, n_heads: int, head_dim: int, dropout: float = 0.0):
        super().__init__()
        if n_heads < 1 or head_dim < 1:
            raise ValueError(f"heads and head_dim must be positive, got {n_heads} x {head_dim}")
        self.n_heads = n_heads
        self.head_dim = head_dim
        self.d_model = n_heads * head_dim
        d = self.d_model
        self.query = nn.Linear(d, d, dtype=DTYPE)
        self.key = nn.Linear(d, d, dtype=DTYPE)
        self.value = nn.Linear(d, d, dtype=DTYPE)
        self.output = nn.Linear(d, d, dtype=DTYPE)
        self.dropout = SeededDropout(dropout)

    def split(self, x: torch.Tensor) -> torch.Tensor:
        """(..., L, d) -> (..., h, L, d_e)"""
        return x.unflatten(-1, (self.n_heads, self.head_dim)).movedim(-2, -3)

    def merge(self, x: torch.Tensor) -> torch.Tensor:
        """(..., h, L, d_e) -> (..., L, d)"""
        return x.movedim(-3, -2).flatten(-2)

    def weights(
        self, q: torch.Tensor, k: torch.Tensor, mask: torch.Tensor | None = None
    ) -> torch.Tensor:
        """Attention weights (..., h, L_q, L_k)."""
        qh = self.split(self.query(q))
        kh = self.split(self.key(k))
        scores = matmul(qh, kh.transpose(-1, -2)) / math.sqrt(self.head_dim)
        if mask is not None:
            mask = mask.unsqueeze(-3)
        return softmax_lastdim(scores, mask)

    def forward(
        self,
        q: torch.Tensor,
        k: torch.Tensor,
        v: torch.Tensor,
        mask: torch.Tensor | None = None,
        return_weights: bool = False,
    ):
        if q.shape[-1] != self.d_model or k.shape[-1] != self.d_model:
            raise DimensionError("attention inputs must end in d_model", q.shape, k.shape)
        w = self.weights(q, k, mask)
        vh = self.split(self.value(v))
        out = self.output(self.merge(matmul(self.dropout(w), vh)))
        return (out, w) if return_weights else out


def self_attention(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    heads: AttentionHeads,
    mask: torch.Tensor | None = None,
    return_weights: bool = False,
):
    return heads(q, k, v, mask=mask, return_weights=return_weights)


def causal_mask(length: int, device=None) -> torch.Tensor:
    return torch.ones(length, length, dtype=torch.bool, device=device).tril()


def temporal_attention(x: torch.Tensor, heads: AttentionHeads) -> torch.Tensor:
    """Per-node masked self-attention over time; step t sees steps <= t."""
    seq = x.transpose(-3, -2)
    out = heads(seq, seq, seq, mask=causal_mask(seq.shape[-2], x.device))
    return out.transpose(-3, -2)


def full_spatial_attention(x: torch.Tensor, heads: AttentionHeads) -> torch.Tensor:
    """Per-time-step self-attention across all N nodes."""
    return heads(x, x, x)


# ── Graph attention ───────────────────────────────────────────────────


def neighbour_index(g: Graph | np.ndarray) -> tuple[torch.Tensor, torch.Tensor]:
    """(source, target) edge arrays with a self-loop on every node, grouped by target."""
    a = g.adjacency if isinstance(g, Graph) else np.asarray(g)
    linked = (a > 0) | np.eye(a.shape[0], dtype=bool)
    dst, src = np.nonzero(linked)
    return torch.from_numpy(src.astype(np.int64)), torch.from_numpy(dst.astype(np.int64))


def gat_score(
    x: torch.Tensor,
    g: Graph | tuple[torch.Tensor, torch.Tensor],
    heads: AttentionHeads,
) -> torch.Tensor:
    """Neighbourhood attention: each node queries itself and its graph neighbours.

    Computed over the edge list with a segment softmax, so cost grows with the
    edge count rather than N^2.
    """
    src, dst = neighbour_index(g) if isinstance(g, Graph) else g
    src = src.to(x.device)
    dst = dst.to(x.device)
    n = x.shape[-2]
    h, d_e = heads.n_heads, heads.head_dim

    q = heads.query(x).unflatten(-1, (h, d_e))
    k = heads.key(x).unflatten(-1, (h, d_e))
    v = heads.value(x).unflatten(-1, (h, d_e))

    scores = (q.index_select(-3, dst) * k.index_select(-3, src)).sum(-1) / math.sqrt(d_e)
    seg = dst.view(*([1] * (scores.dim() - 2)), -1, 1).expand_as(scores)
    peak = scores.new_full((*scores.shape[:-2], n, h), float("-inf"))
    peak = peak.scatter_reduce(-2, seg, scores.detach(), reduce="amax", include_self=True)
    ex = torch.exp(scores - peak.index_select(-2, dst))
    denom = torch.zeros_like(peak).index_add(-2, dst, ex)
    alpha = heads.dropout(ex / denom.index_select(-2, dst))

    msg = alpha.unsqueeze(-1) * v.index_select(-3, src)
    agg = torch.zeros_like(v).index_add(-3, dst, msg)
    return heads.output(agg.flatten(-2))


# ── Query sampling ────────────────────────────────────────────────────


@dataclass
class QuerySample:
    """Active nodes per time step, best first; ``scores`` are the projected scalars."""

    indices: torch.Tensor
    scores: torch.Tensor

    @property
    def k(self) -> int:
        return int(self.indices.shape[-1])


def sample_count(n_nodes: int, base: int = 2) -> int:
    """Smallest k with base**k >= n_nodes, at least 1 and at most n_nodes."""
    if base < 2:
        raise ValueError(f"sample base must be >= 2, got {base}")
    k = 0
    while base**k < n_nodes:
        k += 1
    return max(1, min(k, n_nodes))


def sample_queries(
    m_t: torch.Tensor,
    p: torch.Tensor,
    n_nodes: int | None = None,
    *,
    base: int = 2,
    size: int | None = None,
) -> QuerySample:
    """Rank nodes by M_t P / ||P|| and keep the top ones; ties go to the lower node id."""
    n = m_t.shape[-2] if n_nodes is None else n_nodes
    norm = torch.linalg.vector_norm(p)
    if float(norm) == 0.0:
        raise ValueError("query projector P has zero norm and cannot be renormalized")
    scores = matmul(m_t, p.reshape(-1, 1)).squeeze(-1) / norm
    k = sample_count(n, base) if size is None else max(1, min(size, n))
    order = torch.sort(scores.detach(), dim=-1, descending=True, stable=True).indices
    return QuerySample(indices=order[..., :k], scores=scores)


def _rho(pe: GraphPE | torch.Tensor | None) -> torch.Tensor | None:
    if isinstance(pe, GraphPE):
        return pe()
    return pe


def esgat(
    x: torch.Tensor,
    pe_spa: GraphPE | torch.Tensor | None,
    pe_tem: GraphPE | torch.Tensor | None,
    g_spa: Graph | tuple[torch.Tensor, torch.Tensor],
    heads: AttentionHeads,
    p: torch.Tensor,
    *,
    gat_heads: AttentionHeads | None = None,
    base: int = 2,
    size: int | None = None,
) -> torch.Tensor:
    """Efficient spectral graph attention over (..., N, d) features.

    Positional encodings are added first. Sampled nodes act as queries against
    every node; each unsampled node copies the output of the sampled query that
    weights it highest (head-averaged, lower node id on ties). With the sample
    size at N this is exactly ``full_spatial_attention``.

    Ranking is not differentiable, so ``p`` and the scorer heads learn through a
    straight-through gate on the sampled queries that leaves the output unchanged.
    """
    for pe in (_rho(pe_spa), _rho(pe_tem)):
        if pe is not None:
            x = x + pe
    n = x.shape[-2]
    k = sample_count(n, base) if size is None else max(1, min(size, n))
    if k >= n:
        return full_spatial_attention(x, heads)

    # The ranking sees detached features; it trains the scorer and P only.
    m = gat_score(x.detach(), g_spa, gat_heads if gat_heads is not None else heads)
    sample = sample_queries(m, p, base=base, size=k)
    chosen = sample.indices.sort(dim=-1).values
    d = x.shape[-1]

    queries = x.gather(-2, chosen.unsqueeze(-1).expand(*chosen.shape, d))
    # Straight-through gate: exactly 1 in the forward pass, d/ds = 1 backward.
    s = sample.scores.gather(-1, chosen)
    queries = queries * (1.0 + s - s.detach()).unsqueeze(-1)
    out_q, w = heads(queries, x, x, return_weights=True)

    owner = w.mean(dim=-3).argmax(dim=-2)
    slots = torch.arange(k, device=x.device).expand_as(chosen)
    owner = owner.scatter(-1, chosen, slots)
    return out_q.gather(-2, owner.unsqueeze(-1).expand(*owner.shape, d))


def fusion_attention(
    y_low: torch.Tensor,
    y_high: torch.Tensor,
    self_heads: AttentionHeads,
    cross_heads: AttentionHeads,
) -> torch.Tensor:
    """Low-frequency queries over low (self term) and high (cross term) sequences, per node."""
    if y_low.shape != y_high.shape:
        raise DimensionError("fusion inputs differ in shape", y_low.shape, y_high.shape)
    lo = y_low.transpose(-3, -2)
    hi = y_high.transpose(-3, -2)
    out = self_heads(lo, lo, lo) + cross_heads(lo, hi, hi)
    return out.transpose(-3, -2)
