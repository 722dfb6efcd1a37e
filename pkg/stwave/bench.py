"""Wall-clock and memory scaling of the spatial attention modes over growing random road graphs."""

from __future__ import annotations

import logging
import statistics
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import pandas as pd
import torch
from torch.profiler import ProfilerActivity, profile

from stwave.artifacts import write_text
from stwave.attention import neighbour_index, sample_count
from stwave.config import BenchConfig, STWaveConfig
from stwave.graphs import Graph
from stwave.model import SpectralGraphAttention
from stwave.numerics import DTYPE, generator

logger = logging.getLogger(__name__)


@dataclass
class BenchRow:
    mode: str
    n_nodes: int
    queries: int
    score_entries: int
    median_seconds: float
    min_seconds: float
    peak_bytes: int


def random_graph(n_nodes: int, avg_degree: int, seed: int) -> Graph:
    """Erdos-Renyi graph with the requested expected degree."""
    rng = np.random.default_rng(seed)
    p = min(1.0, avg_degree / max(1, n_nodes - 1))
    upper = np.triu(rng.random((n_nodes, n_nodes)) < p, k=1)
    a = (upper | upper.T).astype(np.float64)
    return Graph(a)


def _queries(mode: str, n_nodes: int, base: int) -> int:
    return sample_count(n_nodes, base) if mode == "esgat" else n_nodes


def _score_entries(mode: str, n_nodes: int, n_edges: int, base: int) -> int:
    """Attention scores computed per time step and head."""
    if mode == "gat":
        return 2 * n_edges + n_nodes
    queries = _queries(mode, n_nodes, base)
    entries = queries * n_nodes
    if mode == "esgat":
        entries += 2 * n_edges + n_nodes
    return entries


@torch.no_grad()
def peak_memory(
    layer: SpectralGraphAttention, x: torch.Tensor, edges, rho: torch.Tensor
) -> int:
    """Largest net allocation by one operator during a single step, in bytes.

    On CUDA this is the allocator high-water mark instead.
    """
    if x.is_cuda:
        torch.cuda.reset_peak_memory_stats(x.device)
        base = torch.cuda.memory_allocated(x.device)
        layer(x, edges, rho, rho)
        return int(torch.cuda.max_memory_allocated(x.device) - base)
    with profile(activities=[ProfilerActivity.CPU], profile_memory=True) as prof:
        layer(x, edges, rho, rho)
    return max((int(evt.cpu_memory_usage) for evt in prof.events()), default=0)


@torch.no_grad()
def time_mode(
    mode: str, graph: Graph, config: BenchConfig, *, sample_base: int = 2
) -> tuple[list[float], int]:
    """Seconds per pass over ``config.steps`` time steps (one per repeat) and peak bytes."""
    head_dim = max(1, config.d_model // config.heads)
    model_config = STWaveConfig(
        heads=config.heads, head_dim=head_dim, spatial_mode=mode, sample_base=sample_base
    )
    layer = SpectralGraphAttention(model_config).eval()
    d = model_config.d_model
    n = graph.n_nodes
    edges = neighbour_index(graph)
    x = torch.randn(config.steps, n, d, dtype=DTYPE, generator=generator(config.seed))
    rho = torch.zeros(n, d, dtype=DTYPE)

    def once() -> None:
        for step in range(config.steps):
            layer(x[step : step + 1], edges, rho, rho)

    once()
    timings = []
    for _ in range(config.repeats):
        start = time.perf_counter()
        once()
        timings.append(time.perf_counter() - start)
    return timings, peak_memory(layer, x[:1], edges, rho)


def run_bench(config: BenchConfig, *, sample_base: int = 2, on_row=None) -> pd.DataFrame:
    rows = []
    for n in sorted(config.sizes):
        graph = random_graph(n, config.avg_degree, config.seed + n)
        for mode in config.modes:
            timings, peak = time_mode(mode, graph, config, sample_base=sample_base)
            row = BenchRow(
                mode=mode,
                n_nodes=n,
                queries=_queries(mode, n, sample_base),
                score_entries=_score_entries(mode, n, graph.n_edges, sample_base),
                median_seconds=statistics.median(timings),
                min_seconds=min(timings),
                peak_bytes=peak,
            )
            logger.info(
                "bench %s N=%d: %.4fs, peak %d bytes", mode, n, row.median_seconds, row.peak_bytes
            )
            rows.append(row)
            if on_row is not None:
                on_row(row)
    return pd.DataFrame([asdict(r) for r in rows])


def write_bench(frame: pd.DataFrame, path: str | Path) -> Path:
    return write_text(path, frame.to_csv(index=False, float_format="%.6g"))
