"""Spatial and DTW temporal graphs, Laplacians and spectral positional encodings."""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from itertools import combinations
from pathlib import Path

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
from torch import nn

from stwave.artifacts import write_text
from stwave.errors import ConsistencyError, ParseError
from stwave.numerics import DTYPE, EigenBasis, symmetric_eigen_lowest

logger = logging.getLogger(__name__)

LAPLACIAN_VARIANT = "sym-normalized"
EIGEN_CACHE_VERSION = 1
_SYM_TOL = 1e-12


class GraphKind(str, Enum):
    SPATIAL = "spatial"
    TEMPORAL = "temporal"


@dataclass
class Graph:
    """Undirected weighted graph over N nodes."""

    adjacency: np.ndarray
    kind: GraphKind = GraphKind.SPATIAL
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        a = np.asarray(self.adjacency, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError(f"adjacency must be square, got shape {a.shape}")
        if not np.isfinite(a).all():
            raise ValueError("adjacency has non-finite entries")
        if (a < 0).any():
            raise ValueError("adjacency has negative weights")
        if np.abs(np.diag(a)).max(initial=0.0) > 0:
            raise ValueError("adjacency diagonal must be zero")
        if np.abs(a - a.T).max(initial=0.0) > _SYM_TOL:
            raise ValueError("adjacency is not symmetric")
        self.adjacency = a
        self.kind = GraphKind(self.kind)

    @property
    def n_nodes(self) -> int:
        return self.adjacency.shape[0]

    @property
    def n_edges(self) -> int:
        return int(np.count_nonzero(np.triu(self.adjacency, k=1)))

    def mean_degree(self) -> float:
        if self.n_nodes == 0:
            return 0.0
        return float((self.adjacency > 0).sum(axis=1).mean())

    def edge_index(self) -> tuple[np.ndarray, np.ndarray]:
        """(source, target) arrays of all directed edges, self-loops excluded."""
        src, dst = np.nonzero(self.adjacency)
        return src, dst

    def fingerprint(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.adjacency).tobytes()).hexdigest()


# ── Spatial builders ──────────────────────────────────────────────────


def ring_graph(n_nodes: int) -> Graph:
    a = np.zeros((n_nodes, n_nodes))
    if n_nodes >= 2:
        idx = np.arange(n_nodes)
        a[idx, (idx + 1) % n_nodes] = 1.0
        a = np.maximum(a, a.T)
        np.fill_diagonal(a, 0.0)
    return Graph(a, GraphKind.SPATIAL, {"layout": "ring"})


def grid_graph(n_nodes: int) -> Graph:
    """Near-square 4-neighbour lattice over ``n_nodes`` nodes, filled row by row."""
    cols = int(np.ceil(np.sqrt(n_nodes)))
    a = np.zeros((n_nodes, n_nodes))
    for i in range(n_nodes):
        r, c = divmod(i, cols)
        right = i + 1
        down = i + cols
        if c + 1 < cols and right < n_nodes:
            a[i, right] = a[right, i] = 1.0
        if down < n_nodes:
            a[i, down] = a[down, i] = 1.0
    return Graph(a, GraphKind.SPATIAL, {"layout": "grid", "cols": cols})


def load_edge_list(path: str | Path, n_nodes: int, weighting: str = "binary") -> Graph:
    """Read a ``from,to,cost`` CSV into a symmetric spatial graph.

    ``binary`` gives every listed edge weight 1; ``gaussian`` uses
    exp(-(cost/std)^2) over the listed costs.
    """
    if weighting not in ("binary", "gaussian"):
        raise ValueError(f"Unknown edge weighting: {weighting}. Available: ['binary', 'gaussian']")
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Edge list not found: {path}")
    frame = pd.read_csv(path, dtype=str, skipinitialspace=True)
    missing = {"from", "to", "cost"} - set(frame.columns)
    if missing:
        raise ParseError(f"edge list header lacks {sorted(missing)}", line=1, path=str(path))

    parsed = frame[["from", "to", "cost"]].apply(pd.to_numeric, errors="coerce")
    bad = parsed.isna().any(axis=1).to_numpy()
    if bad.any():
        row = int(np.flatnonzero(bad)[0])
        raise ParseError(
            f"malformed edge row {frame.iloc[row].tolist()}", line=row + 2, path=str(path)
        )

    src = parsed["from"].to_numpy()
    dst = parsed["to"].to_numpy()
    cost = parsed["cost"].to_numpy(dtype=np.float64)
    if (src != np.round(src)).any() or (dst != np.round(dst)).any():
        raise ParseError("node ids must be integers", path=str(path))
    src = src.astype(np.int64)
    dst = dst.astype(np.int64)
    if len(src) and (min(src.min(), dst.min()) < 0 or max(src.max(), dst.max()) >= n_nodes):
        raise ConsistencyError(
            f"edge list references node ids outside [0, {n_nodes}) in {path}"
        )

    keep = src != dst
    if weighting == "binary":
        weight = np.ones(keep.sum())
    else:
        std = cost[keep].std()
        weight = np.exp(-np.square(cost[keep] / std)) if std > 0 else np.ones(keep.sum())

    a = np.zeros((n_nodes, n_nodes))
    np.maximum.at(a, (src[keep], dst[keep]), weight)
    a = np.maximum(a, a.T)
    return Graph(
        a,
        GraphKind.SPATIAL,
        {"source": str(path), "weighting": weighting, "rows": int(len(frame)),
         "self_loops_dropped": int((~keep).sum())},
    )


# ── DTW temporal graph ────────────────────────────────────────────────


def dtw_distance(a, b) -> float:
    """Classic DTW with |a_i - b_j| local cost, evaluated one anti-diagonal at a time."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError(f"dtw_distance needs non-empty series (got {a.size} and {b.size})")
    n, m = a.size, b.size
    cost = np.abs(a[:, None] - b[None, :])
    acc = np.full((n + 1, m + 1), np.inf)
    acc[0, 0] = 0.0
    for s in range(2, n + m + 1):
        i = np.arange(max(1, s - m), min(n, s - 1) + 1)
        j = s - i
        prev = np.minimum(np.minimum(acc[i - 1, j], acc[i, j - 1]), acc[i - 1, j - 1])
        acc[i, j] = cost[i - 1, j - 1] + prev
    return float(acc[n, m])


def dtw_matrix(series: np.ndarray, workers: int = 1) -> np.ndarray:
    """Pairwise DTW distances between the columns of a (T, N) array."""
    n = series.shape[1]
    pairs = list(combinations(range(n), 2))
    cols = [np.ascontiguousarray(series[:, i]) for i in range(n)]

    def _one(pair: tuple[int, int]) -> float:
        return dtw_distance(cols[pair[0]], cols[pair[1]])

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            values = list(pool.map(_one, pairs))
    else:
        values = [_one(p) for p in pairs]

    dist = np.zeros((n, n))
    for (i, j), v in zip(pairs, values):
        dist[i, j] = dist[j, i] = v
    return dist


def _standardize(series: np.ndarray) -> np.ndarray:
    mean = series.mean(axis=0, keepdims=True)
    std = series.std(axis=0, keepdims=True)
    return (series - mean) / np.where(std > 0, std, 1.0)


def build_temporal_graph(
    history,
    k_sparsity: int,
    *,
    period: int | None = None,
    workers: int = 1,
) -> Graph:
    """Node-similarity graph from DTW distances between standardized histories.

    ``history`` is (T, N) or (T, N, 1) and should be the training segment only.
    With ``period`` set and T >= period, histories are first averaged into one
    period-long profile per node.
    """
    series = history.detach().cpu().numpy() if isinstance(history, torch.Tensor) else history
    series = np.asarray(series, dtype=np.float64)
    if series.ndim == 3:
        series = series[..., 0]
    t, n = series.shape
    if t < 2:
        raise ValueError(f"temporal graph needs at least 2 time steps, got {t}")
    if not 1 <= k_sparsity < n:
        raise ValueError(f"k_sparsity must lie in [1, {n - 1}], got {k_sparsity}")

    series = _standardize(series)
    if period and t >= period:
        days = t // period
        series = series[: days * period].reshape(days, period, n).mean(axis=0)

    dist = dtw_matrix(series, workers=workers)
    off = dist[~np.eye(n, dtype=bool)]
    meta = {"k": k_sparsity, "period": period, "profile_length": series.shape[0]}

    if np.ptp(off) == 0:
        logger.warning("All node histories are DTW-equidistant; using a uniform temporal graph")
        a = np.ones((n, n)) - np.eye(n)
        return Graph(a, GraphKind.TEMPORAL, {**meta, "degenerate": True, "sigma": None})

    ranked = dist + np.diag(np.full(n, np.inf))
    keep = np.zeros((n, n), dtype=bool)
    for i in range(n):
        keep[i, np.argsort(ranked[i], kind="stable")[:k_sparsity]] = True

    kept = dist[keep]
    sigma = float(kept.std())
    if sigma <= 0:
        sigma = float(kept.mean()) or 1.0
    weights = np.where(keep, np.exp(-dist / sigma), 0.0)
    a = np.maximum(weights, weights.T)
    np.fill_diagonal(a, 0.0)
    return Graph(a, GraphKind.TEMPORAL, {**meta, "degenerate": False, "sigma": sigma})


# ── Spectrum ──────────────────────────────────────────────────────────


def normalized_laplacian(g: Graph) -> torch.Tensor:
    """I - D^{-1/2} A D^{-1/2}; isolated nodes keep an identity row."""
    a = g.adjacency
    deg = a.sum(axis=1)
    inv_sqrt = np.zeros_like(deg)
    np.divide(1.0, np.sqrt(deg), out=inv_sqrt, where=deg > 0)
    lap = np.eye(g.n_nodes) - inv_sqrt[:, None] * a * inv_sqrt[None, :]
    lap = 0.5 * (lap + lap.T)
    return torch.from_numpy(lap).to(DTYPE)


class EigenCache:
    """JSON blobs of Laplacian eigenbases keyed by (adjacency hash, variant, d)."""

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)

    def key(self, g: Graph, d: int) -> str:
        raw = f"{g.fingerprint()}:{LAPLACIAN_VARIANT}:{d}".encode()
        return hashlib.sha256(raw).hexdigest()[:24]

    def path_for(self, g: Graph, d: int) -> Path:
        return self.directory / f"eigen-{self.key(g, d)}.json"

    def load(self, g: Graph, d: int) -> EigenBasis | None:
        path = self.path_for(g, d)
        if not path.exists():
            return None
        blob = json.loads(path.read_text())
        if blob.get("version") != EIGEN_CACHE_VERSION or blob.get("laplacian") != LAPLACIAN_VARIANT:
            logger.info("Ignoring stale eigen cache %s", path.name)
            return None
        return EigenBasis(
            eigenvalues=torch.tensor(blob["eigenvalues"], dtype=DTYPE),
            eigenvectors=torch.tensor(blob["eigenvectors"], dtype=DTYPE),
        )

    def store(self, g: Graph, d: int, basis: EigenBasis) -> Path:
        path = self.path_for(g, d)
        blob = {
            "version": EIGEN_CACHE_VERSION,
            "laplacian": LAPLACIAN_VARIANT,
            "n": g.n_nodes,
            "d": d,
            "eigenvalues": basis.eigenvalues.tolist(),
            "eigenvectors": basis.eigenvectors.tolist(),
        }
        return write_text(path, json.dumps(blob))


def laplacian_eigenbasis(g: Graph, d: int, cache: EigenCache | None = None) -> EigenBasis:
    if cache is not None:
        hit = cache.load(g, d)
        if hit is not None:
            return hit
        logger.info("Eigen cache miss for %s graph (N=%d, d=%d)", g.kind.value, g.n_nodes, d)
    basis = symmetric_eigen_lowest(normalized_laplacian(g), d)
    if cache is not None:
        cache.store(g, d, basis)
    return basis


# ── Positional encoding ───────────────────────────────────────────────


class GraphPE(nn.Module):
    """Wavelet positional encoding rho = Phi diag(exp(s * lambda))^(1/2).

    The scale ``s`` is the only learnable piece; the eigenbasis is a constant
    buffer. ``d_model`` may exceed the number of retained eigenpairs, in which
    case rho is zero-padded on the right.
    """

    def __init__(
        self,
        basis: EigenBasis,
        d_model: int | None = None,
        scale: float | nn.Parameter = -1.0,
        *,
        enabled: bool = True,
    ):
        super().__init__()
        self.d_model = basis.size if d_model is None else d_model
        if self.d_model < basis.size:
            raise ValueError(f"d_model {self.d_model} is below the basis size {basis.size}")
        self.enabled = enabled
        self.register_buffer("eigenvalues", basis.eigenvalues.to(DTYPE).clone())
        self.register_buffer("eigenvectors", basis.eigenvectors.to(DTYPE).clone())
        if isinstance(scale, nn.Parameter):
            self.scale = scale
        else:
            self.scale = nn.Parameter(torch.tensor(float(scale), dtype=DTYPE))

    @property
    def basis(self) -> EigenBasis:
        return EigenBasis(self.eigenvalues, self.eigenvectors)

    @property
    def rho(self) -> torch.Tensor:
        """Unpadded N x d encoding, recomputed from the current scale."""
        return self.eigenvectors * torch.exp(0.5 * self.scale * self.eigenvalues)[None, :]

    def forward(self) -> torch.Tensor:
        n = self.eigenvectors.shape[0]
        if not self.enabled:
            return torch.zeros(n, self.d_model, dtype=DTYPE, device=self.eigenvectors.device)
        rho = self.rho
        pad = self.d_model - rho.shape[1]
        return F.pad(rho, (0, pad)) if pad else rho

    def wavelet(self) -> torch.Tensor:
        """rho rho^T, the graph wavelet restricted to the retained spectrum."""
        rho = self.rho
        return rho @ rho.T


def graph_positional_encoding(
    g: Graph,
    d: int,
    s: float | nn.Parameter = -1.0,
    *,
    cache: EigenCache | None = None,
) -> GraphPE:
    """Encoding from the ``d`` lowest Laplacian eigenpairs of ``g``."""
    if d > g.n_nodes:
        raise ValueError(f"PE dimension {d} exceeds node count {g.n_nodes}")
    return GraphPE(laplacian_eigenbasis(g, d, cache), d, s)


def padded_positional_encoding(
    g: Graph,
    d_model: int,
    s: float = -1.0,
    *,
    cache: EigenCache | None = None,
    enabled: bool = True,
) -> GraphPE:
    """Encoding sized to the model dimension: min(d_model, N) eigenpairs, zero-padded."""
    basis = laplacian_eigenbasis(g, min(d_model, g.n_nodes), cache)
    return GraphPE(basis, d_model, s, enabled=enabled)
