"""Dataset container and the abstract flow-file source."""

from __future__ import annotations

import abc
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from stwave.errors import ConsistencyError
from stwave.graphs import Graph, load_edge_list
from stwave.numerics import DTYPE

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PemsSize:
    nodes: int
    edges: int
    sample_minutes: int = 5


PEMS_DATASETS: dict[str, PemsSize] = {
    "pemsd3": PemsSize(nodes=358, edges=547),
    "pemsd4": PemsSize(nodes=307, edges=340),
    "pemsd7": PemsSize(nodes=883, edges=866),
    "pemsd8": PemsSize(nodes=170, edges=295),
}


def lookup_pems(name: str | None) -> PemsSize | None:
    """Match ``PeMSD8``, ``pems08`` and ``PEMS8`` style names."""
    if not name:
        return None
    key = name.lower().replace("_", "").replace("-", "")
    if key.startswith("pems") and not key.startswith("pemsd"):
        key = "pemsd" + key[4:]
    digits = key[5:].lstrip("0")
    return PEMS_DATASETS.get("pemsd" + digits)


@dataclass
class Dataset:
    """Flow matrix (T, N, 1) with its validity mask (T, N) and spatial graph.

    Missing entries hold 0 in ``flow`` and False in ``mask``.
    """

    flow: torch.Tensor
    mask: torch.Tensor
    graph: Graph
    name: str = "dataset"
    sample_minutes: int = 5
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.flow.dim() == 2:
            self.flow = self.flow.unsqueeze(-1)
        self.flow = self.flow.to(DTYPE)
        self.mask = self.mask.to(torch.bool)
        if self.mask.shape != self.flow.shape[:2]:
            raise ConsistencyError(
                f"mask shape {tuple(self.mask.shape)} does not match flow {tuple(self.flow.shape)}"
            )
        if self.flow.shape[1] != self.graph.n_nodes:
            raise ConsistencyError(
                f"flow has {self.flow.shape[1]} nodes "
                f"but the spatial graph has {self.graph.n_nodes}"
            )

    @property
    def n_steps(self) -> int:
        return int(self.flow.shape[0])

    @property
    def n_nodes(self) -> int:
        return int(self.flow.shape[1])

    @property
    def missing_ratio(self) -> float:
        return float((~self.mask).sum()) / max(1, self.mask.numel())

    @classmethod
    def from_array(cls, values: np.ndarray, graph: Graph, **kwargs) -> "Dataset":
        """Build from a (T, N) array where NaN/inf marks missing readings."""
        values = np.asarray(values, dtype=np.float64)
        valid = np.isfinite(values)
        filled = np.where(valid, values, 0.0)
        return cls(
            flow=torch.from_numpy(filled).unsqueeze(-1),
            mask=torch.from_numpy(valid),
            graph=graph,
            **kwargs,
        )

    def to_array(self) -> np.ndarray:
        """(T, N) array with NaN at missing entries."""
        values = self.flow[..., 0].numpy().copy()
        values[~self.mask.numpy()] = np.nan
        return values


class BaseFlowSource(abc.ABC):
    """Reads a flow file plus a ``from,to,cost`` edge list into a Dataset."""

    format: str = ""

    def __init__(
        self,
        path: str | Path,
        edges_path: str | Path,
        *,
        n_nodes: int | None = None,
        name: str | None = None,
        edge_weighting: str = "binary",
    ):
        self.path = Path(path)
        self.edges_path = Path(edges_path)
        self.n_nodes = n_nodes
        self.name = name or self.path.stem
        self.edge_weighting = edge_weighting

    @abc.abstractmethod
    def read_flow(self) -> tuple[np.ndarray, dict]:
        """Return a (T, N) array (NaN where missing) and row-accounting metadata."""
        ...

    def load(self) -> Dataset:
        if not self.path.exists():
            raise FileNotFoundError(f"Flow file not found: {self.path}")
        values, accounting = self.read_flow()
        n = values.shape[1]
        if self.n_nodes is not None and self.n_nodes != n:
            raise ConsistencyError(f"declared {self.n_nodes} nodes but {self.path} has {n}")

        known = lookup_pems(self.name)
        if known is not None and known.nodes != n:
            raise ConsistencyError(f"{self.name} should have {known.nodes} nodes, found {n}")

        graph = load_edge_list(self.edges_path, n, self.edge_weighting)
        if known is not None and known.edges != graph.n_edges:
            logger.warning(
                "%s lists %d edges; the published count is %d",
                self.name, graph.n_edges, known.edges,
            )

        dataset = Dataset.from_array(
            values, graph, name=self.name, metadata={"format": self.format, **accounting}
        )
        logger.info(
            "Loaded %s: T=%d N=%d missing=%.2f%%",
            self.name, dataset.n_steps, dataset.n_nodes, 100 * dataset.missing_ratio,
        )
        return dataset
