"""Flow-file sources, writers and the synthetic generator."""

from __future__ import annotations

import logging
from pathlib import Path

from stwave.artifacts import write_json
from stwave.data.base import PEMS_DATASETS, BaseFlowSource, Dataset, lookup_pems
from stwave.data.binary_source import BinaryFlowSource, read_flow_binary, write_flow_binary
from stwave.data.csv_source import CSVFlowSource, write_edges_csv, write_flow_csv
from stwave.data.synthetic import synth_components, synth_traffic

logger = logging.getLogger(__name__)

SOURCES: dict[str, type[BaseFlowSource]] = {
    "csv": CSVFlowSource,
    "binary": BinaryFlowSource,
}

FLOW_FILES = {"csv": "flow.csv", "binary": "flow.bin"}


def get_flow_source(name: str, /, **kwargs) -> BaseFlowSource:
    """Get a flow source by format name."""
    if name not in SOURCES:
        raise ValueError(f"Unknown flow format: {name}. Available: {list(SOURCES.keys())}")
    return SOURCES[name](**kwargs)


def ingest_flow(
    path: str | Path, fmt: str, edges_path: str | Path, **kwargs
) -> Dataset:
    return get_flow_source(fmt, path=path, edges_path=edges_path, **kwargs).load()


def save_dataset(dataset: Dataset, out_dir: str | Path, fmt: str = "csv") -> dict[str, Path]:
    """Write flow, ``edges.csv`` and ``manifest.json`` into ``out_dir``."""
    if fmt not in FLOW_FILES:
        raise ValueError(f"Unknown flow format: {fmt}. Available: {list(FLOW_FILES)}")
    out_dir = Path(out_dir)
    flow_path = out_dir / FLOW_FILES[fmt]
    if fmt == "csv":
        write_flow_csv(flow_path, dataset)
    else:
        write_flow_binary(flow_path, dataset)
    edges_path = write_edges_csv(out_dir / "edges.csv", dataset)
    manifest = {
        "name": dataset.name,
        "format": fmt,
        "flow": flow_path.name,
        "edges": edges_path.name,
        "n_steps": dataset.n_steps,
        "n_nodes": dataset.n_nodes,
        "n_edges": dataset.graph.n_edges,
        "sample_minutes": dataset.sample_minutes,
        "missing_ratio": dataset.missing_ratio,
        "metadata": dataset.metadata,
    }
    manifest_path = write_json(out_dir / "manifest.json", manifest)
    logger.info("Wrote %s dataset to %s", dataset.name, out_dir)
    return {"flow": flow_path, "edges": edges_path, "manifest": manifest_path}


__all__ = [
    "PEMS_DATASETS",
    "SOURCES",
    "BaseFlowSource",
    "BinaryFlowSource",
    "CSVFlowSource",
    "Dataset",
    "get_flow_source",
    "ingest_flow",
    "lookup_pems",
    "read_flow_binary",
    "save_dataset",
    "synth_components",
    "synth_traffic",
    "write_edges_csv",
    "write_flow_binary",
    "write_flow_csv",
]
