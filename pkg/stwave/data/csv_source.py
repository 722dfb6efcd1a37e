"""CSV flow files: long ``t,node,flow`` rows or a wide T x N matrix with a header."""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np
import pandas as pd

from stwave.artifacts import write_text
from stwave.data.base import BaseFlowSource, Dataset
from stwave.errors import ConsistencyError, ParseError

logger = logging.getLogger(__name__)

MISSING_TOKENS = {"", "na", "nan", "null", "none", "?"}
TIME_COLUMNS = {"t", "time", "timestamp", "step"}


def _numeric(frame: pd.DataFrame, path: Path) -> pd.DataFrame:
    """Parse string cells; missing tokens become NaN, anything else unparsable is an error."""
    stripped = frame.apply(lambda col: col.str.strip())
    missing = stripped.apply(lambda col: col.str.lower().isin(MISSING_TOKENS))
    parsed = stripped.apply(pd.to_numeric, errors="coerce")
    garbage = parsed.isna() & ~missing
    if garbage.to_numpy().any():
        row, col = np.argwhere(garbage.to_numpy())[0]
        raise ParseError(
            f"cannot parse {frame.iat[row, col]!r} in column '{frame.columns[col]}'",
            line=int(row) + 2,
            path=str(path),
        )
    return parsed


class CSVFlowSource(BaseFlowSource):
    format = "csv"

    def read_flow(self) -> tuple[np.ndarray, dict]:
        frame = pd.read_csv(self.path, dtype=str, keep_default_na=False, skipinitialspace=True)
        columns = [c.strip().lower() for c in frame.columns]
        frame.columns = columns
        if {"t", "node", "flow"} <= set(columns):
            return self._read_long(frame)
        return self._read_wide(frame)

    def _read_long(self, frame: pd.DataFrame) -> tuple[np.ndarray, dict]:
        parsed = _numeric(frame[["t", "node", "flow"]], self.path)
        keys = parsed[["t", "node"]]
        if keys.isna().any(axis=None):
            row = int(np.flatnonzero(keys.isna().any(axis=1).to_numpy())[0])
            raise ParseError("t and node may not be missing", line=row + 2, path=str(self.path))
        node = parsed["node"].to_numpy()
        if (node != np.round(node)).any() or (node < 0).any():
            raise ParseError("node ids must be non-negative integers", path=str(self.path))
        if keys.duplicated().any():
            row = int(np.flatnonzero(keys.duplicated().to_numpy())[0])
            raise ConsistencyError(
                f"{self.path}:{row + 2}: duplicate reading for t={keys.iat[row, 0]}, "
                f"node={keys.iat[row, 1]}"
            )

        n = int(node.max()) + 1 if len(node) else 0
        if self.n_nodes is not None:
            if n > self.n_nodes:
                raise ConsistencyError(
                    f"{self.path} references node {n - 1} but {self.n_nodes} nodes were declared"
                )
            n = self.n_nodes
        times = np.sort(parsed["t"].unique())
        t_index = np.searchsorted(times, parsed["t"].to_numpy())
        values = np.full((len(times), n), np.nan)
        values[t_index, node.astype(np.int64)] = parsed["flow"].to_numpy(dtype=np.float64)

        accounting = {
            "layout": "long",
            "rows_read": int(len(frame)),
            "rows_used": int(len(frame)),
            "rows_missing_value": int(parsed["flow"].isna().sum()),
            "cells_unreported": int(values.size - len(frame)),
        }
        return values, accounting

    def _read_wide(self, frame: pd.DataFrame) -> tuple[np.ndarray, dict]:
        if frame.columns[0] in TIME_COLUMNS:
            frame = frame.iloc[:, 1:]
        if frame.shape[1] == 0:
            raise ParseError("wide CSV has no node columns", line=1, path=str(self.path))
        parsed = _numeric(frame, self.path)
        values = parsed.to_numpy(dtype=np.float64)
        accounting = {
            "layout": "wide",
            "rows_read": int(len(frame)),
            "rows_used": int(values.shape[0]),
            "cells_missing": int((~np.isfinite(values)).sum()),
        }
        return values, accounting


def write_flow_csv(path: str | Path, dataset: Dataset) -> Path:
    """Wide layout: a ``t`` column then one column per node id."""
    values = dataset.to_array()
    frame = pd.DataFrame(values, columns=[str(i) for i in range(values.shape[1])])
    frame.insert(0, "t", np.arange(values.shape[0]))
    return write_text(path, frame.to_csv(index=False, na_rep="", float_format="%.17g"))


def write_edges_csv(path: str | Path, dataset: Dataset) -> Path:
    a = dataset.graph.adjacency
    src, dst = np.nonzero(np.triu(a, k=1))
    frame = pd.DataFrame({"from": src, "to": dst, "cost": a[src, dst]})
    return write_text(path, frame.to_csv(index=False, float_format="%.17g"))
