"""Tensor primitives, the symmetric eigensolver and the gradient checker.

Every tensor in the package is a double-precision ``torch.Tensor``; reverse-mode
differentiation is torch autograd. Graph-side linear algebra goes through scipy.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Callable, Iterable, Mapping
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import torch

from stwave.errors import (
    ConvergenceError,
    DegenerateMaskError,
    DimensionError,
    EvaluationError,
    SymmetryError,
)

logger = logging.getLogger(__name__)

DTYPE = torch.float64
SYMMETRY_TOL = 1e-10
SIGN_TOL = 1e-10


def as_flow(x, *, dtype: torch.dtype = DTYPE) -> torch.Tensor:
    """Coerce arrays, lists and tensors to a float64 tensor."""
    if isinstance(x, torch.Tensor):
        return x.to(dtype)
    return torch.as_tensor(np.asarray(x, dtype=np.float64), dtype=dtype)


def generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g


# ── Products and activations ──────────────────────────────────────────


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Batched matrix product with a readable error on inner-extent mismatch."""
    if a.dim() == 0 or b.dim() == 0:
        raise DimensionError("matmul needs at least 1-D operands", tuple(a.shape), tuple(b.shape))
    inner_b = b.shape[-2] if b.dim() >= 2 else b.shape[0]
    if a.shape[-1] != inner_b:
        raise DimensionError("matmul inner extents differ", tuple(a.shape), tuple(b.shape))
    try:
        return torch.matmul(a, b)
    except RuntimeError as e:
        raise DimensionError(f"matmul failed ({e})", tuple(a.shape), tuple(b.shape)) from e


def softmax_lastdim(x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Softmax over the last axis; ``mask`` marks entries that may receive weight.

    Masked entries come out exactly zero. A row with nothing unmasked is an error.
    """
    if mask is None:
        return torch.softmax(x, dim=-1)
    try:
        keep = torch.broadcast_to(mask.to(torch.bool), x.shape)
    except RuntimeError as e:
        raise DimensionError("mask is not broadcastable", tuple(mask.shape), tuple(x.shape)) from e
    dead = ~keep.any(dim=-1)
    if bool(dead.any()):
        raise DegenerateMaskError(
            f"{int(dead.sum())} softmax row(s) are fully masked "
            f"(first at {dead.nonzero()[0].tolist()})"
        )
    weights = torch.softmax(x.masked_fill(~keep, float("-inf")), dim=-1)
    return weights.masked_fill(~keep, 0.0)


def relu(x: torch.Tensor) -> torch.Tensor:
    return torch.relu(x)


# ── Eigen ─────────────────────────────────────────────────────────────


@dataclass(frozen=True)
class EigenBasis:
    """The d lowest eigenpairs of a symmetric matrix, ascending."""

    eigenvalues: torch.Tensor
    eigenvectors: torch.Tensor

    @property
    def size(self) -> int:
        return int(self.eigenvalues.shape[0])


def _fix_signs(vectors: np.ndarray) -> np.ndarray:
    out = vectors.copy()
    for j in range(out.shape[1]):
        nonzero = np.flatnonzero(np.abs(out[:, j]) > SIGN_TOL)
        if nonzero.size and out[nonzero[0], j] < 0:
            out[:, j] = -out[:, j]
    return out


def symmetric_eigen_lowest(m, d: int) -> EigenBasis:
    """Return the ``d`` lowest eigenpairs of symmetric ``m``.

    The first component above 1e-10 in magnitude of every eigenvector is made
    positive so cached bases are reproducible.
    """
    arr = m.detach().cpu().numpy() if isinstance(m, torch.Tensor) else np.asarray(m)
    arr = arr.astype(np.float64, copy=False)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise DimensionError("eigen input must be square", arr.shape)
    n = arr.shape[0]
    if not 1 <= d <= n:
        raise ValueError(f"d must lie in [1, {n}], got {d}")
    asym = float(np.max(np.abs(arr - arr.T))) if n else 0.0
    if asym > SYMMETRY_TOL:
        raise SymmetryError(f"matrix is not symmetric (max |m - m^T| = {asym:.3e})")

    sym = 0.5 * (arr + arr.T)
    try:
        values, vectors = scipy.linalg.eigh(sym, subset_by_index=[0, d - 1])
    except np.linalg.LinAlgError as e:
        raise ConvergenceError(f"eigensolver did not converge: {e}") from e

    vectors = _fix_signs(vectors)
    return EigenBasis(
        eigenvalues=torch.from_numpy(np.ascontiguousarray(values)),
        eigenvectors=torch.from_numpy(np.ascontiguousarray(vectors)),
    )


# ── Gradients ─────────────────────────────────────────────────────────


def zero_grads(params: Iterable[torch.Tensor]) -> None:
    for p in params:
        p.grad = torch.zeros_like(p)


def _as_named(params) -> list[tuple[str, torch.Tensor]]:
    if isinstance(params, Mapping):
        return list(params.items())
    items = list(params)
    if items and isinstance(items[0], tuple):
        return items
    return [(f"param{i}", p) for i, p in enumerate(items)]


def grad_check(
    f: Callable[[], torch.Tensor],
    params,
    eps: float = 1e-5,
    *,
    max_entries: int = 10_000,
    seed: int = 0,
    floor: float = 1e-8,
    atol: float = 0.0,
) -> float:
    """Compare autograd gradients of scalar ``f()`` against central differences.

    ``params`` is a mapping or sequence of leaf tensors (or ``(name, tensor)``
    pairs) that ``f`` closes over. Entries are perturbed in place and restored.
    Above ``max_entries`` total entries a seeded random subsample is checked.
    Returns the maximum relative error; an absolute discrepancy at or below
    ``atol`` counts as zero.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    named = _as_named(params)
    tensors = [p for _, p in named]

    value = f()
    if not torch.isfinite(value).all():
        raise EvaluationError(f"f is not finite at the base point ({value})")
    if value.requires_grad:
        grads = torch.autograd.grad(value, tensors, allow_unused=True)
    else:
        grads = (None,) * len(tensors)
    grads = [torch.zeros_like(p) if g is None else g.detach() for p, g in zip(tensors, grads)]

    sizes = [p.numel() for p in tensors]
    offsets = np.cumsum([0] + sizes)
    total = int(offsets[-1])
    if total > max_entries:
        picks = np.sort(np.random.default_rng(seed).choice(total, size=max_entries, replace=False))
    else:
        picks = np.arange(total)

    worst = 0.0
    worst_at = None
    with torch.no_grad():
        for flat_index in picks:
            k = int(np.searchsorted(offsets, flat_index, side="right") - 1)
            i = int(flat_index - offsets[k])
            flat = tensors[k].data.view(-1)
            original = flat[i].item()

            flat[i] = original + eps
            f_plus = f()
            flat[i] = original - eps
            f_minus = f()
            flat[i] = original

            if not (torch.isfinite(f_plus).all() and torch.isfinite(f_minus).all()):
                raise EvaluationError(f"f is not finite near {named[k][0]}[{i}]")
            numeric = (f_plus.item() - f_minus.item()) / (2.0 * eps)
            analytic = grads[k].view(-1)[i].item()
            diff = abs(analytic - numeric)
            if diff <= atol:
                continue
            rel = diff / max(abs(analytic), abs(numeric), floor)
            if rel > worst:
                worst, worst_at = rel, (named[k][0], i, analytic, numeric)

    if worst_at is not None:
        logger.debug("grad_check worst entry %s[%d]: analytic=%g numeric=%g", *worst_at)
    return worst if math.isfinite(worst) else float("inf")
