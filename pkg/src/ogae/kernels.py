"""RBF kernel matrices on frozen (non-differentiable) numpy arrays.

The differentiable kernel used inside the training loss is assembled from
autodiff primitives in :mod:`ogae.guidance`; this module owns the plain
numpy path used by the solver, final model fitting and scoring, where
matrices get large and must be built in row blocks.

Symmetry of the Gram matrix is exact by construction (off-diagonal blocks
are written once and mirrored with a transpose), the diagonal is exactly
``1 + jitter``, and rerunning on the same inputs is bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError, UsageError


@dataclass(frozen=True)
class KernelSpec:
    """Kernel family and parameters. Only the RBF kernel is supported:
    k(x, y) = exp(-gamma * ||x - y||^2).
    """

    gamma: float
    kind: str = "rbf"

    def __post_init__(self):
        if self.kind != "rbf":
            raise UsageError(f"unsupported kernel kind {self.kind!r} (only 'rbf')")
        if not np.isfinite(self.gamma) or self.gamma <= 0.0:
            raise UsageError(f"kernel gamma must be finite and > 0, got {self.gamma}")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "gamma": float(self.gamma)}

    @classmethod
    def from_dict(cls, d: dict) -> "KernelSpec":
        try:
            return cls(gamma=float(d["gamma"]), kind=str(d.get("kind", "rbf")))
        except (KeyError, TypeError, ValueError) as exc:
            raise UsageError(f"malformed kernel spec {d!r}") from exc


def default_gamma(dim: int) -> float:
    """1/d, the center of the search grid."""
    if dim <= 0:
        raise UsageError(f"latent dimension must be positive, got {dim}")
    return 1.0 / dim

def gamma_grid(dim: int) -> tuple[float, float, float]:
    """Candidate bandwidths {0.5/d, 1/d, 2/d} for model selection."""
    base = default_gamma(dim)
    return (0.5 * base, base, 2.0 * base)


def _check_2d(name: str, arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D (rows are points), got shape {arr.shape}")
    return arr


def _block_sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # ||a_i||^2 + ||b_j||^2 - 2 a_i . b_j, clamped: cancellation can leave
    # small negatives for near-identical rows.
    na = np.einsum("ij,ij->i", a, a)
    nb = np.einsum("ij,ij->i", b, b)
    d2 = na[:, None] + nb[None, :] - 2.0 * (a @ b.T)
    np.maximum(d2, 0.0, out=d2)
    return d2


def gram(x: np.ndarray, spec: KernelSpec, jitter: float = 1e-8, block: int = 2048) -> np.ndarray:
    """Symmetric Gram matrix K[i, j] = k(x_i, x_j) + jitter * I.

    Built block by block so peak temporary memory stays at one block pair
    even when the n x n result itself is gigabytes. The small diagonal
    regularizer keeps the QP strictly convex; pass ``jitter=0.0`` for the
    raw kernel matrix (used by decision scoring).
    """
    x = _check_2d("x", x)
    n = x.shape[0]
    if jitter < 0.0:
        raise UsageError(f"jitter must be >= 0, got {jitter}")
    out = np.empty((n, n), dtype=np.float64)
    for i0 in range(0, n, block):
        i1 = min(i0 + block, n)
        for j0 in range(i0, n, block):
            j1 = min(j0 + block, n)
            d2 = _block_sq_dists(x[i0:i1], x[j0:j1])
            if i0 == j0:
                np.fill_diagonal(d2, 0.0)
            kb = np.exp(-spec.gamma * d2)
            if i0 == j0:
                # a+b is commutative in IEEE arithmetic, so this block is
                # bitwise symmetric even though d2 itself may not be.
                kb = 0.5 * (kb + kb.T)
                out[i0:i1, j0:j1] = kb
            else:
                out[i0:i1, j0:j1] = kb
                out[j0:j1, i0:i1] = kb.T
    if jitter:
        out[np.diag_indices(n)] += jitter
    return out


def cross_gram(x: np.ndarray, y: np.ndarray, spec: KernelSpec, block: int = 4096) -> np.ndarray:
    """Rectangular kernel matrix K[i, j] = k(x_i, y_j), no jitter."""
    x = _check_2d("x", x)
    y = _check_2d("y", y)
    if x.shape[1] != y.shape[1]:
        raise ShapeError(f"point dimensions differ: {x.shape[1]} vs {y.shape[1]}")
    out = np.empty((x.shape[0], y.shape[0]), dtype=np.float64)
    for i0 in range(0, x.shape[0], block):
        i1 = min(i0 + block, x.shape[0])
        out[i0:i1] = np.exp(-spec.gamma * _block_sq_dists(x[i0:i1], y))
    return out
