"""Boundary-guided training loss for autoencoder latents.

Each batch of latents is split positionally into two halves. A one-class
SVM is solved exactly on the first half (z_svm), and the second half
(z_loss) pays a hinge penalty for falling outside the estimated support:

    penalty = sum_j max(0, -f(z_loss_j)),
    f(z) = sum_i alpha_i k(z_svm_i, z) - rho.

The penalty enters the total loss twice with complementary stop-gradient
routing. The expander term lets gradients reach the encoder only through
z_svm (optionally also through the solved alpha, rho), moving the boundary
toward the misclassified points. The compactor term routes only through
z_loss, pulling those points inside the boundary. Forward values are
identical for every routing choice; only adjoints differ.

The QP is treated as a differentiable layer: its solution enters the graph
via custom nodes whose backward pass applies the implicit-function-theorem
gradient of the solved KKT system with respect to the Gram entries.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .errors import SolverError, UsageError
from .kernels import KernelSpec
from .ocsvm import OcsvmSolution, OcsvmSpec, implicit_grad, solve_dual

logger = logging.getLogger(__name__)

QP_JITTER = 1e-8


@dataclass
class BatchSplit:
    """Positional halves of one latent batch (first half fits the SVM)."""

    z_svm: ad.Tensor
    z_loss: ad.Tensor


def split_batch(z: ad.Tensor) -> BatchSplit:
    """First ceil(n/2) rows estimate the support; the rest pay the penalty.

    The split is purely positional; any shuffling belongs to the data
    loader. Batches smaller than 4 leave a half too small to be useful.
    """
    n = z.shape[0]
    if n < 4:
        raise UsageError(f"batch of {n} latents cannot be split (need n >= 4)")
    cut = (n + 1) // 2
    return BatchSplit(z_svm=ad.slice_rows(z, 0, cut), z_loss=ad.slice_rows(z, cut, n))


@dataclass(frozen=True)
class GuidanceConfig:
    """Weights and routing switches of the guided loss.

    ``lam`` scales the whole guidance penalty; ``beta1``/``beta2`` weight
    the expander and compactor terms and must sum to 1. ``schedule``
    optionally overrides the betas per epoch (last entry repeats when
    training runs longer). ``expander_through_qp`` selects whether the
    expander also differentiates through the solved alpha and rho or
    stop-gradients them.
    """

    lam: float
    beta1: float = 1.0
    beta2: float = 0.0
    schedule: tuple[tuple[float, float], ...] | None = None
    expander_through_qp: bool = True

    def __post_init__(self):
        if self.lam < 0.0 or not np.isfinite(self.lam):
            raise UsageError(f"guidance weight must be finite and >= 0, got {self.lam}")
        _check_betas(self.beta1, self.beta2)
        if self.schedule is not None:
            if len(self.schedule) == 0:
                raise UsageError("schedule must have at least one entry or be None")
            for pair in self.schedule:
                _check_betas(*pair)

    def betas_for_epoch(self, epoch: int) -> tuple[float, float]:
        """(beta1, beta2) for a 0-based epoch index."""
        if self.schedule is None:
            return (self.beta1, self.beta2)
        return self.schedule[min(epoch, len(self.schedule) - 1)]

    def at_epoch(self, epoch: int) -> "GuidanceConfig":
        b1, b2 = self.betas_for_epoch(epoch)
        return replace(self, beta1=b1, beta2=b2)


def _check_betas(b1: float, b2: float) -> None:
    if b1 < 0.0 or b2 < 0.0 or abs(b1 + b2 - 1.0) > 1e-12:
        raise UsageError(f"betas must be nonnegative and sum to 1, got ({b1}, {b2})")


def default_schedule(n_epochs: int) -> tuple[tuple[float, float], ...]:
    """Expander-only for the first half, equal mix for the second.

    The first floor(E/2) epochs use (1, 0), the remainder (0.5, 0.5);
    growing the boundary first and then jointly compacting is the
    best-performing strategy among the ordering variants.
    """
    if n_epochs < 1:
        raise UsageError(f"schedule needs n_epochs >= 1, got {n_epochs}")
    half = n_epochs // 2
    return tuple([(1.0, 0.0)] * half + [(0.5, 0.5)] * (n_epochs - half))


def qp_layer(
    k_svm: ad.Tensor, nu: float, max_iter: int = 5000
) -> tuple[ad.Tensor, ad.Tensor, OcsvmSolution]:
    """Solve the dual on the (differentiable) Gram matrix of z_svm.

    Returns alpha and rho as graph nodes whose backward pass routes
    adjoints to the Gram entries through the KKT implicit gradient. The
    two nodes backpropagate independently; their contributions add, which
    matches the joint gradient because the upstream-to-dK map is linear.
    """
    n = k_svm.shape[0]
    spec = OcsvmSpec(nu=nu, n=n)
    k_solver = k_svm.data + QP_JITTER * np.eye(n)
    sol = solve_dual(k_solver, spec, max_iter=max_iter)

    def backward_alpha(g):
        ad.accumulate_grad(k_svm, implicit_grad(k_solver, sol, g_alpha=g, g_rho=0.0).d_k)

    def backward_rho(g):
        ad.accumulate_grad(k_svm, float(g) * implicit_grad(k_solver, sol, None, 1.0).d_k)

    alpha_t = ad.custom_node(sol.alpha, (k_svm,), backward_alpha, op="qp_alpha")
    rho_t = ad.custom_node(sol.rho, (k_svm,), backward_rho, op="qp_rho")
    return alpha_t, rho_t, sol


def differentiable_gram(z: ad.Tensor, kspec: KernelSpec) -> ad.Tensor:
    """RBF Gram matrix as a graph op (no jitter; the QP layer adds it)."""
    return ad.exp(-kspec.gamma * ad.pairwise_sq_dists(z, z))


def guidance_penalty(
    split: BatchSplit,
    kspec: KernelSpec,
    nu: float,
    through_qp: bool = True,
) -> tuple[ad.Tensor | None, OcsvmSolution | None]:
    """Hinge penalty of z_loss against the boundary fit on z_svm.

    Both halves enter exactly as given; callers apply stop_gradient to
    whichever inputs the term must not differentiate. Returns (None, None)
    when the per-batch QP fails, so the caller can skip the term.
    """
    try:
        k_svm = differentiable_gram(split.z_svm, kspec)
        alpha_t, rho_t, sol = qp_layer(k_svm, nu)
    except SolverError as exc:
        logger.warning(
            "per-batch QP failed (gap=%s after %s iterations); skipping guidance term",
            getattr(exc, "gap", None),
            getattr(exc, "iterations", None),
        )
        return None, None
    if not through_qp:
        alpha_t = ad.stop_gradient(alpha_t)
        rho_t = ad.stop_gradient(rho_t)
    k_cross = ad.exp(-kspec.gamma * ad.pairwise_sq_dists(split.z_svm, split.z_loss))
    scores = ad.reshape(alpha_t, (1, -1)) @ k_cross
    penalty = ad.tsum(ad.relu(rho_t - scores))
    return penalty, sol


def ogae_loss(
    x: ad.Tensor,
    x_hat: ad.Tensor,
    split: BatchSplit | None,
    cfg: GuidanceConfig,
    kspec: KernelSpec | None,
    nu: float | None,
) -> tuple[ad.Tensor, dict]:
    """Total training loss: reconstruction + routed guidance penalty.

    loss = sum ||x - x_hat||^2
         + lam * (beta1 * expander_penalty + beta2 * compactor_penalty)

    where both penalty terms share one QP solve and have the same forward
    value; they differ only in which inputs are stop-gradiented. With
    lam = 0 the guidance machinery (including the QP) is skipped entirely
    and the result is exactly the plain reconstruction loss.

    Returns (loss, diagnostics); diagnostics report the penalty value,
    margin-SV count and whether the batch's QP was skipped.
    """
    recon = ad.tsum(ad.square(x - x_hat))
    if cfg.lam == 0.0:
        return recon, {"penalty": 0.0, "skipped": False, "solution": None}
    if split is None or kspec is None or nu is None:
        raise UsageError("guidance requires a batch split, kernel spec and nu when lam > 0")

    # One QP on the raw z_svm Gram; shared by both routed terms.
    k_svm = differentiable_gram(split.z_svm, kspec)
    try:
        alpha_t, rho_t, sol = qp_layer(k_svm, nu)
    except SolverError as exc:
        logger.warning(
            "per-batch QP failed (gap=%s after %s iterations); skipping guidance term",
            getattr(exc, "gap", None),
            getattr(exc, "iterations", None),
        )
        return recon, {"penalty": 0.0, "skipped": True, "solution": None}

    def hinge(alpha_node, rho_node, z_svm_node, z_loss_node):
        k_cross = ad.exp(-kspec.gamma * ad.pairwise_sq_dists(z_svm_node, z_loss_node))
        scores = ad.reshape(alpha_node, (1, -1)) @ k_cross
        return ad.tsum(ad.relu(rho_node - scores))

    # Terms with zero weight are not built: their contribution (exact zeros
    # forward and backward) is unchanged, the graph just stays smaller.
    sg = ad.stop_gradient
    guidance = None
    penalty_value = 0.0
    if cfg.beta1 != 0.0:
        if cfg.expander_through_qp:
            expander = hinge(alpha_t, rho_t, split.z_svm, sg(split.z_loss))
        else:
            expander = hinge(sg(alpha_t), sg(rho_t), split.z_svm, sg(split.z_loss))
        guidance = cfg.beta1 * expander
        penalty_value = float(expander.data)
    if cfg.beta2 != 0.0:
        compactor = hinge(sg(alpha_t), sg(rho_t), sg(split.z_svm), split.z_loss)
        guidance = cfg.beta2 * compactor if guidance is None else guidance + cfg.beta2 * compactor
        penalty_value = float(compactor.data)

    loss = recon + cfg.lam * guidance
    return loss, {
        "penalty": penalty_value,
        "skipped": False,
        "solution": sol,
        "margin_sv_count": int(len(sol.margin_sv_indices)),
        "qp_gap": float(sol.primal_dual_gap),
        "qp_degenerate": bool(sol.degenerate),
    }


def latent_spread(z: np.ndarray) -> float:
    """Mean pairwise squared distance between latent vectors.

    The diagnostic tracked across epochs: it grows while the expander
    dominates and shrinks under the compactor.
    """
    z = np.asarray(z, dtype=np.float64)
    n = z.shape[0]
    if n < 2:
        return 0.0
    sq = np.einsum("ij,ij->i", z, z)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (z @ z.T)
    np.maximum(d2, 0.0, out=d2)
    return float(d2.sum() / (n * (n - 1)))
