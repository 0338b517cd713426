"""Exact one-class SVM dual solver with implicit differentiation.

The dual QP

    minimize   (1/2) a' K a
    subject to 0 <= a_i <= 1/(nu*n),   sum_i a_i = 1

is solved to machine accuracy in two phases: a spectral projected-gradient
descent over the box-intersect-simplex set (projection by bisection on the
shift parameter), then an active-set polish that solves the reduced KKT
equality system of the current margin set and migrates misclassified
coordinates until the KKT conditions hold exactly.

Internally the solver works in scaled variables a~ = nu*n*a whose box is
exactly [0, 1]; results are reported in the raw variables. The offset rho
is recovered by averaging Sum_j a_j K_ij over margin support vectors, and
the decision function is f(z) = Sum_j a_j k(z_j, z) - rho (positive inside
the estimated support).

``implicit_grad`` differentiates (a*, rho*) with respect to the Gram
entries by the implicit function theorem on the reduced KKT system, which
lets a training loss treat the solved QP as a differentiable layer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError, ShapeError, SolverError, UsageError
from .kernels import KernelSpec, cross_gram

# A coordinate is a margin SV when its scaled weight is strictly inside
# [0, 1] by more than this margin.
MARGIN_TOL = 1e-7
# Target sup-norm of the projected-gradient fixed-point residual (scaled).
RESIDUAL_TOL = 1e-10
# Reduced KKT systems worse conditioned than this get Tikhonov-regularized.
CONDITION_LIMIT = 1e12
TIKHONOV = 1e-10


@dataclass(frozen=True)
class OcsvmSpec:
    """Problem-size parameters of one dual instance.

    ``scaled`` selects whether iterations run in a~ = nu*n*a (box exactly
    [0, 1], better conditioned for small nu) or in the raw variables; both
    paths return raw-variable solutions.
    """

    nu: float
    n: int
    scaled: bool = True

    def __post_init__(self):
        if not (0.0 < self.nu <= 1.0):
            raise UsageError(f"nu must be in (0, 1], got {self.nu}")
        if self.n < 1:
            raise UsageError(f"n must be >= 1, got {self.n}")

    @property
    def upper_bound(self) -> float:
        return 1.0 / (self.nu * self.n)


@dataclass
class OcsvmSolution:
    """Solved dual with diagnostics.

    ``alpha`` is in raw variables (sums to 1). The three index arrays
    partition range(n): margin SVs (0 < a < upper bound, by MARGIN_TOL in
    scaled units), bound SVs (a at the upper bound) and zeros.
    ``primal_dual_gap`` is the sup-norm of the projected-gradient
    fixed-point residual of the scaled problem at the returned point;
    ``degenerate`` flags an ill-conditioned reduced KKT system met during
    polishing or gradient evaluation.
    """

    alpha: np.ndarray
    rho: float
    objective: float
    margin_sv_indices: np.ndarray
    bound_sv_indices: np.ndarray
    free_zero_indices: np.ndarray
    iterations: int
    primal_dual_gap: float
    nu: float
    degenerate: bool = False

    def to_dict(self) -> dict:
        return {
            "alpha": [float(a) for a in self.alpha],
            "rho": float(self.rho),
            "objective": float(self.objective),
            "margin_sv_indices": [int(i) for i in self.margin_sv_indices],
            "bound_sv_indices": [int(i) for i in self.bound_sv_indices],
            "free_zero_indices": [int(i) for i in self.free_zero_indices],
            "iterations": int(self.iterations),
            "primal_dual_gap": float(self.primal_dual_gap),
            "nu": float(self.nu),
            "degenerate": bool(self.degenerate),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "OcsvmSolution":
        try:
            return cls(
                alpha=np.asarray(d["alpha"], dtype=np.float64),
                rho=float(d["rho"]),
                objective=float(d["objective"]),
                margin_sv_indices=np.asarray(d["margin_sv_indices"], dtype=np.int64),
                bound_sv_indices=np.asarray(d["bound_sv_indices"], dtype=np.int64),
                free_zero_indices=np.asarray(d["free_zero_indices"], dtype=np.int64),
                iterations=int(d["iterations"]),
                primal_dual_gap=float(d["primal_dual_gap"]),
                nu=float(d["nu"]),
                degenerate=bool(d.get("degenerate", False)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise UsageError(f"malformed solution record: {exc}") from exc


def project_box_simplex(v: np.ndarray, upper: float, total: float) -> np.ndarray:
    """Euclidean projection onto {0 <= x <= upper, sum x = total}.

    The projection is clip(v - tau, 0, upper) for the unique shift tau
    making the sum hit ``total``; the sum is continuous and nonincreasing
    in tau, so bisection finds it. Requires n*upper >= total >= 0.
    """
    n = v.shape[0]
    if total < -1e-12 or n * upper < total - 1e-9:
        raise UsageError(f"infeasible projection target: n={n}, upper={upper}, total={total}")
    lo = float(v.min()) - upper - 1.0
    hi = float(v.max()) + 1.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        s = np.clip(v - mid, 0.0, upper).sum()
        if s > total:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-15 * max(1.0, abs(hi)):
            break
    return np.clip(v - 0.5 * (lo + hi), 0.0, upper)


def classify_alpha(alpha: np.ndarray, spec: OcsvmSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Partition coordinates into (margin SV, bound SV, zero) index arrays."""
    scaled = alpha * (spec.nu * spec.n)
    margin = np.flatnonzero((scaled > MARGIN_TOL) & (scaled < 1.0 - MARGIN_TOL))
    bound = np.flatnonzero(scaled >= 1.0 - MARGIN_TOL)
    zero = np.flatnonzero(scaled <= MARGIN_TOL)
    return margin, bound, zero


def _solve_reduced_kkt(
    k_ff: np.ndarray, rhs_top: np.ndarray, mass: float
) -> tuple[np.ndarray, float, float, bool]:
    """Solve [[K_FF, -1], [1', 0]] [a_F; beta] = [rhs_top; mass].

    Returns (a_F, beta, condition number, used_tikhonov). The explicit
    condition number (an SVD) is only computed for small systems; large
    ones are judged by their solve residual instead.
    """
    f = k_ff.shape[0]
    a = np.zeros((f + 1, f + 1))
    a[:f, :f] = k_ff
    a[:f, f] = -1.0
    a[f, :f] = 1.0
    b = np.concatenate([rhs_top, [mass]])
    cond = float(np.linalg.cond(a)) if f <= 512 else -1.0
    tik = False
    if cond >= 0.0 and (not np.isfinite(cond) or cond > CONDITION_LIMIT):
        tik = True
    else:
        try:
            sol = np.linalg.solve(a, b)
        except np.linalg.LinAlgError:
            tik = True
        else:
            resid = float(np.abs(a @ sol - b).max()) / max(1.0, float(np.abs(b).max()))
            if resid > 1e-8 or not np.isfinite(resid):
                tik = True
    if tik:
        a[np.diag_indices(f + 1)] += TIKHONOV
        try:
            sol = np.linalg.solve(a, b)
        except np.linalg.LinAlgError as exc:
            raise NumericError(f"reduced KKT system singular (cond={cond:.3e})") from exc
    return sol[:f], float(sol[f]), cond, tik


def _spg(k: np.ndarray, upper: float, total: float, x0: np.ndarray, max_iter: int) -> tuple[np.ndarray, int, float]:
    """Spectral projected gradient for min (1/2) x'Kx over the feasible set.

    Barzilai-Borwein steps with a nonmonotone (10-step memory) Armijo line
    search; terminates on the projected-gradient fixed-point residual.
    """
    x = project_box_simplex(x0, upper, total)
    g = k @ x
    fx = 0.5 * float(x @ g)
    history = [fx]
    # Safe initial step from the average curvature.
    diag_mean = float(np.trace(k)) / k.shape[0]
    step = 1.0 / max(diag_mean * k.shape[0], 1e-12)
    it = 0
    gap = np.inf
    for it in range(1, max_iter + 1):
        gap = float(np.abs(x - project_box_simplex(x - g, upper, total)).max())
        if gap <= RESIDUAL_TOL:
            break
        d = project_box_simplex(x - step * g, upper, total) - x
        gd = float(g @ d)
        if gd >= 0.0:
            # Ascent direction from a bad BB step; reset to a short step.
            step = 1.0 / max(diag_mean * k.shape[0], 1e-12)
            d = project_box_simplex(x - step * g, upper, total) - x
            gd = float(g @ d)
            if gd >= -1e-18:
                break
        fmax = max(history[-10:])
        theta = 1.0
        kd = k @ d
        dkd = float(d @ kd)
        while True:
            fn = fx + theta * gd + 0.5 * theta * theta * dkd
            if fn <= fmax + 1e-4 * theta * gd or theta < 1e-12:
                break
            theta *= 0.5
        s = theta * d
        y = theta * kd
        x = x + s
        g = g + y
        fx = 0.5 * float(x @ g)
        history.append(fx)
        ss = float(s @ s)
        sy = float(s @ y)
        step = ss / sy if sy > 1e-18 else 1e4 * step
        step = float(np.clip(step, 1e-12, 1e12))
    return x, it, gap


def _polish(
    k: np.ndarray, x: np.ndarray, upper: float, total: float
) -> tuple[np.ndarray, int, bool]:
    """Active-set refinement: solve the margin set's KKT system exactly.

    Starting from the near-optimal SPG iterate, repeatedly (i) solve the
    equality-constrained problem on the current free set, (ii) demote free
    coordinates that left the box, (iii) promote the worst bound coordinate
    violating dual feasibility. Terminates at an exact KKT point or after a
    bounded number of migrations, whichever first.
    """
    n = k.shape[0]
    kkt_tol = 1e-11 * max(1.0, float(np.abs(k).max()) * total)
    band = MARGIN_TOL * upper
    free = (x > band) & (x < upper - band)
    degenerate = False
    best = x.copy()
    rounds = 0
    for rounds in range(1, 4 * n + 20):
        fidx = np.flatnonzero(free)
        uidx = np.flatnonzero(~free & (x >= upper - band))
        trial = np.zeros(n)
        trial[uidx] = upper
        mass = total - upper * len(uidx)
        if len(fidx) == 0:
            if abs(mass) > 1e-9 * max(1.0, total):
                # Inconsistent all-bound pattern; fall back to the iterate.
                return best, rounds, degenerate
            beta_lo = (k[uidx] @ trial).max() if len(uidx) else -np.inf
            x = trial
        else:
            rhs = -(k[np.ix_(fidx, uidx)] @ np.full(len(uidx), upper)) if len(uidx) else np.zeros(len(fidx))
            af, beta, cond, tik = _solve_reduced_kkt(k[np.ix_(fidx, fidx)], rhs, mass)
            degenerate = degenerate or tik
            viol_lo = af < -1e-13
            viol_hi = af > upper + 1e-13
            if viol_lo.any() or viol_hi.any():
                # Demote the worst box violator and re-solve.
                excess = np.maximum(-af, af - upper)
                worst = int(np.argmax(excess))
                free[fidx[worst]] = False
                x[fidx[worst]] = 0.0 if af[worst] < 0.0 else upper
                continue
            trial[fidx] = af
            x = trial
            beta_lo = beta
        g = k @ x
        lam = g - beta_lo
        promote = -np.inf
        cand = -1
        for i in range(n):
            if free[i]:
                continue
            if x[i] >= upper - band and lam[i] > kkt_tol and lam[i] > promote:
                promote, cand = lam[i], i
            elif x[i] <= band and -lam[i] > kkt_tol and -lam[i] > promote:
                promote, cand = -lam[i], i
        if cand < 0:
            return x, rounds, degenerate
        free[cand] = True
        best = x.copy()
    return best, rounds, degenerate


def solve_dual(k: np.ndarray, spec: OcsvmSpec, max_iter: int = 5000) -> OcsvmSolution:
    """Solve the dual QP for Gram matrix ``k`` (n x n, PSD, jitter included).

    Raises :class:`~ogae.errors.SolverError` carrying the last iterate and
    residual when the target accuracy is not reached within ``max_iter``
    projected-gradient iterations plus polishing.
    """
    k = np.asarray(k, dtype=np.float64)
    if k.ndim != 2 or k.shape[0] != k.shape[1]:
        raise ShapeError(f"Gram matrix must be square, got {k.shape}")
    n = k.shape[0]
    if n != spec.n:
        raise UsageError(f"spec.n={spec.n} does not match Gram size {n}")
    if not np.isfinite(k).all():
        raise NumericError("Gram matrix contains non-finite entries")

    if spec.scaled:
        upper, total = 1.0, spec.nu * n
    else:
        upper, total = spec.upper_bound, 1.0
    x0 = np.full(n, total / n)
    x, spg_iters, _ = _spg(k, upper, total, x0, max_iter)
    x, polish_rounds, degenerate = _polish(k, x, upper, total)
    g = k @ x
    gap = float(np.abs(x - project_box_simplex(x - g, upper, total)).max())
    # Report the residual on the scaled problem for comparability across nu.
    scale_to_alpha = 1.0 / (spec.nu * n) if spec.scaled else 1.0
    alpha = x * scale_to_alpha
    scaled_gap = gap if spec.scaled else gap * spec.nu * n
    iterations = spg_iters + polish_rounds
    if scaled_gap > 1e-7:
        raise SolverError(
            f"dual solve stalled: residual {scaled_gap:.3e} after {iterations} iterations",
            last_alpha=alpha,
            gap=scaled_gap,
            iterations=iterations,
        )
    margin, bound, zero = classify_alpha(alpha, spec)
    rho = recover_rho(k, alpha, spec)
    objective = 0.5 * float(alpha @ (k @ alpha))
    return OcsvmSolution(
        alpha=alpha,
        rho=rho,
        objective=objective,
        margin_sv_indices=margin,
        bound_sv_indices=bound,
        free_zero_indices=zero,
        iterations=iterations,
        primal_dual_gap=scaled_gap,
        nu=spec.nu,
        degenerate=degenerate,
    )


def recover_rho(k: np.ndarray, alpha: np.ndarray, spec: OcsvmSpec) -> float:
    """Offset rho: mean of (K a)_i over margin support vectors.

    With no margin SV (all weights at a bound), fall back to the smallest
    (K a)_i among support vectors, which keeps every in-support training
    point at f >= 0.
    """
    margin, _, _ = classify_alpha(alpha, spec)
    ka = k @ alpha
    if len(margin):
        return float(ka[margin].mean())
    support = np.flatnonzero(alpha > 0.0)
    if len(support) == 0:
        raise NumericError("no support vectors: alpha is identically zero")
    return float(ka[support].min())


def decision(
    sol: OcsvmSolution,
    z_train: np.ndarray,
    kspec: KernelSpec,
    z_query: np.ndarray,
    block: int = 4096,
) -> np.ndarray:
    """Decision values f(z) = Sum_j alpha_j k(z_j, z) - rho for query rows.

    Only support vectors (alpha > 0) enter the sum, so large training sets
    cost O(#SV) per query; computed in row blocks.
    """
    z_train = np.asarray(z_train, dtype=np.float64)
    z_query = np.asarray(z_query, dtype=np.float64)
    if z_query.ndim == 1:
        z_query = z_query[None, :]
    if z_train.ndim != 2 or z_train.shape[0] != sol.alpha.shape[0]:
        raise ShapeError(
            f"training latents {z_train.shape} inconsistent with alpha ({sol.alpha.shape[0]},)"
        )
    if z_train.shape[1] != z_query.shape[1]:
        raise ShapeError(f"latent dims differ: train {z_train.shape[1]}, query {z_query.shape[1]}")
    sv = np.flatnonzero(sol.alpha > 0.0)
    kq = cross_gram(z_query, z_train[sv], kspec, block=block)
    return kq @ sol.alpha[sv] - sol.rho


@dataclass
class ImplicitGrad:
    """d(loss)/dK from the implicit function theorem, with diagnostics."""

    d_k: np.ndarray
    condition_number: float = 0.0
    degenerate: bool = False


def implicit_grad(
    k: np.ndarray,
    sol: OcsvmSolution,
    g_alpha: np.ndarray | None,
    g_rho: float,
) -> ImplicitGrad:
    """Backpropagate through the solved QP to the Gram entries.

    Holding the active sets fixed, the margin block obeys the linear system
    K_FF a_F - rho 1 = -K_FU a_U, 1' a_F = const; differentiating it and
    the rho averaging formula rho = (1/|F|) Sum_{i in F} (K a)_i gives

        dL/dK_pq = (g_rho/|F| - u_p) * a_q    for p in F (else 0),

    where u solves the transposed reduced KKT system against the combined
    upstream gradient. Coordinates at bounds have locally constant a, so
    upstream gradient on them does not propagate. With an empty margin set
    a is locally constant everywhere and only rho's fallback formula
    (smallest support (K a)_i, argmin frozen) contributes.
    """
    n = k.shape[0]
    alpha = sol.alpha
    fidx = sol.margin_sv_indices
    d_k = np.zeros_like(k)
    if g_alpha is None:
        g_alpha = np.zeros(n)
    g_alpha = np.asarray(g_alpha, dtype=np.float64)

    if len(fidx) == 0:
        support = np.flatnonzero(alpha > 0.0)
        if g_rho != 0.0 and len(support):
            ka = k @ alpha
            istar = support[int(np.argmin(ka[support]))]
            d_k[istar, :] = g_rho * alpha
        return ImplicitGrad(d_k=d_k)

    f = len(fidx)
    k_ff = k[np.ix_(fidx, fidx)]
    # Chain rule of the averaging formula contributes through both the
    # explicit K dependence and the induced motion of a_F.
    g_tilde = g_alpha[fidx] + (g_rho / f) * k_ff.sum(axis=0)
    mt = np.zeros((f + 1, f + 1))
    mt[:f, :f] = k_ff
    mt[:f, f] = 1.0
    mt[f, :f] = -1.0
    cond = float(np.linalg.cond(mt))
    degenerate = False
    if not np.isfinite(cond) or cond > CONDITION_LIMIT:
        mt = mt + TIKHONOV * np.eye(f + 1)
        degenerate = True
    rhs = np.concatenate([g_tilde, [0.0]])
    try:
        uw = np.linalg.solve(mt, rhs)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"implicit-gradient KKT system singular (cond={cond:.3e})") from exc
    coef = (g_rho / f) - uw[:f]
    d_k[fidx, :] = np.outer(coef, alpha)
    return ImplicitGrad(d_k=d_k, condition_number=cond, degenerate=degenerate)
