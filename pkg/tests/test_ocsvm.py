"""Dual solver tests against brute-force enumeration and KKT facts."""

import numpy as np
import pytest

from ogae.errors import NumericError, ShapeError, UsageError
from ogae.kernels import KernelSpec, gram
from ogae.ocsvm import (
    OcsvmSolution,
    OcsvmSpec,
    classify_alpha,
    decision,
    implicit_grad,
    project_box_simplex,
    recover_rho,
    solve_dual,
)
from oracles import ocsvm_dual_bruteforce, rbf_kernel_loops


def random_instance(rng, n, gamma=0.5, jitter=1e-8):
    z = rng.normal(size=(n, 2))
    return gram(z, KernelSpec(gamma=gamma), jitter=jitter), z


class TestSpec:
    def test_upper_bound(self):
        spec = OcsvmSpec(nu=0.5, n=4)
        assert spec.upper_bound == 0.5

    @pytest.mark.parametrize("nu", [0.0, -0.1, 1.5])
    def test_bad_nu(self, nu):
        with pytest.raises(UsageError):
            OcsvmSpec(nu=nu, n=4)

    def test_bad_n(self):
        with pytest.raises(UsageError):
            OcsvmSpec(nu=0.5, n=0)


class TestProjection:
    def test_feasible_output(self, rng):
        for _ in range(50):
            v = rng.normal(size=8) * 3.0
            p = project_box_simplex(v, upper=0.4, total=1.0)
            assert p.sum() == pytest.approx(1.0, abs=1e-9)
            assert p.min() >= 0.0 and p.max() <= 0.4 + 1e-12

    def test_idempotent_on_feasible(self, rng):
        v = np.array([0.2, 0.3, 0.1, 0.4])
        p = project_box_simplex(v, upper=0.5, total=1.0)
        np.testing.assert_allclose(p, v, atol=1e-9)

    def test_is_nearest_point(self, rng):
        # Verify against a dense grid search on a 2-simplex slice.
        v = rng.normal(size=3)
        p = project_box_simplex(v, upper=0.8, total=1.0)
        best = None
        for a in np.linspace(0, 0.8, 81):
            for b in np.linspace(0, 0.8, 81):
                c = 1.0 - a - b
                if c < 0 or c > 0.8:
                    continue
                cand = np.array([a, b, c])
                d = np.sum((cand - v) ** 2)
                if best is None or d < best[0]:
                    best = (d, cand)
        assert np.sum((p - v) ** 2) <= best[0] + 1e-6

    def test_infeasible_target(self):
        with pytest.raises(UsageError):
            project_box_simplex(np.zeros(3), upper=0.1, total=1.0)


class TestSolveDualSmall:
    def test_n1_forced(self):
        k = np.array([[1.0 + 1e-8]])
        sol = solve_dual(k, OcsvmSpec(nu=0.5, n=1))
        np.testing.assert_allclose(sol.alpha, [1.0], atol=1e-12)
        assert sol.rho == pytest.approx(1.0 + 1e-8, abs=1e-12)
        # The single training point sits exactly on the boundary.
        z = np.zeros((1, 2))
        f = decision(sol, z, KernelSpec(gamma=0.5), z)
        assert abs(f[0]) <= 1e-6

    def test_square_symmetry(self):
        # Four corners of a square: by symmetry and convexity the uniform
        # weights are optimal, and rho is any (identical) row mean.
        z = np.array([[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]])
        k = gram(z, KernelSpec(gamma=0.3), jitter=1e-8)
        sol = solve_dual(k, OcsvmSpec(nu=0.5, n=4))
        np.testing.assert_allclose(sol.alpha, np.full(4, 0.25), atol=1e-8)
        assert sol.rho == pytest.approx(float(k[0] @ sol.alpha), abs=1e-8)
        alpha_bf, obj_bf = ocsvm_dual_bruteforce(k, 0.5)
        assert sol.objective == pytest.approx(obj_bf, abs=1e-9)

    @pytest.mark.parametrize("nu", [0.2, 0.5, 1.0])
    def test_objective_matches_bruteforce(self, rng, nu):
        for _ in range(25):
            n = int(rng.integers(2, 9))
            k, _ = random_instance(rng, n, gamma=float(rng.uniform(0.2, 1.5)))
            sol = solve_dual(k, OcsvmSpec(nu=nu, n=n))
            _, obj_bf = ocsvm_dual_bruteforce(k, nu)
            assert sol.objective == pytest.approx(obj_bf, abs=1e-6)

    def test_feasibility_invariants(self, rng):
        for _ in range(20):
            n = int(rng.integers(2, 12))
            nu = float(rng.uniform(0.15, 1.0))
            k, _ = random_instance(rng, n)
            spec = OcsvmSpec(nu=nu, n=n)
            sol = solve_dual(k, spec)
            assert abs(sol.alpha.sum() - 1.0) <= 1e-8
            assert sol.alpha.min() >= -1e-10
            assert sol.alpha.max() <= spec.upper_bound + 1e-10
            parts = np.concatenate(
                [sol.margin_sv_indices, sol.bound_sv_indices, sol.free_zero_indices]
            )
            assert sorted(parts.tolist()) == list(range(n))

    def test_margin_sv_on_boundary(self, rng):
        for seed in range(5):
            local = np.random.default_rng(seed)
            z = local.normal(size=(30, 2))
            k = gram(z, KernelSpec(gamma=0.5), jitter=1e-8)
            sol = solve_dual(k, OcsvmSpec(nu=0.3, n=30))
            f = decision(sol, z, KernelSpec(gamma=0.5), z)
            assert np.all(np.abs(f[sol.margin_sv_indices]) <= 1e-6)

    def test_nu_times_n_below_one(self, rng):
        # upper bound > 1 makes the box non-binding; still legal.
        k, _ = random_instance(rng, 3)
        sol = solve_dual(k, OcsvmSpec(nu=0.2, n=3))
        assert abs(sol.alpha.sum() - 1.0) <= 1e-8

    def test_scaled_unscaled_equivalence(self, rng):
        for _ in range(10):
            n = int(rng.integers(3, 15))
            nu = float(rng.uniform(0.2, 0.9))
            k, _ = random_instance(rng, n)
            a_scaled = solve_dual(k, OcsvmSpec(nu=nu, n=n, scaled=True)).alpha
            a_raw = solve_dual(k, OcsvmSpec(nu=nu, n=n, scaled=False)).alpha
            assert np.abs(a_scaled - a_raw).max() <= 1e-8

    def test_gap_reported_small(self, rng):
        k, _ = random_instance(rng, 20)
        sol = solve_dual(k, OcsvmSpec(nu=0.4, n=20))
        assert sol.primal_dual_gap <= 1e-7

    def test_shape_and_mismatch_errors(self, rng):
        with pytest.raises(ShapeError):
            solve_dual(np.zeros((3, 4)), OcsvmSpec(nu=0.5, n=3))
        with pytest.raises(UsageError):
            solve_dual(np.eye(3), OcsvmSpec(nu=0.5, n=4))
        with pytest.raises(NumericError):
            solve_dual(np.full((2, 2), np.nan), OcsvmSpec(nu=0.5, n=2))


class TestNuProperty:
    @pytest.mark.parametrize("n", [20, 50, 100])
    @pytest.mark.parametrize("nu", [0.1, 0.3, 0.5])
    def test_outlier_and_sv_fractions(self, n, nu):
        for seed in range(10):
            local = np.random.default_rng(1000 * n + seed)
            z = local.normal(size=(n, 2))
            k = gram(z, KernelSpec(gamma=0.5), jitter=1e-8)
            sol = solve_dual(k, OcsvmSpec(nu=nu, n=n))
            f = decision(sol, z, KernelSpec(gamma=0.5), z)
            outliers = int(np.sum(f < -1e-6))
            svs = int(np.sum(sol.alpha > 1e-9))
            assert outliers / n <= nu + 1.0 / n
            assert svs / n >= nu - 1.0 / n


class TestRecoverRho:
    def test_mean_over_margin(self, rng):
        k, _ = random_instance(rng, 12)
        spec = OcsvmSpec(nu=0.4, n=12)
        sol = solve_dual(k, spec)
        ka = k @ sol.alpha
        if len(sol.margin_sv_indices):
            assert sol.rho == pytest.approx(float(ka[sol.margin_sv_indices].mean()), abs=1e-12)

    def test_hand_mean(self):
        # Two margin SVs whose per-SV estimates are 0.80 and 0.82.
        k = np.array([[1.0, 0.6], [0.6, 1.0]])
        alpha = np.array([0.5, 0.5])
        ka = k @ alpha  # both 0.8; build an asymmetric variant explicitly
        k2 = np.array([[1.0, 0.60], [0.60, 1.04]])
        ka2 = k2 @ alpha
        assert ka2[0] == pytest.approx(0.80)
        assert ka2[1] == pytest.approx(0.82)
        spec = OcsvmSpec(nu=1.0, n=2)
        # nu=1 puts both at the bound, so force margin classification via
        # an interior nu instead.
        spec = OcsvmSpec(nu=0.8, n=2)
        assert recover_rho(k2, alpha, spec) == pytest.approx(0.81)
        del ka

    def test_fallback_min_over_support(self):
        # nu = 1 forces every weight to the bound: no margin SVs.
        local = np.random.default_rng(7)
        z = local.normal(size=(6, 2))
        k = gram(z, KernelSpec(gamma=0.5), jitter=1e-8)
        spec = OcsvmSpec(nu=1.0, n=6)
        sol = solve_dual(k, spec)
        assert len(sol.margin_sv_indices) == 0
        ka = k @ sol.alpha
        assert sol.rho == pytest.approx(float(ka.min()), abs=1e-12)
        # Every training point scores f >= 0 under the fallback.
        f = decision(sol, z, KernelSpec(gamma=0.5), z)
        assert np.all(f >= -1e-8)

    def test_all_zero_alpha_rejected(self):
        with pytest.raises(NumericError):
            recover_rho(np.eye(3), np.zeros(3), OcsvmSpec(nu=0.5, n=3))


class TestDecision:
    def test_far_query_approaches_minus_rho(self, rng):
        k, z = random_instance(rng, 15)
        sol = solve_dual(k, OcsvmSpec(nu=0.3, n=15))
        far = np.array([[500.0, -500.0]])
        f = decision(sol, z, KernelSpec(gamma=0.5), far)
        assert f[0] == pytest.approx(-sol.rho, abs=1e-12)
        assert sol.rho > 0.0

    def test_sv_only_evaluation_matches_full(self, rng):
        k, z = random_instance(rng, 40)
        sol = solve_dual(k, OcsvmSpec(nu=0.2, n=40))
        assert len(sol.free_zero_indices) > 0
        q = rng.normal(size=(7, 2))
        f = decision(sol, z, KernelSpec(gamma=0.5), q)
        full = rbf_kernel_loops(q, z, 0.5) @ sol.alpha - sol.rho
        np.testing.assert_allclose(f, full, atol=1e-10)

    def test_dim_mismatch(self, rng):
        k, z = random_instance(rng, 5)
        sol = solve_dual(k, OcsvmSpec(nu=0.5, n=5))
        with pytest.raises(ShapeError):
            decision(sol, z, KernelSpec(gamma=0.5), np.zeros((2, 3)))

    def test_solution_round_trip(self, rng):
        k, _ = random_instance(rng, 6)
        sol = solve_dual(k, OcsvmSpec(nu=0.5, n=6))
        back = OcsvmSolution.from_dict(sol.to_dict())
        np.testing.assert_array_equal(back.alpha, sol.alpha)
        assert back.rho == sol.rho
        assert back.nu == sol.nu


def fd_resolve_grad(k, nu, functional, h=1e-6):
    """Finite-difference gradient of functional(alpha, rho) by re-solving.

    Perturbs K symmetrically (both (p,q) and (q,p)), so entries p != q of
    the returned matrix carry the combined sensitivity; compare against
    g[p,q] + g[q,p] of the analytic per-entry gradient.
    """
    n = k.shape[0]
    spec = OcsvmSpec(nu=nu, n=n)
    out = np.zeros_like(k)
    for p in range(n):
        for q in range(p, n):
            kp = k.copy()
            kp[p, q] += h
            if q != p:
                kp[q, p] += h
            sp = solve_dual(kp, spec)
            km = k.copy()
            km[p, q] -= h
            if q != p:
                km[q, p] -= h
            sm = solve_dual(km, spec)
            out[p, q] = (functional(sp.alpha, sp.rho) - functional(sm.alpha, sm.rho)) / (2 * h)
            out[q, p] = out[p, q]
    return out


def symmetrized(d_k):
    """Fold the per-entry gradient to symmetric-perturbation form."""
    off = d_k + d_k.T
    np.fill_diagonal(off, np.diag(d_k))
    return off


class TestImplicitGrad:
    def test_n1_trivial(self):
        k = np.array([[1.0]])
        sol = solve_dual(k, OcsvmSpec(nu=0.5, n=1))
        g = implicit_grad(k, sol, g_alpha=np.array([3.0]), g_rho=2.0)
        # alpha is pinned by the constraint, so only rho contributes.
        assert g.d_k[0, 0] == pytest.approx(2.0, abs=1e-12)

    def test_matches_fd_resolve(self):
        hits = 0
        for seed in range(12):
            local = np.random.default_rng(seed)
            z = local.normal(size=(6, 2))
            k = gram(z, KernelSpec(gamma=0.5), jitter=1e-8)
            spec = OcsvmSpec(nu=0.5, n=6)
            sol = solve_dual(k, spec)
            if len(sol.margin_sv_indices) < 2:
                continue
            w = np.random.default_rng(100 + seed).normal(size=6)

            def functional(alpha, rho, w=w):
                return float(w @ alpha) + 0.7 * rho

            fd = fd_resolve_grad(k, 0.5, functional)
            an = implicit_grad(k, sol, g_alpha=w, g_rho=0.7)
            sym = symmetrized(an.d_k)
            denom = max(np.abs(fd).max(), 1e-10)
            if np.abs(sym - fd).max() / denom <= 1e-3:
                hits += 1
            else:
                # Active-set changes within the FD step are the only
                # legitimate reason for disagreement.
                assert _active_set_fragile(k, 0.5), (
                    f"gradient mismatch on stable instance (seed {seed})"
                )
        assert hits >= 6

    def test_linearity_of_upstream(self, rng):
        # The (g_alpha, g_rho) -> dK map must be additive, because the
        # guided loss backpropagates alpha and rho adjoints separately.
        k, _ = random_instance(rng, 8)
        sol = solve_dual(k, OcsvmSpec(nu=0.5, n=8))
        ga = rng.normal(size=8)
        both = implicit_grad(k, sol, g_alpha=ga, g_rho=1.3).d_k
        only_a = implicit_grad(k, sol, g_alpha=ga, g_rho=0.0).d_k
        only_r = implicit_grad(k, sol, g_alpha=None, g_rho=1.3).d_k
        np.testing.assert_allclose(both, only_a + only_r, atol=1e-12)

    def test_symmetric_instance_equivariance(self):
        z = np.array([[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]])
        k = gram(z, KernelSpec(gamma=0.3), jitter=1e-8)
        sol = solve_dual(k, OcsvmSpec(nu=0.5, n=4))
        g = implicit_grad(k, sol, g_alpha=np.ones(4), g_rho=1.0)
        # The symmetry group of the square permutes the four points; the
        # gradient must be constant on entry orbits (diagonal, edges,
        # diagonals of the square).
        d = g.d_k
        assert np.allclose(np.diag(d), np.diag(d)[0], atol=1e-9)
        edge = [d[0, 1], d[0, 2], d[3, 1], d[3, 2]]
        assert np.allclose(edge, edge[0], atol=1e-9)

    def test_rows_outside_margin_are_zero(self, rng):
        k, _ = random_instance(rng, 20)
        sol = solve_dual(k, OcsvmSpec(nu=0.3, n=20))
        g = implicit_grad(k, sol, g_alpha=rng.normal(size=20), g_rho=0.5)
        outside = np.concatenate([sol.bound_sv_indices, sol.free_zero_indices])
        assert np.all(g.d_k[outside, :] == 0.0)

    def test_empty_margin_rho_path(self):
        local = np.random.default_rng(3)
        z = local.normal(size=(5, 2))
        k = gram(z, KernelSpec(gamma=0.5), jitter=1e-8)
        spec = OcsvmSpec(nu=1.0, n=5)
        sol = solve_dual(k, spec)
        assert len(sol.margin_sv_indices) == 0
        g = implicit_grad(k, sol, g_alpha=np.ones(5), g_rho=2.0)
        ka = k @ sol.alpha
        istar = int(np.argmin(ka))
        expect = np.zeros_like(k)
        expect[istar, :] = 2.0 * sol.alpha
        np.testing.assert_allclose(g.d_k, expect, atol=1e-12)


def _active_set_fragile(k, nu, h=1e-6, probes=6):
    """True if tiny symmetric perturbations of K change the margin set."""
    spec = OcsvmSpec(nu=nu, n=k.shape[0])
    base = set(solve_dual(k, spec).margin_sv_indices.tolist())
    local = np.random.default_rng(0)
    for _ in range(probes):
        e = local.normal(size=k.shape)
        e = (e + e.T) / 2.0
        pert = solve_dual(k + h * e, spec)
        if set(pert.margin_sv_indices.tolist()) != base:
            return True
    return False
