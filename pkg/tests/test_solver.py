"""Assembly oracles, march correctness, duality, and energy functionals."""

import math

import numpy as np
import pytest

import greenlab.solver as solver_mod
from greenlab.fields import build_coefficients
from greenlab.grid import build_grid
from greenlab.solver import (DiscreteSolution, NumericalAbort, StepSolver,
                             assemble_operator, embedding_ratio, energy_norm,
                             gradient_stiffness, march, solve_adjoint,
                             solve_cauchy, verify_energy_inequality)


def heat_field(n=1, nu=0.5, scale=1.0):
    return build_coefficients({"a": {"kind": "identity", "scale": scale},
                               "nu": nu, "theta": 0.0, "p": "inf", "q": 2.0}, n)


# -- assembly oracles --------------------------------------------------------

def test_assembly_1d_laplacian():
    # A = I, rest zero: interior matrix is (1/h) tridiag(-1, 2, -1)
    g = build_grid(1, [(0.0, 1.0)], 5, 0.0, 1.0, 0.5)
    B = assemble_operator(heat_field(), g, 0.0).toarray()
    h = 0.2
    oracle = (np.diag([2.0] * 4) + np.diag([-1.0] * 3, 1) + np.diag([-1.0] * 3, -1)) / h
    assert np.allclose(B, oracle, atol=1e-13)


def test_assembly_1d_mass():
    # A = 0, d = 1: interior matrix is tridiag(h/6, 2h/3, h/6)
    g = build_grid(1, [(0.0, 1.0)], 5, 0.0, 1.0, 0.5)
    f = build_coefficients({"a": {"kind": "const", "entries": [[0.0]]},
                            "d": {"kind": "const", "value": 1.0},
                            "nu": 0.5, "theta": 0.0, "p": 3.0, "q": 3.0}, 1)
    B = assemble_operator(f, g, 0.0).toarray()
    h = 0.2
    oracle = (np.diag([2 * h / 3] * 4) + np.diag([h / 6] * 3, 1)
              + np.diag([h / 6] * 3, -1))
    assert np.allclose(B, oracle, atol=1e-15)


def test_assembly_1d_drift_antisymmetric():
    # A = 0, b = beta: int b phi_j phi_i' gives the centered antisymmetric
    # tridiag(+beta/2, 0, -beta/2); c = beta gives its transpose
    g = build_grid(1, [(0.0, 1.0)], 5, 0.0, 1.0, 0.5)
    beta = 0.7
    base = {"a": {"kind": "const", "entries": [[0.0]]},
            "nu": 0.5, "theta": 1.0, "p": 3.0, "q": 3.0}
    fb = build_coefficients({**base, "b": {"kind": "const", "value": [beta]}}, 1)
    Bb = assemble_operator(fb, g, 0.0).toarray()
    oracle = np.diag([-beta / 2] * 3, 1) + np.diag([beta / 2] * 3, -1)
    assert np.allclose(Bb, oracle, atol=1e-14)
    fc = build_coefficients({**base, "c": {"kind": "const", "value": [beta]}}, 1)
    Bc = assemble_operator(fc, g, 0.0).toarray()
    assert np.allclose(Bc, oracle.T, atol=1e-14)
    assert np.allclose(Bb, -Bb.T, atol=1e-14)


def test_assembly_2d_laplacian_stencil():
    # 2-D tensor Laplacian on a square grid: diagonal 8/3, edge -1/3,
    # corner -1/3 for h = hx = hy (Q1 stencil)
    m = 4
    g = build_grid(2, [(0.0, 1.0), (0.0, 1.0)], (m, m), 0.0, 1.0, 0.5)
    B = assemble_operator(heat_field(2), g, 0.0).toarray()
    h = 1.0 / m
    # oracle by kron of exact 1-D matrices: K (x) M + M (x) K on interior
    K1 = (np.diag([2.0] * 3) + np.diag([-1.0] * 2, 1) + np.diag([-1.0] * 2, -1)) / h
    M1 = (np.diag([2 * h / 3] * 3) + np.diag([h / 6] * 2, 1) + np.diag([h / 6] * 2, -1))
    oracle = np.kron(K1, M1) + np.kron(M1, K1)
    assert np.allclose(B, oracle, atol=1e-13)


def test_assembly_transpose_swaps_b_and_c():
    # B(a, b, c, d)^T = B(a^T, c, b, d): the adjoint operator's matrix
    g = build_grid(2, [(0.0, 1.0), (0.0, 1.0)], (5, 4), 0.0, 1.0, 0.5)
    base = {"nu": 0.3, "theta": 5.0, "p": 4.0, "q": 4.0,
            "a": {"kind": "const", "entries": [[1.0, 0.3], [-0.1, 0.8]]},
            "b": {"kind": "const", "value": [0.4, -0.2]},
            "c": {"kind": "const", "value": [-0.1, 0.6]},
            "d": {"kind": "const", "value": 0.5}}
    f = build_coefficients(base, 2)
    swapped = dict(base)
    swapped["a"] = {"kind": "const", "entries": np.array(base["a"]["entries"]).T.tolist()}
    swapped["b"], swapped["c"] = base["c"], base["b"]
    f_adj = build_coefficients(swapped, 2)
    B = assemble_operator(f, g, 0.0)
    B_adj = assemble_operator(f_adj, g, 0.0)
    assert np.allclose(B.T.toarray(), B_adj.toarray(), atol=1e-14)


def test_gradient_stiffness_matches_identity_assembly():
    g = build_grid(2, [(0.0, 2.0), (0.0, 1.0)], (6, 5), 0.0, 1.0, 0.5)
    S = gradient_stiffness(g).toarray()
    B = assemble_operator(heat_field(2), g, 0.0).toarray()
    assert np.allclose(S, B, atol=1e-14)
    # exact Dirichlet energy of a hat: u = e_i has int |grad u|^2 = S[i,i]
    v = np.zeros(g.num_interior)
    v[0] = 1.0
    assert v @ S @ v == pytest.approx(S[0, 0])


# -- marches -----------------------------------------------------------------

def test_zero_data_stays_zero():
    g = build_grid(1, [(0.0, 1.0)], 16, 0.0, 0.5, 0.05)
    sol = solve_cauchy(heat_field(), g, None)
    assert np.all(sol.values == 0.0)


def test_heat_march_matches_analytic_kernel():
    # initial = heat kernel at t0, exact solution is the kernel at t0 + t
    t0 = 0.05
    g = build_grid(1, [(-8.0, 8.0)], 256, 0.0, 0.2, 1e-3)
    x = g.interior_coords()[:, 0]

    def kernel(tau):
        return np.exp(-x ** 2 / (4 * tau)) / math.sqrt(4 * math.pi * tau)

    sol = solve_cauchy(heat_field(), g, kernel(t0))
    for k in (100, 200):
        exact = kernel(t0 + k * g.dt)
        err = np.max(np.abs(sol.value_at(k) - exact)) / np.max(exact)
        assert err < 0.03, f"step {k}: rel err {err:.4f}"


def test_time_convergence_first_order():
    # manufactured: u = sin(pi x) e^(-pi^2 t) on (0,1), fine spatial grid
    errs = []
    for steps in (10, 20, 40):
        g = build_grid(1, [(0.0, 1.0)], 200, 0.0, 0.1, 0.1 / steps)
        x = g.interior_coords()[:, 0]
        sol = solve_cauchy(heat_field(), g, np.sin(np.pi * x))
        exact = np.sin(np.pi * x) * math.exp(-math.pi ** 2 * 0.1)
        errs.append(np.max(np.abs(sol.value_at(g.num_steps) - exact)))
    order = math.log2(errs[0] / errs[2]) / 2
    assert 0.7 < order < 1.3, f"dt order {order:.2f}"


def test_space_convergence_second_order():
    errs = []
    for m in (8, 16, 32):
        g = build_grid(1, [(0.0, 1.0)], m, 0.0, 0.05, 1e-4)
        x = g.interior_coords()[:, 0]
        sol = solve_cauchy(heat_field(), g, np.sin(np.pi * x))
        exact = np.sin(np.pi * x) * math.exp(-math.pi ** 2 * 0.05)
        errs.append(np.max(np.abs(sol.value_at(g.num_steps) - exact)))
    order = math.log2(errs[0] / errs[2]) / 2
    assert 1.6 < order < 2.4, f"h order {order:.2f}"


def test_mass_conserved_away_from_boundary():
    # divergence-form operator with b=c=d=0 conserves total mass until the
    # support reaches the boundary (box wide enough that the Gaussian tail
    # stays below machine precision over the window checked)
    g = build_grid(1, [(-8.0, 8.0)], 128, 0.0, 0.3, 5e-3)
    x = g.interior_coords()[:, 0]
    sol = solve_cauchy(heat_field(), g, np.exp(-x ** 2))
    m = sol.mass_history
    assert np.max(np.abs(m[:40] - m[0])) <= 1e-12 * abs(m[0])


def test_march_first_step_offset_and_value_at():
    g = build_grid(1, [(0.0, 1.0)], 8, 0.0, 1.0, 0.125)
    u0 = np.ones(g.num_interior)
    sol = march(heat_field(), g, u0, first_step=4)
    assert sol.first_step == 4 and sol.last_step == 8
    assert np.allclose(sol.value_at(4), u0)
    assert np.all(sol.value_at(3) == 0.0)
    assert np.all(sol.value_at(9) == 0.0)
    assert len(sol.step_times()) == 5


def test_backward_march_mirrors_forward_for_self_adjoint():
    # autonomous symmetric operator: adjoint from terminal g reproduces the
    # forward solution reflected in time, step for step
    g = build_grid(1, [(0.0, 1.0)], 32, 0.0, 0.25, 0.025)
    x = g.interior_coords()[:, 0]
    data = np.sin(2 * np.pi * x) + 0.3 * np.sin(np.pi * x)
    fwd = solve_cauchy(heat_field(), g, data)
    bwd = solve_adjoint(heat_field(), g, data)
    K = g.num_steps
    for k in range(K + 1):
        assert np.allclose(bwd.value_at(k), fwd.value_at(K - k), atol=1e-13)


def test_duality_pairing_exact_nonsymmetric_time_dependent():
    # <u(T), g> = <psi0, v(0)> at solver precision, for a full coefficient
    # set with non-symmetric A and time-dependent d
    n = 2
    g = build_grid(2, [(0.0, 1.0), (0.0, 1.0)], (12, 11), 0.0, 0.1, 0.01)
    f = build_coefficients({
        "a": {"kind": "const", "entries": [[1.0, 0.3], [0.1, 0.9]]},
        "b": {"kind": "const", "value": [0.5, -0.2]},
        "c": {"kind": "grad_bump", "center": [0.5, 0.5], "width": 0.4,
              "amplitude": 0.3},
        "d": {"kind": "poly", "terms": [{"coef": 1.0, "powers": [1, 0, 0]}]},
        "nu": 0.4, "theta": 2.0, "p": 4.0, "q": 4.0}, n)
    rng = np.random.default_rng(3)
    psi0 = rng.standard_normal(g.num_interior)
    gterm = rng.standard_normal(g.num_interior)
    fwd = solve_cauchy(f, g, psi0)
    bwd = solve_adjoint(f, g, gterm)
    vol = g.cell_volume
    lhs = vol * float(fwd.value_at(g.num_steps) @ gterm)
    rhs = vol * float(psi0 @ bwd.value_at(0))
    assert lhs == pytest.approx(rhs, rel=1e-11)


def test_march_multi_column():
    g = build_grid(1, [(0.0, 1.0)], 16, 0.0, 0.2, 0.02)
    rng = np.random.default_rng(0)
    U0 = rng.standard_normal((g.num_interior, 3))
    multi = march(heat_field(), g, U0)
    for j in range(3):
        single = march(heat_field(), g, U0[:, j])
        assert np.allclose(multi.values[:, :, j], single.values, atol=1e-13)


def test_numerical_abort_on_blowup():
    # strongly negative d drives exponential growth past float range; the
    # march must raise instead of returning non-finite values
    g = build_grid(1, [(0.0, 1.0)], 8, 0.0, 200.0, 0.1)
    f = build_coefficients({"d": {"kind": "const", "value": -15.0},
                            "nu": 0.5, "theta": 0.0, "p": 3.0, "q": 3.0}, 1)
    with pytest.raises(NumericalAbort):
        solve_cauchy(f, g, np.ones(g.num_interior))


def test_rejects_bad_initial_shape():
    g = build_grid(1, [(0.0, 1.0)], 8, 0.0, 1.0, 0.25)
    with pytest.raises(ValueError):
        solve_cauchy(heat_field(), g, np.ones(3))


# -- energy functionals ------------------------------------------------------

def test_energy_norm_heat_ratio():
    # pure heat march: sup ||u(t)|| = ||psi0|| and the backward Euler energy
    # identity keeps ||grad u||_{L2}^2 <= ||psi0||^2 / 2, so the energy ratio
    # stays below 1 + 1/sqrt(2)
    g = build_grid(1, [(0.0, 1.0)], 64, 0.0, 0.5, 5e-3)
    x = g.interior_coords()[:, 0]
    sol = solve_cauchy(heat_field(), g, np.sin(np.pi * x))
    check = verify_energy_inequality(sol)
    assert check.source_norm == 0.0
    assert check.ratio <= 1.0 + 1.0 / math.sqrt(2.0) + 1e-12
    assert check.ratio > 0.9


def test_energy_l2_history_non_increasing_for_heat():
    g = build_grid(1, [(0.0, 1.0)], 64, 0.0, 0.5, 5e-3)
    x = g.interior_coords()[:, 0]
    sol = solve_cauchy(heat_field(), g, np.sin(3 * np.pi * x))
    hist = sol.l2_history()
    assert np.all(np.diff(hist) <= 1e-14)


def test_energy_with_source_norm():
    # f = 1 on the unit box: ||f||_{L_rho} = (T * |Omega|)^(1/rho)
    g = build_grid(1, [(0.0, 1.0)], 32, 0.0, 0.25, 0.025)
    sol = solve_cauchy(heat_field(), g, None,
                       source={"kind": "const", "value": 1.0})
    check = verify_energy_inequality(sol)
    rho = 6.0 / 5.0
    # nodal rectangle rule: interior nodes only, marched steps only
    oracle = (31 * g.h[0] * 10 * g.dt) ** (1.0 / rho)
    assert check.source_norm == pytest.approx(oracle, rel=1e-12)
    assert math.isfinite(check.ratio) and check.ratio > 0


def test_embedding_ratio_finite_and_stable():
    vals = []
    for m in (32, 64):
        g = build_grid(1, [(0.0, 1.0)], m, 0.0, 0.25, 0.25 / (2 * m))
        x = g.interior_coords()[:, 0]
        sol = solve_cauchy(heat_field(), g, np.sin(np.pi * x))
        vals.append(embedding_ratio(sol))
    assert all(0.05 < v < 5.0 for v in vals)
    assert abs(vals[1] - vals[0]) / vals[0] < 0.1


# -- linear solver branches --------------------------------------------------

def test_step_solver_amg_matches_lu(monkeypatch):
    g = build_grid(2, [(0.0, 1.0), (0.0, 1.0)], (20, 20), 0.0, 1.0, 0.1)
    import scipy.sparse as sp
    B = assemble_operator(heat_field(2), g, 0.0)
    M = (sp.identity(g.num_interior, format="csr") * g.cell_volume + 0.01 * B)
    rhs = np.random.default_rng(1).standard_normal(g.num_interior)
    direct = StepSolver(M).solve(rhs)
    monkeypatch.setattr(solver_mod, "DIRECT_LIMIT", 10)
    iterative = StepSolver(M, rtol=1e-12).solve(rhs)
    assert np.linalg.norm(direct - iterative) <= 1e-8 * np.linalg.norm(direct)
