"""Multilinear finite elements and implicit Euler marches.

The spatial operator is discretized with tensor-product hat functions on the
uniform grid, coefficients frozen at cell centers, all basis integrals exact
per cell.  Assembly produces the interior-node matrix B with

    B[i, j] = int ( A grad phi_j . grad phi_i + (b phi_j) . grad phi_i
                    + (c . grad phi_j) phi_i + d phi_j phi_i )

and time stepping is implicit Euler against the lumped (diagonal) mass
cellvol * I:

    (cellvol I + dt B(t_{k+1})) u_{k+1} = cellvol (u_k + dt f(t_{k+1})).

Lumping keeps the adjoint march the literal transpose of the forward one, so
duality identities hold at linear-solver precision.  Homogeneous Dirichlet
data on the lateral boundary is built in by restricting to interior nodes.

Linear systems go through sparse LU up to 1e5 unknowns and smoothed
aggregation AMG (CG for symmetric matrices, BiCGStab otherwise) past that.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field
from functools import lru_cache

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .fields import CoefficientField
from .grid import SpaceTimeGrid

DIRECT_LIMIT = 100_000


class NumericalAbort(RuntimeError):
    """A march produced non-finite values or a linear solve failed."""


# ---------------------------------------------------------------------------
# local element matrices
# ---------------------------------------------------------------------------

def _axis_primitives(h: float):
    """Exact 1-D integrals of the two hats on a cell [0, h].

    K[p, r] = int phi_p' phi_r',  M[p, r] = int phi_p phi_r,
    G[p, r] = int phi_p' phi_r   (derivative on the first index).
    """
    K = np.array([[1.0, -1.0], [-1.0, 1.0]]) / h
    M = h * np.array([[1.0 / 3.0, 1.0 / 6.0], [1.0 / 6.0, 1.0 / 3.0]])
    G = np.array([[-0.5, -0.5], [0.5, 0.5]])
    return K, M, G


def _kron_chain(mats):
    out = mats[0]
    for m in mats[1:]:
        out = np.kron(out, m)
    return out


@lru_cache(maxsize=32)
def _element_tables(h: tuple[float, ...]):
    """Constant local matrices for a cell with spacings h.

    Returns (stiff[i][j], conv_b[i], conv_c[i], mass) as (2^n x 2^n) arrays
    indexed [test, trial].  stiff[i][j] integrates d_j(trial) d_i(test),
    conv_b[i] integrates trial * d_i(test), conv_c[i] d_i(trial) * test.
    """
    n = len(h)
    prim = [_axis_primitives(ha) for ha in h]

    def factors(i, j):
        mats = []
        for a in range(n):
            K, M, G = prim[a]
            if a == i == j:
                mats.append(K)
            elif a == j:            # derivative on the trial side
                mats.append(G.T)    # [test, trial] = int phi'_trial phi_test
            elif a == i:            # derivative on the test side
                mats.append(G)      # [test, trial] = int phi'_test phi_trial
            else:
                mats.append(M)
        return _kron_chain(mats)

    stiff = [[factors(i, j) for j in range(n)] for i in range(n)]
    conv_b = [factors(i, None) for i in range(n)]
    conv_c = [factors(None, j) for j in range(n)]
    mass = _kron_chain([prim[a][1] for a in range(n)])
    return stiff, conv_b, conv_c, mass


@lru_cache(maxsize=16)
def _scatter_tables(grid: SpaceTimeGrid):
    """Cell-to-node index table and the interior renumbering."""
    n = grid.n
    cell_idx = np.meshgrid(*[np.arange(m) for m in grid.cells], indexing="ij")
    cell_idx = np.stack([c.ravel() for c in cell_idx], axis=-1)  # (ncells, n)
    corners = []
    for bits in range(2 ** n):
        off = np.array([(bits >> a) & 1 for a in range(n)])
        corners.append(np.ravel_multi_index((cell_idx + off).T, grid.shape))
    node_table = np.stack(corners, axis=-1)  # (ncells, 2^n)
    return node_table, grid.full_to_interior()


def _assemble_from_values(grid: SpaceTimeGrid, A_vals, b_vals, c_vals, d_vals) -> sp.csr_matrix:
    """Assemble the interior operator from coefficient values at cell centers."""
    n = grid.n
    stiff, conv_b, conv_c, mass = _element_tables(grid.h)
    node_table, to_interior = _scatter_tables(grid)
    ncells = grid.num_cells
    nloc = 2 ** n

    local = np.zeros((ncells, nloc, nloc))
    for i in range(n):
        for j in range(n):
            entries = A_vals[:, i, j]
            if np.any(entries):
                local += entries[:, None, None] * stiff[i][j]
    for i in range(n):
        if b_vals is not None and np.any(b_vals[:, i]):
            local += b_vals[:, i][:, None, None] * conv_b[i]
        if c_vals is not None and np.any(c_vals[:, i]):
            local += c_vals[:, i][:, None, None] * conv_c[i]
    if d_vals is not None and np.any(d_vals):
        local += d_vals[:, None, None] * mass

    rows = np.broadcast_to(node_table[:, :, None], (ncells, nloc, nloc))
    cols = np.broadcast_to(node_table[:, None, :], (ncells, nloc, nloc))
    ri = to_interior[rows.ravel()]
    ci = to_interior[cols.ravel()]
    keep = (ri >= 0) & (ci >= 0)
    mat = sp.coo_matrix(
        (local.ravel()[keep], (ri[keep], ci[keep])),
        shape=(grid.num_interior, grid.num_interior))
    return mat.tocsr()


def assemble_operator(field: CoefficientField, grid: SpaceTimeGrid, t: float) -> sp.csr_matrix:
    """Interior-node spatial operator matrix at time t."""
    if field.n != grid.n:
        raise ValueError(f"field dimension {field.n} != grid dimension {grid.n}")
    centers = grid.cell_centers()
    A_vals = field.a(t, centers)
    b_vals = field.b(t, centers)
    c_vals = field.c(t, centers)
    d_vals = field.d(t, centers)
    return _assemble_from_values(grid, A_vals, b_vals, c_vals, d_vals)


def gradient_stiffness(grid: SpaceTimeGrid) -> sp.csr_matrix:
    """Unit stiffness S with u^T S u = int |grad u_h|^2, for energy norms."""
    centers = grid.cell_centers()
    eye = np.broadcast_to(np.eye(grid.n), (len(centers), grid.n, grid.n))
    return _assemble_from_values(grid, eye, None, None, None)


# ---------------------------------------------------------------------------
# linear solves
# ---------------------------------------------------------------------------

class StepSolver:
    """Solves (cellvol I + dt B) x = rhs, choosing direct or AMG by size."""

    def __init__(self, matrix: sp.csr_matrix, rtol: float = 1e-10):
        self.matrix = matrix.tocsr()
        self.rtol = rtol
        self.n = matrix.shape[0]
        if self.n <= DIRECT_LIMIT:
            self._lu = spla.splu(self.matrix.tocsc())
            self._ml = None
        else:
            import pyamg
            asym = abs(self.matrix - self.matrix.T)
            symmetric = asym.max() <= 1e-12 * abs(self.matrix).max() if asym.nnz else True
            kind = "symmetric" if symmetric else "nonsymmetric"
            self._ml = pyamg.smoothed_aggregation_solver(self.matrix, symmetry=kind)
            self._accel = "cg" if symmetric else "bicgstab"
            self._lu = None

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        if self._lu is not None:
            return self._lu.solve(rhs)
        if rhs.ndim == 1:
            cols = [rhs]
        else:
            cols = [rhs[:, j] for j in range(rhs.shape[1])]
        outs = []
        for b in cols:
            scale = np.linalg.norm(b)
            if scale == 0.0:
                outs.append(np.zeros_like(b))
                continue
            x = self._ml.solve(b, tol=self.rtol, accel=self._accel, maxiter=400)
            res = np.linalg.norm(self.matrix @ x - b)
            if not res <= 10.0 * self.rtol * scale:
                raise NumericalAbort(
                    f"iterative solve stalled (residual {res:.3e}, rhs {scale:.3e})")
            outs.append(x)
        return outs[0] if rhs.ndim == 1 else np.stack(outs, axis=1)


# ---------------------------------------------------------------------------
# marches
# ---------------------------------------------------------------------------

@dataclass
class DiscreteSolution:
    """Nodal history of a march.

    values[k] holds the interior nodal values at time t_k for every step index
    k in [first_step, last_step]; a forward march fills k = first..num_steps,
    a backward one k = 0..first-ish range in reverse.  Use value_at/full_at to
    query by global step index.
    """

    grid: SpaceTimeGrid
    direction: str
    first_step: int
    values: np.ndarray
    initial_values: np.ndarray
    source_fn: object = None
    mass_history: np.ndarray | None = None

    @property
    def last_step(self) -> int:
        return self.first_step + len(self.values) - 1

    def step_times(self) -> np.ndarray:
        return self.grid.times()[self.first_step:self.last_step + 1]

    def value_at(self, k: int) -> np.ndarray:
        """Interior values at global step k (zero outside the stored range)."""
        if self.first_step <= k <= self.last_step:
            return np.asarray(self.values[k - self.first_step], dtype=float)
        return np.zeros(self.grid.num_interior)

    def full_at(self, k: int) -> np.ndarray:
        return self.grid.embed_interior(self.value_at(k))

    def l2_history(self) -> np.ndarray:
        vol = self.grid.cell_volume
        v = self.values.astype(float, copy=False)
        return np.sqrt(vol * np.sum(v * v, axis=1))


def _as_space_values(grid: SpaceTimeGrid, data) -> np.ndarray:
    """Interior nodal values from an array, a callable, or a scalar expression."""
    if data is None:
        return np.zeros(grid.num_interior)
    if isinstance(data, np.ndarray):
        if data.shape[0] != grid.num_interior:
            raise ValueError(
                f"nodal data has {data.shape[0]} rows, expected {grid.num_interior}")
        return data.astype(float)
    if isinstance(data, dict):
        from .fields import build_scalar
        sampler = build_scalar(data, grid.n)
        return np.asarray(sampler(grid.t_start, grid.interior_coords()), dtype=float)
    return np.asarray(data(grid.interior_coords()), dtype=float)


def _as_spacetime_fn(grid: SpaceTimeGrid, data):
    """(t, X) -> values callable from None, a callable, or a scalar expression."""
    if data is None:
        return None
    if isinstance(data, dict):
        from .fields import build_scalar
        sampler = build_scalar(data, grid.n)
        return lambda t, X: np.asarray(sampler(t, X), dtype=float)
    return data


def march(field: CoefficientField, grid: SpaceTimeGrid, initial, source=None, *,
          direction: str = "forward", transpose: bool = False,
          first_step: int | None = None, rtol: float = 1e-10,
          store_dtype=np.float64, source_steps=None) -> DiscreteSolution:
    """Implicit Euler march of the interior system.

    Parameters
    ----------
    initial : nodal array (num_interior,) or (num_interior, m), callable, or
        scalar expression dict.  For a forward march this is data at step
        `first_step` (default 0); for a backward march, terminal data at
        `first_step` (default num_steps) marching down to 0.
    source : None, callable (t, X) -> values, or scalar expression dict.
    transpose : use B(t)^T in place of B(t); combined with direction
        'backward' this is the adjoint march.
    source_steps : optional set of step indices at which the source is active
        (evaluated at the step's target time); None means all steps.
    """
    if direction not in ("forward", "backward"):
        raise ValueError("direction must be 'forward' or 'backward'")
    u = _as_space_values(grid, initial) if not isinstance(initial, np.ndarray) \
        else initial.astype(float)
    if u.shape[0] != grid.num_interior:
        raise ValueError("initial data does not match the interior node count")
    src = _as_spacetime_fn(grid, source)
    vol = grid.cell_volume
    times = grid.times()
    forward = direction == "forward"
    if first_step is None:
        first_step = 0 if forward else grid.num_steps
    num_moves = (grid.num_steps - first_step) if forward else first_step
    step_targets = (range(first_step + 1, grid.num_steps + 1) if forward
                    else range(first_step - 1, -1, -1))

    extra = u.shape[1:]
    hist = np.zeros((num_moves + 1,) + (grid.num_interior,) + extra, dtype=store_dtype)
    hist[0] = u
    mass = np.zeros(num_moves + 1)
    mass[0] = vol * np.sum(u, axis=0) if u.ndim == 1 else np.nan

    interior_pts = grid.interior_coords()
    solver = None
    autonomous = field.autonomous
    for move, k_target in enumerate(step_targets, start=1):
        # Forward move k-1 -> k applies (vol I + dt B(t_k))^-1; the backward
        # move k -> k-1 applies the transpose of that same matrix, so the two
        # marches are exact duals step by step.
        k_eval = k_target if forward else k_target + 1
        t_eval = times[k_eval]
        if solver is None or not autonomous:
            B = assemble_operator(field, grid, t_eval)
            if transpose:
                B = B.T.tocsr()
            solver = StepSolver(sp.identity(grid.num_interior, format="csr") * vol
                                + grid.dt * B, rtol=rtol)
        rhs = vol * u
        if src is not None and (source_steps is None or k_eval in source_steps):
            f_vals = src(t_eval, interior_pts)
            rhs = rhs + vol * grid.dt * (f_vals if u.ndim == 1 else f_vals[:, None])
        u = solver.solve(rhs)
        if not np.all(np.isfinite(u)):
            raise NumericalAbort(f"non-finite values at step {k_target}")
        if np.max(np.abs(u)) > 1e200:
            raise NumericalAbort(f"values exceeded 1e200 at step {k_target}")
        hist[move] = u
        mass[move] = vol * np.sum(u) if u.ndim == 1 else np.nan

    if not forward:
        hist = hist[::-1].copy()
        mass = mass[::-1].copy()
        stored_first = 0
    else:
        stored_first = first_step
    return DiscreteSolution(grid=grid, direction=direction, first_step=stored_first,
                            values=hist, initial_values=hist[0 if forward else -1].copy(),
                            source_fn=src, mass_history=mass)


def solve_cauchy(field: CoefficientField, grid: SpaceTimeGrid, initial, source=None,
                 *, rtol: float = 1e-10, store_dtype=np.float64) -> DiscreteSolution:
    """March P u = f forward from initial data at t_start."""
    return march(field, grid, initial, source, direction="forward", rtol=rtol,
                 store_dtype=store_dtype)


def solve_adjoint(field: CoefficientField, grid: SpaceTimeGrid, terminal, source=None,
                  *, rtol: float = 1e-10, store_dtype=np.float64) -> DiscreteSolution:
    """March the adjoint problem backward from terminal data at t_end.

    The adjoint operator transposes A, swaps b and c, and reverses time; at
    the discrete level each step uses the literal transpose of the forward
    step matrix, so forward/adjoint marches are exact duals.
    """
    return march(field, grid, terminal, source, direction="backward",
                 transpose=True, rtol=rtol, store_dtype=store_dtype)


# ---------------------------------------------------------------------------
# energy functionals
# ---------------------------------------------------------------------------

@dataclass
class EnergyNorm:
    sup_l2: float
    grad_l2: float

    @property
    def total(self) -> float:
        return self.sup_l2 + self.grad_l2


def energy_norm(sol: DiscreteSolution) -> EnergyNorm:
    """sup_t ||u(t)|| + ||grad u||_{L2(spacetime)} by nodal quadrature.

    The gradient part sums the exact Q1 Dirichlet integral over the marched
    steps (the initial slice carries no gradient weight).
    """
    S = gradient_stiffness(sol.grid)
    vals = sol.values
    if vals.ndim != 2:
        raise ValueError("energy_norm expects a single-column history")
    sup_l2 = float(np.max(sol.l2_history()))
    v = vals.astype(float, copy=False)
    marched = v[1:] if sol.direction == "forward" else v[:-1]
    grad_sq = sum(float(u @ (S @ u)) for u in marched) * sol.grid.dt
    return EnergyNorm(sup_l2=sup_l2, grad_l2=math.sqrt(grad_sq))


@dataclass
class EnergyCheck:
    energy: float
    data_norm: float
    initial_l2: float
    source_norm: float

    @property
    def ratio(self) -> float:
        return self.energy / self.data_norm if self.data_norm > 0 else math.inf


def verify_energy_inequality(sol: DiscreteSolution) -> EnergyCheck:
    """Ratio |||u||| / (||psi0||_2 + ||f||_{L_rho}), rho = (2n+4)/(n+4).

    The source norm uses the nodal values the march consumed (rectangle rule
    over interior nodes and marched step times).
    """
    grid = sol.grid
    vol = grid.cell_volume
    en = energy_norm(sol)
    psi0 = float(np.sqrt(vol * np.sum(sol.initial_values ** 2)))
    rho = (2.0 * grid.n + 4.0) / (grid.n + 4.0)
    f_norm = 0.0
    if sol.source_fn is not None:
        pts = grid.interior_coords()
        times = grid.times()
        total = 0.0
        # the march evaluated the source at steps first+1 .. last in both
        # directions (backward histories are stored re-reversed from 0)
        for k in range(sol.first_step + 1, sol.last_step + 1):
            f_vals = sol.source_fn(times[k], pts)
            total += float(np.sum(np.abs(f_vals) ** rho)) * vol * grid.dt
        f_norm = total ** (1.0 / rho)
    return EnergyCheck(energy=en.total, data_norm=psi0 + f_norm,
                       initial_l2=psi0, source_norm=f_norm)


def embedding_ratio(sol: DiscreteSolution) -> float:
    """||u||_{p~,q~} / |||u||| with p~ = q~ = 2(n+2)/n (the energy embedding)."""
    grid = sol.grid
    p = 2.0 * (grid.n + 2.0) / grid.n
    vol = grid.cell_volume
    v = np.abs(sol.values.astype(float, copy=False))
    space = (np.sum(v ** p, axis=1) * vol) ** (1.0 / p)
    norm = (np.sum(space ** p) * grid.dt) ** (1.0 / p)
    total = energy_norm(sol).total
    return float(norm / total) if total > 0 else math.inf
