"""Approximate heat-kernel columns and their structural identities.

A kernel column tracks the response to a unit of mass injected at a pole
Y = (s, y): either as a discrete delta at the nearest node (point mode) or
spread uniformly over a backward parabolic cylinder of radius epsilon
(cylinder mode).  Adjoint columns march the transposed generator backward
from the pole, so the forward/adjoint pair satisfies the duality identity

    G(t, x, s, y) = G*(s, y, t, x)

at linear-solver precision in point mode; by the same linearity the
representation of a Cauchy solution as a kernel-weighted sum of initial data
is exact to roundoff.  The off-diagonal check measures the empirical constant
in |G(X, Y)| <= C |X - Y|^{-n} over samples separated from the pole in the
parabolic metric.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .fields import CoefficientField
from .grid import ParabolicCylinder, SpaceTimeGrid, cylinder_nodes, parabolic_distance
from .solver import DiscreteSolution, march, _as_space_values


@dataclass
class GreenKernel:
    """One kernel column G^eps(., Y) (or adjoint column, backward from Y).

    The stored solution covers step indices on the causal side of the pole
    only: t >= s for a forward column, t <= s for an adjoint one.  value_at
    extends by zero on the other side, so G(t, x, s, y) = 0 for t < s holds
    by construction.
    """

    grid: SpaceTimeGrid
    pole_step: int
    pole_node: int
    pole_interior: int
    epsilon: float
    mode: str
    adjoint: bool
    solution: DiscreteSolution
    snap_distance: float
    coeff_signature: str

    @property
    def pole_time(self) -> float:
        return float(self.grid.t_start + self.grid.dt * self.pole_step)

    @property
    def pole_point(self) -> np.ndarray:
        return self.grid.node_position(self.pole_node)

    def value_at(self, k: int) -> np.ndarray:
        """Interior kernel values at global step k, zero beyond the pole."""
        return self.solution.value_at(k)

    def full_at(self, k: int) -> np.ndarray:
        return self.solution.full_at(k)

    def mass_at(self, k: int) -> float:
        return float(self.grid.cell_volume * np.sum(self.value_at(k)))

    def peak(self) -> float:
        return float(np.max(np.abs(self.solution.values)))

    def boundary_leak(self) -> float:
        """1 - total mass at the far end of the march.

        Meaningful for conservative coefficients (b = c = 0, d = 0), where
        any deficit is mass lost through the lateral Dirichlet boundary.
        """
        mh = self.solution.mass_history
        return float(1.0 - (mh[0] if self.adjoint else mh[-1]))


def _snap_pole(grid: SpaceTimeGrid, pole):
    """Snap (s, y) to the nearest step and interior node."""
    s, y = pole
    y = np.atleast_1d(np.asarray(y, dtype=float))
    step = grid.nearest_step(float(s))
    node = grid.nearest_node(y)
    interior = int(grid.full_to_interior()[node])
    if interior < 0:
        raise ValueError("pole node lies on the spatial boundary; "
                         "move the pole strictly inside the box")
    t_snap = grid.times()[step]
    snap = parabolic_distance((float(s), y), (t_snap, grid.node_position(node)))
    return step, node, interior, snap


def _min_epsilon(grid: SpaceTimeGrid) -> float:
    return 2.0 * max(grid.max_h, math.sqrt(grid.dt))


def _cylinder_source(grid: SpaceTimeGrid, cyl: ParabolicCylinder):
    """Interior indicator of the cylinder scaled by 1/(discrete measure)."""
    trace = cylinder_nodes(grid, cyl)
    vec = np.zeros(grid.num_interior)
    inner = grid.full_to_interior()[trace.node_indices]
    vec[inner[inner >= 0]] = 1.0 / trace.measure
    return vec, trace


def _trimmed(sol: DiscreteSolution, lo: int, hi: int, anchor: int) -> DiscreteSolution:
    """Restrict a stored history to global steps [lo, hi]."""
    a = lo - sol.first_step
    b = hi - sol.first_step + 1
    values = sol.values[a:b]
    mass = None if sol.mass_history is None else sol.mass_history[a:b]
    return DiscreteSolution(grid=sol.grid, direction=sol.direction, first_step=lo,
                            values=values,
                            initial_values=np.asarray(values[anchor - lo], dtype=float).copy(),
                            source_fn=None, mass_history=mass)


def approximate_green(field: CoefficientField, grid: SpaceTimeGrid, pole,
                      epsilon: float | None = None, mode: str = "point", *,
                      rtol: float = 1e-10, store_dtype=np.float64) -> GreenKernel:
    """Forward kernel column from pole Y = (s, y).

    Point mode starts from a discrete delta (mass 1/cell-volume at the
    snapped node) at the snapped step.  Cylinder mode marches from zero data
    with source = indicator of the backward cylinder Q^-_eps(Y) divided by
    its discrete measure, beginning one step before the cylinder so every
    member step receives its share; the stored column starts at s, where the
    injected mass totals one.
    """
    if field.n != grid.n:
        raise ValueError(f"field dimension {field.n} != grid dimension {grid.n}")
    if mode not in ("point", "cylinder"):
        raise ValueError(f"unknown source mode {mode!r}")
    step, node, interior, snap = _snap_pole(grid, pole)
    eps_min = _min_epsilon(grid)
    eps = eps_min if epsilon is None else float(epsilon)
    if not eps > 0:
        raise ValueError("epsilon must be positive")

    if mode == "point":
        u0 = np.zeros(grid.num_interior)
        u0[interior] = 1.0 / grid.cell_volume
        sol = march(field, grid, u0, direction="forward", first_step=step,
                    rtol=rtol, store_dtype=store_dtype)
    else:
        if eps < eps_min * (1.0 - 1e-12):
            raise ValueError(
                f"epsilon {eps:g} is below the grid resolution floor {eps_min:g}")
        t_pole = float(grid.times()[step])
        if t_pole - eps ** 2 < grid.t_start - 1e-12 * max(1.0, abs(grid.t_start)):
            raise ValueError("backward cylinder leaves the time interval; "
                             "need pole time - epsilon^2 >= t_start")
        cyl = ParabolicCylinder(t_pole, tuple(grid.node_position(node)), eps, "-")
        vec, trace = _cylinder_source(grid, cyl)
        start = max(int(trace.step_indices.min()) - 1, 0)
        active = set(int(k) for k in trace.step_indices)
        sol = march(field, grid, np.zeros(grid.num_interior),
                    source=lambda t, X: vec, direction="forward",
                    first_step=start, rtol=rtol, store_dtype=store_dtype,
                    source_steps=active)
        sol = _trimmed(sol, step, sol.last_step, step)

    return GreenKernel(grid=grid, pole_step=step, pole_node=node,
                       pole_interior=interior, epsilon=eps, mode=mode,
                       adjoint=False, solution=sol, snap_distance=snap,
                       coeff_signature=field.signature())


def adjoint_green(field: CoefficientField, grid: SpaceTimeGrid, pole,
                  epsilon: float | None = None, mode: str = "point", *,
                  rtol: float = 1e-10, store_dtype=np.float64) -> GreenKernel:
    """Adjoint kernel column, backward in time from pole X = (t, x).

    Each backward move applies the transpose of the corresponding forward
    step matrix, which is the discrete adjoint operator (transposed A,
    swapped drifts, reversed time).  Cylinder mode uses the forward cylinder
    Q^+_eps(X); the stored column ends at t and is zero after it.
    """
    if field.n != grid.n:
        raise ValueError(f"field dimension {field.n} != grid dimension {grid.n}")
    if mode not in ("point", "cylinder"):
        raise ValueError(f"unknown source mode {mode!r}")
    step, node, interior, snap = _snap_pole(grid, pole)
    eps_min = _min_epsilon(grid)
    eps = eps_min if epsilon is None else float(epsilon)
    if not eps > 0:
        raise ValueError("epsilon must be positive")

    if mode == "point":
        u0 = np.zeros(grid.num_interior)
        u0[interior] = 1.0 / grid.cell_volume
        sol = march(field, grid, u0, direction="backward", transpose=True,
                    first_step=step, rtol=rtol, store_dtype=store_dtype)
    else:
        if eps < eps_min * (1.0 - 1e-12):
            raise ValueError(
                f"epsilon {eps:g} is below the grid resolution floor {eps_min:g}")
        t_pole = float(grid.times()[step])
        if t_pole + eps ** 2 > grid.t_end + 1e-12 * max(1.0, abs(grid.t_end)):
            raise ValueError("forward cylinder leaves the time interval; "
                             "need pole time + epsilon^2 <= t_end")
        cyl = ParabolicCylinder(t_pole, tuple(grid.node_position(node)), eps, "+")
        vec, trace = _cylinder_source(grid, cyl)
        start = int(trace.step_indices.max())
        active = set(int(k) for k in trace.step_indices)
        sol = march(field, grid, np.zeros(grid.num_interior),
                    source=lambda t, X: vec, direction="backward", transpose=True,
                    first_step=start, rtol=rtol, store_dtype=store_dtype,
                    source_steps=active)
        sol = _trimmed(sol, 0, step, step)

    return GreenKernel(grid=grid, pole_step=step, pole_node=node,
                       pole_interior=interior, epsilon=eps, mode=mode,
                       adjoint=True, solution=sol, snap_distance=snap,
                       coeff_signature=field.signature())


def green_columns(field: CoefficientField, grid: SpaceTimeGrid, poles, *,
                  epsilon: float | None = None, mode: str = "point",
                  adjoint: bool = False, workers: int = 1,
                  rtol: float = 1e-10, store_dtype=np.float64) -> list[GreenKernel]:
    """Kernel columns for several poles; the grid and field are shared read-only."""
    build = adjoint_green if adjoint else approximate_green
    if workers <= 1:
        return [build(field, grid, p, epsilon, mode, rtol=rtol,
                      store_dtype=store_dtype) for p in poles]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(build, field, grid, p, epsilon, mode, rtol=rtol,
                               store_dtype=store_dtype) for p in poles]
        return [f.result() for f in futures]


# ---------------------------------------------------------------------------
# structural identities
# ---------------------------------------------------------------------------

@dataclass
class DualityReport:
    """Forward vs adjoint kernel readings over sampled pole pairs.

    rows holds (source_pole, observation_pole, forward_value, adjoint_value,
    relative_discrepancy); the relative scale is the larger magnitude.
    """

    max_rel: float
    epsilon_mismatch: bool
    rows: list[tuple]


def duality_check(field: CoefficientField, grid: SpaceTimeGrid, pole_pairs, *,
                  mode: str = "point", epsilon: float | None = None,
                  epsilon_adjoint: float | None = None,
                  rtol: float = 1e-12) -> DualityReport:
    """Compare G(t, x, s, y) with G*(s, y, t, x) over (Y, X) pairs.

    In point mode the backward march applies exact transposes of the forward
    step matrices, so the discrepancy is bounded by solver roundoff.  Pairs
    with t <= s probe the zero extension and contribute zero.  A different
    epsilon for the adjoint kernel (cylinder mode) is allowed but flagged.
    """
    eps_f = _min_epsilon(grid) if epsilon is None else float(epsilon)
    eps_a = eps_f if epsilon_adjoint is None else float(epsilon_adjoint)
    mismatch = eps_a != eps_f
    rows = []
    worst = 0.0
    for source_pole, obs_pole in pole_pairs:
        fwd = approximate_green(field, grid, source_pole, eps_f, mode, rtol=rtol)
        adj = adjoint_green(field, grid, obs_pole, eps_a, mode, rtol=rtol)
        g_fwd = float(fwd.value_at(adj.pole_step)[adj.pole_interior])
        g_adj = float(adj.value_at(fwd.pole_step)[fwd.pole_interior])
        scale = max(abs(g_fwd), abs(g_adj))
        rel = abs(g_fwd - g_adj) / scale if scale > 0 else 0.0
        worst = max(worst, rel)
        rows.append((source_pole, obs_pole, g_fwd, g_adj, rel))
    return DualityReport(max_rel=worst, epsilon_mismatch=mismatch, rows=rows)


@dataclass
class RepresentationReport:
    check_steps: tuple[int, ...]
    rel_l2: tuple[float, ...]

    @property
    def max_rel_l2(self) -> float:
        return max(self.rel_l2)


def representation_check(field: CoefficientField, grid: SpaceTimeGrid, psi0, *,
                         check_steps=None, rtol: float = 1e-10,
                         max_poles: int = 10_000) -> RepresentationReport:
    """Kernel-sum reconstruction of a Cauchy solution against a direct march.

    All kernel columns with poles at the interior nodes (at t_start) are
    marched at once from the scaled identity; the reconstruction
    sum_y G(t, x, 0, y) psi0(y) * cellvol is then compared with
    solve_cauchy(psi0) in relative nodal L2 at the requested steps.
    """
    if grid.num_interior > max_poles:
        raise ValueError(
            f"representation check needs one kernel per interior node; "
            f"{grid.num_interior} exceeds the cap {max_poles}")
    psi = _as_space_values(grid, psi0)
    columns = march(field, grid, np.eye(grid.num_interior) / grid.cell_volume,
                    direction="forward", rtol=rtol)
    direct = march(field, grid, psi, direction="forward", rtol=rtol)
    if check_steps is None:
        check_steps = np.unique(np.linspace(1, grid.num_steps, 5).astype(int))
    rels = []
    for k in check_steps:
        k = int(k)
        if not 1 <= k <= grid.num_steps:
            raise ValueError(f"check step {k} outside 1..{grid.num_steps}")
        u_rep = columns.value_at(k) @ psi * grid.cell_volume
        u_dir = direct.value_at(k)
        denom = float(np.linalg.norm(u_dir))
        num = float(np.linalg.norm(u_rep - u_dir))
        rels.append(num / denom if denom > 0 else num)
    return RepresentationReport(check_steps=tuple(int(k) for k in check_steps),
                                rel_l2=tuple(rels))


@dataclass
class OffdiagReport:
    """Empirical constant sup |G| * rho^n over admissible samples.

    rho is the parabolic distance to the pole; samples keep rho at least
    min_ratio * epsilon and stay a buffer away from the lateral boundary.
    cone='spatial' additionally requires |x - y| >= sqrt(|t - s|).
    """

    constant: float
    num_samples: int
    argmax_step: int
    argmax_node: int
    epsilon: float
    min_ratio: float
    cone: str


def pointwise_offdiag_check(kernel: GreenKernel, *, min_ratio: float = 3.0,
                            boundary_buffer: float | None = None,
                            cone: str = "full") -> OffdiagReport:
    if cone not in ("full", "spatial"):
        raise ValueError(f"unknown cone {cone!r}")
    grid = kernel.grid
    if kernel.solution.values.ndim != 2:
        raise ValueError("off-diagonal check expects a single kernel column")
    buf = 4.0 * grid.max_h if boundary_buffer is None else float(boundary_buffer)
    pts = grid.interior_coords()
    r = np.linalg.norm(pts - kernel.pole_point, axis=1)
    inside = np.ones(len(pts), dtype=bool)
    for a in range(grid.n):
        lo, hi = grid.box[a]
        inside &= (pts[:, a] >= lo + buf) & (pts[:, a] <= hi - buf)

    times = grid.times()
    sol = kernel.solution
    best = -math.inf
    best_step = best_node = -1
    count = 0
    for m, k in enumerate(range(sol.first_step, sol.last_step + 1)):
        gap = abs(float(times[k]) - kernel.pole_time)
        rho = np.maximum(math.sqrt(gap), r)
        mask = inside & (rho >= min_ratio * kernel.epsilon)
        if cone == "spatial":
            mask = mask & (r >= math.sqrt(gap))
        hits = int(np.count_nonzero(mask))
        if hits == 0:
            continue
        count += hits
        product = np.abs(np.asarray(sol.values[m], dtype=float)) * rho ** grid.n
        product[~mask] = -math.inf
        j = int(np.argmax(product))
        if product[j] > best:
            best, best_step, best_node = float(product[j]), k, j
    if count == 0:
        raise ValueError("no admissible samples: every node is within "
                         "min_ratio * epsilon of the pole or the boundary buffer")
    return OffdiagReport(constant=best, num_samples=count, argmax_step=best_step,
                         argmax_node=best_node, epsilon=kernel.epsilon,
                         min_ratio=min_ratio, cone=cone)
