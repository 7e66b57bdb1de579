"""Space-time grids, parabolic geometry, and discrete cylinders.

The domain is a box Omega = (box[0][0], box[0][1]) x ... in R^n together with
a time interval (t_start, t_end).  Space is discretized by a uniform tensor
grid of multilinear hat functions (nodes at cell corners), time by uniform
implicit Euler steps.  Everything downstream (assembly, kernels, local
estimates) speaks in terms of the node/step indexing fixed here.

Conventions
-----------
* Full nodes: per-axis index 0..cells[a], flattened in C order over
  shape = cells + 1.
* Interior nodes: per-axis index 1..cells[a]-1, flattened in C order over
  interior_shape = cells - 1.  This is the unknown ordering used by the
  solvers; homogeneous Dirichlet values live on the remaining nodes.
* Time steps: t_k = t_start + k*dt for k = 0..num_steps.  The requested dt
  is snapped so that num_steps * dt equals the interval length exactly.
* The parabolic distance between X = (t, x) and Y = (s, y) is
  max(sqrt(|t-s|), |x-y|) with the Euclidean spatial norm.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class SpaceTimeGrid:
    """Uniform tensor-product grid on a space-time box.

    Attributes
    ----------
    n : int
        Spatial dimension (1, 2, or 3 are exercised; any n >= 1 works).
    box : tuple of (float, float)
        Per-axis spatial bounds (lo, hi).
    cells : tuple of int
        Cells per axis; nodes per axis is cells[a] + 1.
    t_start, t_end : float
        Time interval.
    dt : float
        Actual step, snapped so num_steps * dt == t_end - t_start.
    num_steps : int
        Number of implicit Euler steps.
    """

    n: int
    box: tuple[tuple[float, float], ...]
    cells: tuple[int, ...]
    t_start: float
    t_end: float
    dt: float
    num_steps: int
    h: tuple[float, ...] = field(init=False)

    def __post_init__(self):
        h = tuple((hi - lo) / m for (lo, hi), m in zip(self.box, self.cells))
        object.__setattr__(self, "h", h)

    # -- geometry -----------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(m + 1 for m in self.cells)

    @property
    def interior_shape(self) -> tuple[int, ...]:
        return tuple(m - 1 for m in self.cells)

    @property
    def num_nodes(self) -> int:
        return int(np.prod(self.shape))

    @property
    def num_interior(self) -> int:
        return int(np.prod(self.interior_shape))

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.h))

    @property
    def max_h(self) -> float:
        return max(self.h)

    def node_axes(self) -> list[np.ndarray]:
        """Per-axis node coordinates, endpoints exact."""
        return [np.linspace(lo, hi, m + 1) for (lo, hi), m in zip(self.box, self.cells)]

    def cell_center_axes(self) -> list[np.ndarray]:
        return [lo + (np.arange(m) + 0.5) * h
                for (lo, hi), m, h in zip(self.box, self.cells, self.h)]

    def times(self) -> np.ndarray:
        return self.t_start + self.dt * np.arange(self.num_steps + 1)

    # -- node coordinate tables (flattened, C order) ------------------------

    def node_coords(self) -> np.ndarray:
        """All node coordinates, shape (num_nodes, n)."""
        axes = self.node_axes()
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def interior_coords(self) -> np.ndarray:
        """Interior node coordinates, shape (num_interior, n)."""
        axes = [ax[1:-1] for ax in self.node_axes()]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def cell_centers(self) -> np.ndarray:
        """All cell centers, shape (num_cells, n)."""
        axes = self.cell_center_axes()
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    @property
    def num_cells(self) -> int:
        return int(np.prod(self.cells))

    # -- index conversions ---------------------------------------------------

    def interior_to_full(self) -> np.ndarray:
        """Flat full-grid index of each interior node, shape (num_interior,)."""
        idx = np.meshgrid(*[np.arange(1, m) for m in self.cells], indexing="ij")
        return np.ravel_multi_index([i.ravel() for i in idx], self.shape)

    def full_to_interior(self) -> np.ndarray:
        """Flat interior index for each full node; -1 on the boundary."""
        out = np.full(self.num_nodes, -1, dtype=np.int64)
        out[self.interior_to_full()] = np.arange(self.num_interior)
        return out

    def boundary_mask(self) -> np.ndarray:
        """Boolean mask over full nodes, True on the spatial boundary."""
        mask = np.zeros(self.shape, dtype=bool)
        for a in range(self.n):
            sl = [slice(None)] * self.n
            sl[a] = 0
            mask[tuple(sl)] = True
            sl[a] = -1
            mask[tuple(sl)] = True
        return mask.ravel()

    def embed_interior(self, u: np.ndarray) -> np.ndarray:
        """Zero-extend interior values to the full node set.

        Accepts (..., num_interior) and returns (..., num_nodes).
        """
        u = np.asarray(u)
        out = np.zeros(u.shape[:-1] + (self.num_nodes,), dtype=u.dtype)
        out[..., self.interior_to_full()] = u
        return out

    # -- lookups -------------------------------------------------------------

    def nearest_node(self, x) -> int:
        """Flat full-grid index of the node closest to x (clipped into the box)."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        if x.shape != (self.n,):
            raise ValueError(f"point has shape {x.shape}, expected ({self.n},)")
        idx = []
        for a in range(self.n):
            lo, _ = self.box[a]
            i = int(round((x[a] - lo) / self.h[a]))
            idx.append(min(max(i, 0), self.cells[a]))
        return int(np.ravel_multi_index(idx, self.shape))

    def nearest_step(self, t: float) -> int:
        """Index k of the step time closest to t (clipped into the interval)."""
        k = int(round((t - self.t_start) / self.dt))
        return min(max(k, 0), self.num_steps)

    def node_position(self, flat: int) -> np.ndarray:
        idx = np.unravel_index(flat, self.shape)
        return np.array([self.box[a][0] + idx[a] * self.h[a] for a in range(self.n)])


def build_grid(n, box, cells, t_start, t_end, dt) -> SpaceTimeGrid:
    """Validate inputs and construct a SpaceTimeGrid.

    Parameters
    ----------
    n : int
        Spatial dimension.
    box : sequence of (lo, hi)
        One pair per axis, lo < hi.
    cells : int or sequence of int
        Cells per axis (scalar broadcasts), each >= 2.
    t_start, t_end : float
        Time interval, t_start < t_end.
    dt : float
        Requested step, 0 < dt <= t_end - t_start.  Snapped to divide the
        interval exactly; the stored dt is authoritative.
    """
    n = int(n)
    if n < 1:
        raise ValueError("spatial dimension must be >= 1")
    box = tuple((float(lo), float(hi)) for lo, hi in box)
    if len(box) != n:
        raise ValueError(f"box has {len(box)} axes, expected {n}")
    for lo, hi in box:
        if not lo < hi:
            raise ValueError(f"degenerate box axis ({lo}, {hi})")
    if np.isscalar(cells):
        cells = (int(cells),) * n
    else:
        cells = tuple(int(m) for m in cells)
    if len(cells) != n:
        raise ValueError(f"cells has {len(cells)} axes, expected {n}")
    for m in cells:
        if m < 2:
            raise ValueError("need at least 2 cells per axis for interior nodes")
    t_start, t_end, dt = float(t_start), float(t_end), float(dt)
    span = t_end - t_start
    if not span > 0:
        raise ValueError("t_start must be < t_end")
    if not 0 < dt <= span:
        raise ValueError("dt must lie in (0, t_end - t_start]")
    num_steps = max(1, int(round(span / dt)))
    dt = span / num_steps
    return SpaceTimeGrid(n=n, box=box, cells=cells, t_start=t_start,
                         t_end=t_end, dt=dt, num_steps=num_steps)


def parabolic_distance(X, Y) -> float:
    """max(sqrt(|t-s|), |x-y|) for X = (t, x), Y = (s, y)."""
    t, x = X
    s, y = Y
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if x.shape != y.shape:
        raise ValueError(f"spatial points have shapes {x.shape} and {y.shape}")
    return float(max(np.sqrt(abs(float(t) - float(s))), np.linalg.norm(x - y)))


@dataclass(frozen=True)
class ParabolicCylinder:
    """Parabolic cylinder Q_r(t0, x0).

    orientation '-' is the past cylinder (t0 - r^2, t0] x B_r(x0);
    orientation '+' is the future cylinder [t0, t0 + r^2) x B_r(x0).
    """

    t0: float
    x0: tuple[float, ...]
    r: float
    orientation: str = "-"

    def __post_init__(self):
        if self.orientation not in ("-", "+"):
            raise ValueError("orientation must be '-' or '+'")
        if not self.r > 0:
            raise ValueError("radius must be positive")
        object.__setattr__(self, "x0", tuple(float(v) for v in self.x0))

    def time_interval(self) -> tuple[float, float]:
        if self.orientation == "-":
            return (self.t0 - self.r ** 2, self.t0)
        return (self.t0, self.t0 + self.r ** 2)

    def shrink(self, factor: float) -> "ParabolicCylinder":
        """Concentric cylinder with radius r*factor, same anchor point."""
        return ParabolicCylinder(self.t0, self.x0, self.r * factor, self.orientation)


@dataclass(frozen=True)
class CylinderNodes:
    """Discrete trace of a cylinder on a grid.

    step_indices : ascending time-step indices k with t_k in the cylinder.
    node_indices : flat full-grid node indices with |x - x0| < r.
    measure : count-based space-time measure, len(steps)*len(nodes)*dt*cellvol.
    space_fallback / time_fallback : True when the exact membership set was
        empty and the nearest node / step inside the grid was substituted.
    """

    step_indices: np.ndarray
    node_indices: np.ndarray
    measure: float
    space_fallback: bool = False
    time_fallback: bool = False

    @property
    def num_pairs(self) -> int:
        return len(self.step_indices) * len(self.node_indices)


def cylinder_nodes(grid: SpaceTimeGrid, cyl: ParabolicCylinder) -> CylinderNodes:
    """Node/step membership of a parabolic cylinder.

    Membership is evaluated at node points and step times: spatial nodes with
    |x - x0| < r, step times in (t0 - r^2, t0] for a past cylinder and in
    [t0, t0 + r^2) for a future one.  A cylinder that intersects the grid but
    captures no node (or no step) falls back to the nearest node (or step), so
    the trace is never empty.  A cylinder disjoint from the space-time box is
    an error.
    """
    x0 = np.asarray(cyl.x0, dtype=float)
    if x0.shape != (grid.n,):
        raise ValueError(f"cylinder center has shape {x0.shape}, expected ({grid.n},)")

    lo_t, hi_t = cyl.time_interval()
    if hi_t < grid.t_start or lo_t > grid.t_end:
        raise ValueError("cylinder time interval does not meet the grid")
    for a in range(grid.n):
        lo, hi = grid.box[a]
        if x0[a] + cyl.r <= lo or x0[a] - cyl.r >= hi:
            raise ValueError("cylinder ball does not meet the spatial box")

    times = grid.times()
    if cyl.orientation == "-":
        in_time = (times > lo_t) & (times <= hi_t)
    else:
        in_time = (times >= lo_t) & (times < hi_t)
    step_indices = np.flatnonzero(in_time)
    time_fallback = False
    if len(step_indices) == 0:
        mid = 0.5 * (max(lo_t, grid.t_start) + min(hi_t, grid.t_end))
        step_indices = np.array([grid.nearest_step(mid)])
        time_fallback = True

    coords = grid.node_coords()
    dist2 = np.sum((coords - x0) ** 2, axis=1)
    node_indices = np.flatnonzero(dist2 < cyl.r ** 2)
    space_fallback = False
    if len(node_indices) == 0:
        node_indices = np.array([grid.nearest_node(x0)])
        space_fallback = True

    measure = len(step_indices) * len(node_indices) * grid.dt * grid.cell_volume
    return CylinderNodes(step_indices=step_indices, node_indices=node_indices,
                         measure=measure, space_fallback=space_fallback,
                         time_fallback=time_fallback)
