"""Quantitative envelopes and local estimates on discrete solutions.

Three instruments:

* Gaussian envelope fits: regress log((t-s)^{n/2} |G|) on the parabolic
  similarity variable xi = |x-y|^2 / (t-s).  The slope gives the decay rate
  kappa, and the intercept, shifted up by the largest residual, gives an
  amplitude C such that every admitted sample sits below
  C (t-s)^{-n/2} exp(-kappa xi).
* Local boundedness quotients: the empirical constant N0 in
  sup |u| over a half cylinder versus the scale-weighted L2 mass and source
  bound over the full cylinder.
* Level-set iteration traces: the normalized excesses Y_m of a solution over
  the increasing levels k_m on the shrinking cylinders Q_m, together with the
  exact Chebyshev bookkeeping that drives their geometric decay.

Parabolic rescaling of coefficient fields is provided so envelope constants
can be compared across scales.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .fields import CoefficientField
from .green import GreenKernel
from .grid import ParabolicCylinder, SpaceTimeGrid, cylinder_nodes
from .solver import DiscreteSolution, _as_spacetime_fn

SAMPLE_FLOOR = 1e-30


# ---------------------------------------------------------------------------
# Gaussian envelope fitting
# ---------------------------------------------------------------------------

@dataclass
class GaussianFit:
    """Envelope |G| <= C (t-s)^{-n/2} exp(-kappa |x-y|^2/(t-s)).

    C includes the residual shift, so the envelope dominates every sample the
    fit admitted.  r_squared near zero flags data with no xi dependence.
    """

    C: float
    kappa: float
    r_squared: float
    n_samples: int
    residual_max: float


def admitted_samples(kernel: GreenKernel, *, t_min: float | None = None,
                     t_max: float | None = None, min_dist: float | None = None,
                     boundary_buffer: float | None = None, xi_cap: float = 30.0,
                     floor: float = SAMPLE_FLOOR) -> np.ndarray:
    """Rows (t_gap, distance, |value|) surviving the envelope sample filter.

    Defaults: time gaps in [4 dt, (stored extent)/2], distance at least
    2 max(h), nodes at least 4 max(h) from the lateral boundary, xi at most
    xi_cap, values above floor.
    """
    grid = kernel.grid
    sol = kernel.solution
    extent = (sol.last_step - sol.first_step) * grid.dt
    lo = 4.0 * grid.dt if t_min is None else float(t_min)
    hi = extent / 2.0 if t_max is None else float(t_max)
    dmin = 2.0 * grid.max_h if min_dist is None else float(min_dist)
    buf = 4.0 * grid.max_h if boundary_buffer is None else float(boundary_buffer)

    pts = grid.interior_coords()
    dist = np.linalg.norm(pts - kernel.pole_point, axis=1)
    keep_space = dist >= dmin
    for a in range(grid.n):
        b_lo, b_hi = grid.box[a]
        keep_space &= (pts[:, a] >= b_lo + buf) & (pts[:, a] <= b_hi - buf)

    times = grid.times()
    rows = []
    for m, k in enumerate(range(sol.first_step, sol.last_step + 1)):
        gap = abs(float(times[k]) - kernel.pole_time)
        if gap < lo or gap > hi:
            continue
        vals = np.abs(np.asarray(sol.values[m], dtype=float))
        mask = keep_space & (vals > floor) & (dist ** 2 <= xi_cap * gap)
        if not mask.any():
            continue
        rows.append(np.column_stack([np.full(mask.sum(), gap), dist[mask], vals[mask]]))
    if not rows:
        return np.empty((0, 3))
    return np.concatenate(rows, axis=0)


def _resolve_samples(source, n, filter_kwargs):
    if isinstance(source, GreenKernel):
        return admitted_samples(source, **filter_kwargs), source.grid.n
    if filter_kwargs:
        raise ValueError("sample filters only apply when fitting a kernel")
    samples = np.asarray(source, dtype=float)
    if samples.ndim != 2 or samples.shape[1] != 3:
        raise ValueError("samples must be rows of (t_gap, distance, value)")
    if n is None:
        raise ValueError("spatial dimension n is required for raw samples")
    return samples, int(n)


def fit_gaussian(source, n: int | None = None, **filter_kwargs) -> GaussianFit:
    """Least-squares Gaussian envelope for a kernel or raw (gap, dist, value) rows.

    The slope of log((gap)^{n/2} value) against xi = dist^2/gap is -kappa
    (clamped at zero when the data grows with xi) and exp(intercept +
    residual_max) is C, making the envelope one-sided by construction.
    """
    samples, n = _resolve_samples(source, n, filter_kwargs)
    if len(samples) < 10:
        raise ValueError(f"only {len(samples)} admitted samples; need at least 10")
    gap, dist, vals = samples.T
    if np.any(vals <= 0) or np.any(gap <= 0):
        raise ValueError("samples require positive values and time gaps")
    xi = dist ** 2 / gap
    y = np.log(gap ** (n / 2.0) * vals)
    spread = float(np.ptp(xi))
    if spread < 1e-12 * max(1.0, float(np.max(np.abs(xi)))):
        raise ValueError("degenerate sample set: xi is constant across samples")
    coeffs = np.polyfit(xi, y, 1)
    slope, intercept = float(coeffs[0]), float(coeffs[1])
    fitted = slope * xi + intercept
    ss_res = float(np.sum((y - fitted) ** 2))
    ss_tot = float(np.sum((y - np.mean(y)) ** 2))
    r_squared = 0.0 if ss_tot <= 1e-28 else max(0.0, 1.0 - ss_res / ss_tot)
    residual_max = float(np.max(y - fitted))
    return GaussianFit(C=math.exp(intercept + residual_max),
                       kappa=max(-slope, 0.0), r_squared=r_squared,
                       n_samples=len(samples), residual_max=residual_max)


@dataclass
class EnvelopeReport:
    passed: bool
    num_checked: int
    num_violations: int
    violations: list[tuple]
    margin: float


def verify_envelope(source, C: float, kappa: float, margin: float = 0.0,
                    n: int | None = None, max_listed: int = 1000,
                    **filter_kwargs) -> EnvelopeReport:
    """Check |G| <= (1+margin) C gap^{-n/2} exp(-kappa xi) on admitted samples.

    Violations are listed as (gap, dist, value, bound) rows, capped at
    max_listed entries; the count is always exact.
    """
    samples, n = _resolve_samples(source, n, filter_kwargs)
    gap, dist, vals = samples.T
    xi = dist ** 2 / gap
    bound = (1.0 + margin) * C * gap ** (-n / 2.0) * np.exp(-kappa * xi)
    bad = vals > bound
    idx = np.flatnonzero(bad)
    listed = [(float(gap[i]), float(dist[i]), float(vals[i]), float(bound[i]))
              for i in idx[:max_listed]]
    return EnvelopeReport(passed=not bad.any(), num_checked=len(samples),
                          num_violations=int(bad.sum()), violations=listed,
                          margin=margin)


# ---------------------------------------------------------------------------
# parabolic rescaling
# ---------------------------------------------------------------------------

class _RescaledMatrix:
    def __init__(self, base, r):
        self.base, self.r = base, float(r)
        self.autonomous = getattr(base, "autonomous", False)

    def __call__(self, t, X):
        return self.base(self.r ** 2 * t, self.r * np.asarray(X, dtype=float))


class _RescaledVector:
    def __init__(self, base, r):
        self.base, self.r = base, float(r)
        self.autonomous = getattr(base, "autonomous", False)

    def __call__(self, t, X):
        return self.r * self.base(self.r ** 2 * t, self.r * np.asarray(X, dtype=float))

    def div(self, t, X):
        return self.r ** 2 * self.base.div(self.r ** 2 * t,
                                           self.r * np.asarray(X, dtype=float))


class _RescaledScalar:
    def __init__(self, base, r):
        self.base, self.r = base, float(r)
        self.autonomous = getattr(base, "autonomous", False)

    def __call__(self, t, X):
        return self.r ** 2 * self.base(self.r ** 2 * t,
                                       self.r * np.asarray(X, dtype=float))


def rescale_coefficients(field: CoefficientField, r: float) -> CoefficientField:
    """The coefficient set of the parabolically rescaled operator.

    u_r(t, x) = u(r^2 t, r x) solves the equation with A_r(t,x) = A(r^2 t, rx),
    b_r = r b(r^2 t, rx), c_r likewise, and d_r = r^2 d(r^2 t, rx).  The
    declared constants (nu, theta, p, q) carry over unchanged: the critical
    mixed norm is invariant under this substitution.
    """
    r = float(r)
    if not r > 0:
        raise ValueError("scale r must be positive")
    metadata = dict(field.metadata)
    metadata["rescaled_by"] = metadata.get("rescaled_by", 1.0) * r
    return replace(field,
                   a=_RescaledMatrix(field.a, r),
                   b=_RescaledVector(field.b, r),
                   c=_RescaledVector(field.c, r),
                   d=_RescaledScalar(field.d, r),
                   metadata=metadata)


# ---------------------------------------------------------------------------
# local boundedness
# ---------------------------------------------------------------------------

@dataclass
class LocalBoundednessReport:
    """Empirical constant in the scale-invariant local sup bound.

    N0 = sup |u| over the half cylinder divided by
    r^{-(n+2)/2} ||u||_{L2(full)} + r^2 sup |f| over the full cylinder.
    """

    r: float
    t0: float
    x0: tuple[float, ...]
    N0: float
    sup_half: float
    l2_full: float
    f_sup: float


def _trace_values(u: DiscreteSolution, grid: SpaceTimeGrid, trace) -> np.ndarray:
    """(member steps, member nodes) solution values; boundary members are zero."""
    inner = grid.full_to_interior()[trace.node_indices]
    vals = np.zeros((len(trace.step_indices), len(trace.node_indices)))
    has = inner >= 0
    for row, k in enumerate(trace.step_indices):
        vals[row, has] = u.value_at(int(k))[inner[has]]
    return vals


def estimate_N0(u: DiscreteSolution, cylinders, f=None) -> list[LocalBoundednessReport]:
    """Local boundedness quotient for each past cylinder.

    f is the source bound: None, a callable (t, X) -> values, or a scalar
    expression dict; its sup is taken over the full cylinder's members.
    """
    grid = u.grid
    src = _as_spacetime_fn(grid, f)
    times = grid.times()
    reports = []
    for cyl in cylinders:
        if cyl.orientation != "-":
            raise ValueError("local boundedness uses past cylinders")
        full = cylinder_nodes(grid, cyl)
        half = cylinder_nodes(grid, cyl.shrink(0.5))
        sup_half = float(np.max(np.abs(_trace_values(u, grid, half))))
        v_full = _trace_values(u, grid, full)
        l2_full = math.sqrt(float(np.sum(v_full ** 2)) * grid.dt * grid.cell_volume)
        f_sup = 0.0
        if src is not None:
            coords = grid.node_coords()[full.node_indices]
            f_sup = max(float(np.max(np.abs(src(float(times[k]), coords))))
                        for k in full.step_indices)
        denom = cyl.r ** (-(grid.n + 2) / 2.0) * l2_full + cyl.r ** 2 * f_sup
        if denom == 0.0:
            raise ValueError(
                f"zero denominator in Q_{cyl.r:g}({cyl.t0:g}, {cyl.x0}): "
                "the solution and source both vanish there")
        reports.append(LocalBoundednessReport(
            r=cyl.r, t0=cyl.t0, x0=cyl.x0, N0=sup_half / denom,
            sup_half=sup_half, l2_full=l2_full, f_sup=f_sup))
    return reports


# ---------------------------------------------------------------------------
# level-set iteration trace
# ---------------------------------------------------------------------------

@dataclass
class DeGiorgiTrace:
    """Normalized excess sequence of the shrinking-cylinder iteration.

    radii[m-1] = r (1/2 + 2^{-m}) and levels[m-1] = k (1 - 2^{1-m}) for
    m = 1..M; Y[m-1] is the excess ||(u - k_m)_+||^2_{L2(Q_m)} normalized by
    k^2 r^{n+2}.  excess_norm_sq stores the unnormalized numerators and
    level_set_measure the discrete measures |Q_m and {u > k_{m+1}}| used by
    the exact Chebyshev inequality
    (k_{m+1} - k_m)^2 * level_set_measure[m-1] <= excess_norm_sq[m-1].
    """

    r: float
    k: float
    delta: float
    radii: tuple[float, ...]
    levels: tuple[float, ...]
    Y: tuple[float, ...]
    excess_norm_sq: tuple[float, ...]
    level_set_measure: tuple[float, ...]
    converged: bool


def threshold_level(u: DiscreteSolution, cylinder: ParabolicCylinder, *,
                    f_sup: float = 0.0, delta: float = 0.1) -> float:
    """Level k = max(r^2 f_sup, delta^{-1} r^{-(n+2)/2} ||u_+||_{L2(Q_r)})."""
    grid = u.grid
    trace = cylinder_nodes(grid, cylinder)
    pos = np.clip(_trace_values(u, grid, trace), 0.0, None)
    l2_pos = math.sqrt(float(np.sum(pos ** 2)) * grid.dt * grid.cell_volume)
    r = cylinder.r
    return max(r ** 2 * f_sup, l2_pos * r ** (-(grid.n + 2) / 2.0) / delta)


def degiorgi_trace(u: DiscreteSolution, cylinder: ParabolicCylinder, *,
                   k: float | None = None, M: int = 5, f=None,
                   delta: float = 0.1) -> DeGiorgiTrace:
    """Excess decay trace Y_1..Y_M over nested shrinking cylinders.

    With k unset, the level comes from threshold_level with the sup of f over
    the base cylinder.  The numerators are exactly non-increasing (levels
    rise while cylinders shrink), so the convergence flag only asks for rate:
    Y_M <= 10^{-2} Y_1 (or a vanishing start).
    """
    grid = u.grid
    if cylinder.orientation != "-":
        raise ValueError("the iteration runs on past cylinders")
    if M > 12:
        raise ValueError("M above 12 never adds resolvable cylinders")
    if M < 2:
        raise ValueError("need at least two iterations")
    r = cylinder.r
    if r / 2 ** M < 2.0 * grid.max_h:
        raise ValueError(
            f"cylinder under-resolved: r/2^M = {r / 2 ** M:g} is below "
            f"2 max(h) = {2.0 * grid.max_h:g}")

    src = _as_spacetime_fn(grid, f)
    if k is None:
        f_sup = 0.0
        if src is not None:
            base = cylinder_nodes(grid, cylinder)
            coords = grid.node_coords()[base.node_indices]
            times = grid.times()
            f_sup = max(float(np.max(np.abs(src(float(times[s]), coords))))
                        for s in base.step_indices)
        k = threshold_level(u, cylinder, f_sup=f_sup, delta=delta)
    k = float(k)
    if not k > 0:
        raise ValueError("the level k must be positive")

    ms = np.arange(1, M + 1)
    radii = r * (0.5 + 0.5 ** ms)
    levels = k * (1.0 - 2.0 ** (1 - ms))
    traces = [cylinder_nodes(grid, ParabolicCylinder(cylinder.t0, cylinder.x0,
                                                     float(rm), "-"))
              for rm in radii]
    weight = grid.dt * grid.cell_volume
    values = [_trace_values(u, grid, tr) for tr in traces]
    excess = [float(np.sum(np.clip(v - lv, 0.0, None) ** 2)) * weight
              for v, lv in zip(values, levels)]
    measures = [float(np.count_nonzero(values[m] > levels[m + 1])) * weight
                for m in range(M - 1)]
    Y = tuple(e / (k ** 2 * r ** (grid.n + 2)) for e in excess)
    converged = Y[0] == 0.0 or Y[-1] <= 1e-2 * Y[0]
    return DeGiorgiTrace(r=r, k=k, delta=delta, radii=tuple(float(x) for x in radii),
                         levels=tuple(float(x) for x in levels), Y=Y,
                         excess_norm_sq=tuple(excess),
                         level_set_measure=tuple(measures), converged=converged)
