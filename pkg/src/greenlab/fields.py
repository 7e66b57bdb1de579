"""Coefficient fields and structural hypothesis checks.

The operator under study is

    P u = dt u - div(A grad u + b u) + c . grad u + d u

with bounded measurable A and lower order coefficients (b, c, d) controlled
in scale-critical mixed norms.  This module provides a small closed vocabulary
of analytic coefficient expressions (so divergences are exact, not numerical),
mixed-norm quadrature, and the three structural checks a coefficient set must
pass before the solvers will trust it:

  H1  uniform ellipticity:  nu |xi|^2 <= A xi . xi  and  sum a_ij^2 <= nu^-2
  H2  drift size:           ||b - c||_{p,q} <= theta  with  n/p + 2/q = 1
  H3  sign conditions:      d - div b >= 0  and  div(b - c) >= 0  weakly

Expression grammar (JSON-compatible dicts)
------------------------------------------
scalar:
  {"kind": "const", "value": v}
  {"kind": "poly", "terms": [{"coef": c, "powers": [pt, p1, ..., pn]}]}
  {"kind": "bump", "center": [...], "width": w, "amplitude": a}
  {"kind": "checkerboard", "values": [v0, v1], "period": s}
  {"kind": "sum", "terms": [scalar, ...]}
vector:
  {"kind": "const", "value": [...]}
  {"kind": "linear", "matrix": [[...], ...]}          # v(x) = M x
  {"kind": "grad_bump", "center": [...], "width": w, "amplitude": a}
  {"kind": "curl_bump", "center": [...], "width": w, "amplitude": a}  # n = 2
  {"kind": "sum", "terms": [vector, ...]}
matrix:
  {"kind": "identity", "scale": a}
  {"kind": "const", "entries": [[...], ...]}
  {"kind": "rotated_diag", "eigenvalues": [...], "angle": theta}
  {"kind": "iso", "scalar": scalar}                   # a(t,x) * I

Every vector sampler carries an exact analytic divergence; poly terms are the
one time-dependent construct.  The bump is the standard compactly supported
mollifier profile amplitude * exp(1 - 1/(1 - rho^2)), rho = |x - center|/width.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field as dc_field

import numpy as np

from .grid import SpaceTimeGrid

_CRITICALITY_TOL = 1e-9


def _parse_exponent(v) -> float:
    if isinstance(v, str):
        if v.lower() in ("inf", "infinity"):
            return math.inf
        raise ValueError(f"bad exponent {v!r}")
    return float(v)


# ---------------------------------------------------------------------------
# scalar expressions
# ---------------------------------------------------------------------------

class ConstScalar:
    autonomous = True

    def __init__(self, value):
        self.value = float(value)

    def __call__(self, t, X):
        return np.full(len(X), self.value)


class PolyScalar:
    """Polynomial in (t, x_1, ..., x_n); autonomous iff no t powers."""

    def __init__(self, terms, n):
        self.terms = []
        for term in terms:
            powers = [int(p) for p in term["powers"]]
            if len(powers) != n + 1:
                raise ValueError(f"poly term needs {n + 1} powers (t first)")
            if any(p < 0 for p in powers):
                raise ValueError("poly powers must be nonnegative")
            self.terms.append((float(term["coef"]), powers))
        self.autonomous = all(pw[0] == 0 for _, pw in self.terms)

    def __call__(self, t, X):
        out = np.zeros(len(X))
        for coef, powers in self.terms:
            term = np.full(len(X), coef * t ** powers[0])
            for a, p in enumerate(powers[1:]):
                if p:
                    term = term * X[:, a] ** p
            out += term
        return out


class BumpScalar:
    autonomous = True

    def __init__(self, center, width, amplitude):
        self.center = np.asarray(center, dtype=float)
        self.width = float(width)
        self.amplitude = float(amplitude)
        if not self.width > 0:
            raise ValueError("bump width must be positive")

    def _u(self, X):
        d = X - self.center
        return np.sum(d * d, axis=1) / self.width ** 2

    def __call__(self, t, X):
        u = self._u(X)
        out = np.zeros(len(X))
        inside = u < 1.0
        ui = u[inside]
        out[inside] = self.amplitude * np.exp(1.0 - 1.0 / (1.0 - ui))
        return out


class CheckerboardScalar:
    """Piecewise constant, alternating on a cubic lattice of the given period."""

    autonomous = True

    def __init__(self, values, period):
        self.values = (float(values[0]), float(values[1]))
        self.period = float(period)
        if not self.period > 0:
            raise ValueError("checkerboard period must be positive")

    def __call__(self, t, X):
        parity = np.sum(np.floor(X / self.period).astype(np.int64), axis=1) % 2
        return np.where(parity == 0, self.values[0], self.values[1])


class SumScalar:
    def __init__(self, parts):
        self.parts = parts
        self.autonomous = all(p.autonomous for p in parts)

    def __call__(self, t, X):
        out = self.parts[0](t, X)
        for p in self.parts[1:]:
            out = out + p(t, X)
        return out


def build_scalar(expr: dict, n: int):
    kind = expr.get("kind")
    if kind == "const":
        return ConstScalar(expr["value"])
    if kind == "poly":
        return PolyScalar(expr["terms"], n)
    if kind == "bump":
        center = expr["center"]
        if len(center) != n:
            raise ValueError(f"bump center has {len(center)} entries, expected {n}")
        return BumpScalar(center, expr["width"], expr["amplitude"])
    if kind == "checkerboard":
        return CheckerboardScalar(expr["values"], expr["period"])
    if kind == "sum":
        return SumScalar([build_scalar(t, n) for t in expr["terms"]])
    raise ValueError(f"unknown scalar kind {kind!r}")


# ---------------------------------------------------------------------------
# vector expressions (with exact divergence)
# ---------------------------------------------------------------------------

class ConstVector:
    autonomous = True

    def __init__(self, value, n):
        self.value = np.asarray(value, dtype=float)
        if self.value.shape != (n,):
            raise ValueError(f"const vector has shape {self.value.shape}, expected ({n},)")

    def __call__(self, t, X):
        return np.broadcast_to(self.value, (len(X), len(self.value))).copy()

    def div(self, t, X):
        return np.zeros(len(X))


class LinearVector:
    """v(x) = M x, divergence = trace(M)."""

    autonomous = True

    def __init__(self, matrix, n):
        self.matrix = np.asarray(matrix, dtype=float)
        if self.matrix.shape != (n, n):
            raise ValueError(f"linear vector matrix has shape {self.matrix.shape}")

    def __call__(self, t, X):
        return X @ self.matrix.T

    def div(self, t, X):
        return np.full(len(X), float(np.trace(self.matrix)))


class GradBumpVector:
    """Gradient of the mollifier bump; divergence is its exact Laplacian."""

    autonomous = True

    def __init__(self, center, width, amplitude, n):
        self.bump = BumpScalar(center, width, amplitude)
        self.n = n

    def _pieces(self, X):
        u = self.bump._u(X)
        inside = u < 1.0
        phi = np.zeros(len(X))
        phi[inside] = np.exp(1.0 - 1.0 / (1.0 - u[inside]))
        return u, inside, phi

    def __call__(self, t, X):
        u, inside, phi = self._pieces(X)
        out = np.zeros_like(X)
        w2 = self.bump.width ** 2
        d = X[inside] - self.bump.center
        g = -phi[inside] / (1.0 - u[inside]) ** 2
        out[inside] = self.bump.amplitude * (2.0 / w2) * g[:, None] * d
        return out

    def div(self, t, X):
        u, inside, phi = self._pieces(X)
        out = np.zeros(len(X))
        w2 = self.bump.width ** 2
        ui, pi = u[inside], phi[inside]
        g = -pi / (1.0 - ui) ** 2
        gp = pi * (2.0 * ui - 1.0) / (1.0 - ui) ** 4
        out[inside] = self.bump.amplitude * ((4.0 * ui / w2) * gp + (2.0 * self.n / w2) * g)
        return out


class CurlBumpVector:
    """Rotated gradient (-d2 phi, d1 phi) of the bump; divergence-free. n = 2."""

    autonomous = True

    def __init__(self, center, width, amplitude, n):
        if n != 2:
            raise ValueError("curl_bump is only defined for n = 2")
        self.grad = GradBumpVector(center, width, amplitude, n)

    def __call__(self, t, X):
        g = self.grad(t, X)
        return np.stack([-g[:, 1], g[:, 0]], axis=1)

    def div(self, t, X):
        return np.zeros(len(X))


class SumVector:
    def __init__(self, parts):
        self.parts = parts
        self.autonomous = all(p.autonomous for p in parts)

    def __call__(self, t, X):
        out = self.parts[0](t, X)
        for p in self.parts[1:]:
            out = out + p(t, X)
        return out

    def div(self, t, X):
        out = self.parts[0].div(t, X)
        for p in self.parts[1:]:
            out = out + p.div(t, X)
        return out


class ZeroVector:
    autonomous = True

    def __init__(self, n):
        self.n = n

    def __call__(self, t, X):
        return np.zeros((len(X), self.n))

    def div(self, t, X):
        return np.zeros(len(X))


def build_vector(expr: dict | None, n: int):
    if expr is None:
        return ZeroVector(n)
    kind = expr.get("kind")
    if kind == "const":
        return ConstVector(expr["value"], n)
    if kind == "linear":
        return LinearVector(expr["matrix"], n)
    if kind == "grad_bump":
        return GradBumpVector(expr["center"], expr["width"], expr["amplitude"], n)
    if kind == "curl_bump":
        return CurlBumpVector(expr["center"], expr["width"], expr["amplitude"], n)
    if kind == "sum":
        return SumVector([build_vector(t, n) for t in expr["terms"]])
    raise ValueError(f"unknown vector kind {kind!r}")


# ---------------------------------------------------------------------------
# matrix expressions
# ---------------------------------------------------------------------------

class ConstMatrix:
    autonomous = True

    def __init__(self, entries, n):
        self.entries = np.asarray(entries, dtype=float)
        if self.entries.shape != (n, n):
            raise ValueError(f"matrix has shape {self.entries.shape}, expected ({n},{n})")

    def __call__(self, t, X):
        return np.broadcast_to(self.entries, (len(X),) + self.entries.shape).copy()


class IsoMatrix:
    """a(t, x) * I for a scalar expression a."""

    def __init__(self, scalar, n):
        self.scalar = scalar
        self.n = n
        self.autonomous = scalar.autonomous

    def __call__(self, t, X):
        vals = self.scalar(t, X)
        out = np.zeros((len(X), self.n, self.n))
        for a in range(self.n):
            out[:, a, a] = vals
        return out


def _rotation(angle: float, n: int) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    if n == 1:
        return np.array([[1.0]])
    R = np.eye(n)
    R[0, 0], R[0, 1], R[1, 0], R[1, 1] = c, -s, s, c
    return R


def build_matrix(expr: dict | None, n: int):
    if expr is None:
        return ConstMatrix(np.eye(n), n)
    kind = expr.get("kind")
    if kind == "identity":
        return ConstMatrix(float(expr.get("scale", 1.0)) * np.eye(n), n)
    if kind == "const":
        return ConstMatrix(expr["entries"], n)
    if kind == "rotated_diag":
        eig = np.asarray(expr["eigenvalues"], dtype=float)
        if eig.shape != (n,):
            raise ValueError(f"rotated_diag needs {n} eigenvalues")
        R = _rotation(float(expr.get("angle", 0.0)), n)
        return ConstMatrix(R @ np.diag(eig) @ R.T, n)
    if kind == "iso":
        return IsoMatrix(build_scalar(expr["scalar"], n), n)
    raise ValueError(f"unknown matrix kind {kind!r}")


# ---------------------------------------------------------------------------
# the coefficient field
# ---------------------------------------------------------------------------

@dataclass
class CoefficientField:
    """The full coefficient set (A, b, c, d) plus its declared control constants.

    nu is the ellipticity constant of H1, theta the drift budget of H2, and
    (p, q) the mixed-norm exponents, which must satisfy n/p + 2/q = 1.
    """

    n: int
    a: object
    b: object
    c: object
    d: object
    nu: float
    theta: float
    p: float
    q: float
    metadata: dict = dc_field(default_factory=dict)

    def __post_init__(self):
        if not 0 < self.nu < 1:
            raise ValueError("nu must lie in (0, 1)")
        if self.theta < 0:
            raise ValueError("theta must be nonnegative")
        if not (2 <= self.p <= math.inf and 2 <= self.q <= math.inf):
            raise ValueError("exponents must lie in [2, inf]")
        defect = (self.n / self.p if math.isfinite(self.p) else 0.0) \
            + (2.0 / self.q if math.isfinite(self.q) else 0.0) - 1.0
        if abs(defect) > _CRITICALITY_TOL:
            raise ValueError(
                f"exponents (p={self.p}, q={self.q}) violate n/p + 2/q = 1 "
                f"(defect {defect:+.3e})")

    @property
    def autonomous(self) -> bool:
        return all(s.autonomous for s in (self.a, self.b, self.c, self.d))

    def signature(self) -> str:
        """Stable short hash of the defining expressions."""
        payload = json.dumps(self.metadata, sort_keys=True, default=str)
        extra = f"|n={self.n}|nu={self.nu}|theta={self.theta}|p={self.p}|q={self.q}"
        return hashlib.sha256((payload + extra).encode()).hexdigest()[:16]


def build_coefficients(config: dict, n: int) -> CoefficientField:
    """Construct a CoefficientField from its expression dictionary.

    Expected keys: a, b, c, d (expressions or absent), nu, theta, p, q.
    Absent b/c/d mean zero; absent a means the identity.
    """
    p = _parse_exponent(config.get("p", "inf"))
    q = _parse_exponent(config.get("q", 2.0))
    return CoefficientField(
        n=n,
        a=build_matrix(config.get("a"), n),
        b=build_vector(config.get("b"), n),
        c=build_vector(config.get("c"), n),
        d=build_scalar(config.get("d", {"kind": "const", "value": 0.0}), n),
        nu=float(config.get("nu", 0.5)),
        theta=float(config.get("theta", 0.0)),
        p=p,
        q=q,
        metadata={k: config.get(k) for k in ("a", "b", "c", "d")},
    )


# ---------------------------------------------------------------------------
# mixed norms
# ---------------------------------------------------------------------------

def mixed_norm(fn, p: float, q: float, grid: SpaceTimeGrid, vector: bool = False) -> float:
    """L_q in time of the L_p in space norm, by midpoint quadrature.

    Space is sampled at cell centers, time at step midpoints; infinite
    exponents take the max over samples.  Vector samplers are reduced by the
    Euclidean norm pointwise.
    """
    if p < 1 or q < 1:
        raise ValueError("exponents must be >= 1")
    centers = grid.cell_centers()
    vol = grid.cell_volume

    def space_norm(t):
        vals = fn(t, centers)
        mag = np.linalg.norm(vals, axis=1) if vector else np.abs(vals)
        if math.isinf(p):
            return float(np.max(mag))
        return float((np.sum(mag ** p) * vol) ** (1.0 / p))

    autonomous = getattr(fn, "autonomous", False)
    span = grid.t_end - grid.t_start
    if autonomous:
        s = space_norm(grid.t_start)
        return s if math.isinf(q) else s * span ** (1.0 / q)
    t_mid = grid.t_start + (np.arange(grid.num_steps) + 0.5) * grid.dt
    norms = np.array([space_norm(t) for t in t_mid])
    if math.isinf(q):
        return float(np.max(norms))
    return float((np.sum(norms ** q) * grid.dt) ** (1.0 / q))


# ---------------------------------------------------------------------------
# hypothesis checks
# ---------------------------------------------------------------------------

@dataclass
class HypothesisReport:
    """Outcome of the three structural checks on a coefficient field."""

    min_ellipticity: float
    max_frobenius_sq: float
    h1_passed: bool
    drift_norm: float
    h2_passed: bool
    min_d_minus_div_b: float
    min_div_b_minus_c: float
    h3_passed: bool
    nu: float
    theta: float

    @property
    def passed(self) -> bool:
        return self.h1_passed and self.h2_passed and self.h3_passed

    def rows(self) -> list[tuple[str, float, float, bool]]:
        """(name, value, threshold, pass) rows for CSV export."""
        return [
            ("H1_min_ellipticity", self.min_ellipticity, self.nu, self.h1_passed),
            ("H1_max_frobenius_sq", self.max_frobenius_sq, self.nu ** -2, self.h1_passed),
            ("H2_drift_mixed_norm", self.drift_norm, self.theta, self.h2_passed),
            ("H3_min_d_minus_div_b", self.min_d_minus_div_b, 0.0, self.h3_passed),
            ("H3_min_div_b_minus_c", self.min_div_b_minus_c, 0.0, self.h3_passed),
        ]


def _sample_times(field: CoefficientField, grid: SpaceTimeGrid, limit: int = 16) -> np.ndarray:
    if field.autonomous:
        return np.array([grid.t_start])
    t = grid.times()
    if len(t) > limit:
        t = t[np.linspace(0, len(t) - 1, limit).astype(int)]
    return t


def _probe_directions(n: int, count: int, rng) -> np.ndarray:
    probes = [np.eye(n)[a] for a in range(n)]
    diag = np.ones(n) / math.sqrt(n)
    probes.append(diag)
    while len(probes) < count:
        v = rng.standard_normal(n)
        norm = np.linalg.norm(v)
        if norm > 1e-12:
            probes.append(v / norm)
    return np.array(probes[:count])


def check_H1(field: CoefficientField, grid: SpaceTimeGrid,
             num_probes: int = 8, seed: int = 0) -> tuple[float, float, bool]:
    """Sampled ellipticity and Frobenius bounds.

    Returns (min Rayleigh quotient, max squared Frobenius norm, passed).
    Sample points are all grid nodes at up to 16 representative times; probe
    directions are the axes, the main diagonal, and random unit vectors.
    """
    rng = np.random.default_rng(seed)
    probes = _probe_directions(field.n, max(num_probes, field.n + 1), rng)
    pts = grid.node_coords()
    min_ratio = math.inf
    max_frob = -math.inf
    for t in _sample_times(field, grid):
        A = field.a(t, pts)
        frob = np.sum(A * A, axis=(1, 2))
        max_frob = max(max_frob, float(np.max(frob)))
        for xi in probes:
            quad = np.einsum("i,kij,j->k", xi, A, xi)
            min_ratio = min(min_ratio, float(np.min(quad)))
    ok = (min_ratio >= field.nu - 1e-12) and (max_frob <= field.nu ** -2 + 1e-12)
    return min_ratio, max_frob, ok


def check_H2(field: CoefficientField, grid: SpaceTimeGrid) -> tuple[float, bool]:
    """Mixed-norm size of b - c against the declared theta."""

    class _Diff:
        autonomous = field.b.autonomous and field.c.autonomous

        def __call__(self, t, X):
            return field.b(t, X) - field.c(t, X)

    norm = mixed_norm(_Diff(), field.p, field.q, grid, vector=True)
    ok = norm <= field.theta * (1.0 + 1e-9) + 1e-15
    return norm, ok


def check_H3(field: CoefficientField, grid: SpaceTimeGrid,
             tol: float | None = None) -> tuple[float, float, bool]:
    """Weak sign conditions tested against every interior hat function.

    For each interior node test function phi the two functionals

        int (d phi + b . grad phi)   = int (d - div b) phi     (>= 0)
        int -(b - c) . grad phi      = int div(b - c) phi      (>= 0)

    are evaluated through the exact analytic divergences the coefficient
    vocabulary carries, with one-point (cell center) quadrature for the
    remaining integral.  Exactly divergence-free drifts therefore test as
    exactly zero instead of picking up gradient-quadrature noise.  Returns the
    two minima and the pass flag; both minima must be >= -tol, with tol scaled
    to the cell volume.
    """
    if tol is None:
        tol = 1e-10 * grid.cell_volume
    centers = grid.cell_centers()
    min_first = math.inf
    min_second = math.inf
    for t in _sample_times(field, grid):
        first = field.d(t, centers) - field.b.div(t, centers)
        second = field.b.div(t, centers) - field.c.div(t, centers)
        min_first = min(min_first, _hat_mass_min(grid, first))
        min_second = min(min_second, _hat_mass_min(grid, second))
    ok = (min_first >= -tol) and (min_second >= -tol)
    return min_first, min_second, ok


def _hat_mass_min(grid: SpaceTimeGrid, cell_vals: np.ndarray) -> float:
    """min over interior hats phi of int g phi, g given at cell centers.

    The hat's value at any adjacent cell center is 2^-n, so the functional is
    the 2^n-cell box sum of g around each interior node times 2^-n * cellvol.
    """
    n = grid.n
    weight = 0.5 ** n * grid.cell_volume
    out = np.zeros(grid.interior_shape)
    g = cell_vals.reshape(grid.cells)
    for bits in range(2 ** n):
        offs = [(bits >> a) & 1 for a in range(n)]
        sl = tuple(slice(o, grid.cells[a] - 1 + o) for a, o in enumerate(offs))
        out += weight * g[sl]
    return float(out.min())


def check_hypotheses(field: CoefficientField, grid: SpaceTimeGrid,
                     seed: int = 0) -> HypothesisReport:
    """Run H1, H2, H3 and collect everything in one report."""
    min_ell, max_frob, ok1 = check_H1(field, grid, seed=seed)
    norm, ok2 = check_H2(field, grid)
    m1, m2, ok3 = check_H3(field, grid)
    return HypothesisReport(
        min_ellipticity=min_ell, max_frobenius_sq=max_frob, h1_passed=ok1,
        drift_norm=norm, h2_passed=ok2,
        min_d_minus_div_b=m1, min_div_b_minus_c=m2, h3_passed=ok3,
        nu=field.nu, theta=field.theta)
