"""Exponentially weighted energy estimates.

The decay of the fundamental solution away from its pole can be extracted
from how the twisted energy I(t) = ||exp(psi) u(t)||^2 grows when the
initial data is damped by exp(-psi).  For a Lipschitz weight psi with
|D psi| <= gamma1 and |D^2 psi| <= gamma2 the growth rate is controlled by
two constants (lambda, mu) depending only on the ellipticity nu, the drift
size theta and the embedding constant cn:

    I(t) <= prefactor * exp(2 (lambda gamma1^2 + mu gamma2) (t - s)) I(s).

Optimising the bound over gamma1 turns the envelope into a Gaussian in
|x - y|^2 / (t - s) with decay rate 1 / (4 lambda).
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from .bounds import admitted_samples, fit_gaussian
from .fields import CoefficientField
from .grid import SpaceTimeGrid
from .green import GreenKernel
from .solver import NumericalAbort, march, _as_space_values

LN4 = math.log(4.0)

REGIME_CRITICAL = "p=n"
REGIME_SUBCRITICAL = "p>n"
_REGIMES = (REGIME_CRITICAL, REGIME_SUBCRITICAL)


@dataclass(frozen=True)
class WeightFunction:
    """Lipschitz exponential weight psi with certified derivative bounds.

    kind "linear" is psi(x) = gamma1 * (e . x) with gamma2 = 0; kind
    "capped" saturates at +-cap via psi(x) = cap * tanh(gamma1 (e . x) / cap),
    keeping |D psi| <= gamma1 while bounding the Hessian by
    4 gamma1^2 / (3 sqrt(3) cap).
    """

    gamma1: float
    direction: tuple
    kind: str = "linear"
    cap: float = math.inf

    def __post_init__(self):
        if self.kind not in ("linear", "capped"):
            raise ValueError(f"unknown weight kind {self.kind!r}")
        if self.gamma1 < 0:
            raise ValueError("gamma1 must be non-negative")
        e = np.asarray(self.direction, dtype=float)
        norm = float(np.linalg.norm(e))
        if norm == 0.0:
            raise ValueError("direction must be a nonzero vector")
        object.__setattr__(self, "direction", tuple(e / norm))
        if self.kind == "capped" and not (0.0 < self.cap < math.inf):
            raise ValueError("capped weight needs a finite positive cap")

    @property
    def gamma2(self) -> float:
        """Certified sup-norm bound on the Hessian of psi."""
        if self.kind == "linear":
            return 0.0
        # worst case of |d^2/ds^2 cap tanh(g s / cap)| over s, attained
        # where tanh = 1/sqrt(3)
        return 4.0 * self.gamma1 ** 2 / (3.0 * math.sqrt(3.0) * self.cap)

    def __call__(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        s = pts @ np.asarray(self.direction)
        if self.kind == "linear":
            out = self.gamma1 * s
        else:
            out = self.cap * np.tanh(self.gamma1 * s / self.cap)
        return out if np.ndim(points) > 1 else float(out[0])

    def reflected(self) -> "WeightFunction":
        """Weight with the direction reversed (psi -> psi(-x) mirror)."""
        return dataclasses.replace(
            self, direction=tuple(-c for c in self.direction))


@dataclass(frozen=True)
class RateConstants:
    """Growth-rate constants for the weighted energy envelope.

    In the critical regime ("p=n") both lambda and mu are active and the
    prefactor is 1.  In the subcritical regime ("p>n") the constant is
    assembled from a window-doubling argument: mu is folded into lambda,
    the reported mu is 0 and the prefactor is 4.
    """

    regime: str
    nu: float
    theta: float
    cn: float
    lam: float
    mu: float

    @property
    def prefactor(self) -> float:
        return 4.0 if self.regime == REGIME_SUBCRITICAL else 1.0

    def rate(self, gamma1: float, gamma2: float = 0.0) -> float:
        """Exponent coefficient: I(t) <= pref * exp(2 rate (t-s)) I(s)."""
        return self.lam * gamma1 ** 2 + self.mu * gamma2

    def delta_window(self, gamma1: float = 1.0) -> float:
        """Length of one doubling window in the subcritical derivation.

        Over each window of this length the weighted energy at most
        quadruples; chaining windows yields the exponential envelope.
        Only meaningful for the "p>n" regime.
        """
        if self.regime != REGIME_SUBCRITICAL:
            raise ValueError("doubling windows exist only in the p>n regime")
        if gamma1 <= 0:
            raise ValueError("gamma1 must be positive for a finite window")
        num = (3.0 - 2.0 * self.nu) * self.nu ** 3
        den = 4.0 * (self.nu ** 4 + 4.0 * self.theta ** 2 * self.nu ** 2
                     + 4.0) * gamma1 ** 2
        return num / den


def compute_rates(nu: float, theta: float, regime: str = REGIME_SUBCRITICAL,
                  cn: float = 1.0) -> RateConstants:
    """Evaluate the envelope constants from (nu, theta).

    nu may equal 1.0 exactly (the isotropic limit of the admissible range),
    which is convenient for calibration runs against the heat kernel.
    """
    if not 0.0 < nu <= 1.0:
        raise ValueError("nu must lie in (0, 1]")
    if theta < 0.0:
        raise ValueError("theta must be non-negative")
    if regime not in _REGIMES:
        raise ValueError(f"regime must be one of {_REGIMES}")
    if regime == REGIME_CRITICAL:
        if cn <= 0.0:
            raise ValueError("cn must be positive in the critical regime")
        lam = 2.0 / nu ** 3 + cn ** 2 * theta ** 2 / (2.0 * nu) + cn * theta
        mu = cn * theta / 2.0
    else:
        lam = (2.0 * (nu ** 4 + 4.0 * theta ** 2 * nu ** 2 + 4.0) * LN4
               / ((3.0 - 2.0 * nu) * nu ** 3))
        mu = 0.0
    return RateConstants(regime=regime, nu=nu, theta=theta, cn=cn,
                         lam=lam, mu=mu)


@dataclass(frozen=True)
class DaviesReport:
    """Weighted energy trajectory and, once checked, its envelope verdict."""

    times: np.ndarray
    energy: np.ndarray
    anchor_time: float
    gamma1: float
    gamma2: float
    backward: bool = False
    lam: float = None
    mu: float = None
    worst_ratio: float = None
    envelope_ok: bool = None

    @property
    def anchor_energy(self) -> float:
        idx = int(np.argmin(np.abs(self.times - self.anchor_time)))
        return float(self.energy[idx])

    def gaps(self) -> np.ndarray:
        """Elapsed time from the anchor (where the damped data is loaded)."""
        return np.abs(self.times - self.anchor_time)

    def envelope_values(self) -> np.ndarray:
        if self.lam is None:
            raise ValueError("run check_envelope first")
        rate = self.lam * self.gamma1 ** 2 + self.mu * self.gamma2
        return self.anchor_energy * np.exp(2.0 * rate * self.gaps())

    def rows(self):
        """(t, I, envelope, ratio) rows; envelope columns need a check."""
        if self.lam is None:
            env = np.full_like(self.energy, np.nan)
        else:
            env = self.envelope_values()
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(env > 0, self.energy / env, 0.0)
        return list(zip(self.times.tolist(), self.energy.tolist(),
                        env.tolist(), ratio.tolist()))


def evolve_weighted_energy(field: CoefficientField, grid: SpaceTimeGrid,
                           weight: WeightFunction, data, *, start=None,
                           backward: bool = False,
                           rtol: float = 1e-10) -> DaviesReport:
    """March exp(-psi) * data and record I(t) = vol * sum exp(2 psi) u^2.

    Forward runs load the damped data at `start` (default: the initial
    time) and integrate to the final time; backward runs load it at
    `start` (default: the final time) and transpose-march to the initial
    time, probing the adjoint kernel instead.
    """
    pts = grid.interior_coords()
    psi = np.asarray(weight(pts), dtype=float)
    f_vals = _as_space_values(grid, data)
    u0 = np.exp(-psi) * f_vals

    if backward:
        first = grid.num_steps if start is None else grid.nearest_step(start)
        if first < 1:
            raise ValueError("backward run needs a positive start time")
    else:
        first = 0 if start is None else grid.nearest_step(start)
        if first >= grid.num_steps:
            raise ValueError("forward run needs start before the final time")

    sol = march(field, grid, u0, direction="backward" if backward
                else "forward", transpose=backward, first_step=first,
                rtol=rtol)

    with np.errstate(over="ignore", invalid="ignore"):
        wsq = np.exp(2.0 * psi)
        energy = grid.cell_volume * (sol.values.astype(float) ** 2) @ wsq
    if not np.all(np.isfinite(energy)):
        raise NumericalAbort(
            f"weighted energy overflowed at gamma1={weight.gamma1:g}; "
            "shrink gamma1 or cap the weight")
    times = sol.step_times()
    anchor = times[-1] if backward else times[0]
    return DaviesReport(times=times, energy=energy, anchor_time=float(anchor),
                        gamma1=weight.gamma1, gamma2=weight.gamma2,
                        backward=backward)


def check_envelope(report: DaviesReport, rates: RateConstants, *,
                   prefactor: float = None,
                   slack: float = 0.1) -> DaviesReport:
    """Compare a trajectory against its exponential envelope.

    The verdict allows `slack` relative overshoot on top of the regime
    prefactor, absorbing time-discretisation error near the anchor.
    """
    pref = rates.prefactor if prefactor is None else float(prefactor)
    rate = rates.rate(report.gamma1, report.gamma2)
    gaps = report.gaps()
    anchor_energy = report.anchor_energy
    if anchor_energy == 0.0:
        worst = 0.0 if np.all(report.energy == 0.0) else math.inf
    else:
        envelope = anchor_energy * np.exp(2.0 * rate * gaps)
        worst = float(np.max(report.energy / envelope))
    return dataclasses.replace(report, lam=rates.lam, mu=rates.mu,
                               worst_ratio=worst,
                               envelope_ok=bool(worst <= pref * (1.0 + slack)))


@dataclass(frozen=True)
class WindowReport:
    """Per-window energy growth for the subcritical doubling argument."""

    delta: float
    boundaries: tuple
    ratios: tuple
    passed: bool


def window_doubling(report: DaviesReport, rates: RateConstants, *,
                    slack: float = 0.1) -> WindowReport:
    """Check I(t + delta) <= 4 I(t) on consecutive windows of length delta.

    This is the elementary step behind the subcritical envelope: the
    window length is chosen so one window at most quadruples the weighted
    energy.  The final window may be partial; the bound still applies.
    """
    delta = rates.delta_window(report.gamma1)
    gaps = report.gaps()
    order = np.argsort(gaps)
    g = gaps[order]
    energy = report.energy[order]
    gmax = float(g[-1])
    edges = [j * delta for j in range(int(gmax / delta) + 1)]
    if gmax - edges[-1] > 1e-12 * max(delta, 1.0):
        edges.append(gmax)
    if len(edges) < 2:
        edges = [0.0, gmax]
    idx = [int(np.argmin(np.abs(g - e))) for e in edges]
    values = [float(energy[i]) for i in idx]
    ratios = []
    for lo, hi in zip(values[:-1], values[1:]):
        ratios.append(math.inf if lo == 0.0 and hi > 0.0 else
                      (0.0 if lo == 0.0 else hi / lo))
    ok = all(r <= 4.0 * (1.0 + slack) for r in ratios)
    return WindowReport(delta=delta,
                        boundaries=tuple(float(g[i]) for i in idx),
                        ratios=tuple(ratios), passed=ok)


@dataclass(frozen=True)
class WeightedOffdiagReport:
    """Pointwise kernel values against the optimised weighted envelope.

    samples holds one row per admitted kernel sample:
    (gap, dist, value, best_gamma, bound).
    """

    kappa_davies: float
    gamma_grid: tuple
    num_samples: int
    num_violations: int
    passed: bool
    samples: np.ndarray


def offdiag_from_weights(kernel: GreenKernel, gamma_grid,
                         rates: RateConstants, *, C: float = None,
                         **filter_kwargs) -> WeightedOffdiagReport:
    """Dominate kernel samples by the weighted envelope, optimised in gamma1.

    For a linear weight aligned with x - y the envelope reads

        |G| <= C gap^(-n/2) exp(g sqrt(2 gap) + lam g^2 gap - g |x - y|)

    for every g in the grid; each sample is tested against the tightest
    choice.  C defaults to the one-sided Gaussian fit of the same kernel
    under the same sample filters.  The implied large-distance Gaussian
    rate is kappa_davies = 1 / (4 lam).
    """
    gammas = np.asarray(sorted(set(float(g) for g in np.atleast_1d(
        np.asarray(gamma_grid, dtype=float)))))
    if gammas.size == 0:
        raise ValueError("gamma grid is empty")
    if np.any(gammas < 0.0):
        raise ValueError("gamma grid entries must be non-negative")
    samples = admitted_samples(kernel, **filter_kwargs)
    if C is None:
        C = fit_gaussian(kernel, **filter_kwargs).C
    gap, dist, vals = samples[:, 0], samples[:, 1], samples[:, 2]
    n = kernel.grid.n
    # exponent of the envelope for each (sample, gamma) pair
    expo = (gammas[None, :] * (np.sqrt(2.0 * gap)[:, None] - dist[:, None])
            + rates.lam * gammas[None, :] ** 2 * gap[:, None])
    bounds = C * gap[:, None] ** (-0.5 * n) * np.exp(expo)
    best = np.argmin(bounds, axis=1)
    best_bound = bounds[np.arange(len(gap)), best]
    best_gamma = gammas[best]
    violations = int(np.count_nonzero(vals > best_bound))
    rows = np.column_stack([gap, dist, vals, best_gamma, best_bound])
    return WeightedOffdiagReport(
        kappa_davies=1.0 / (4.0 * rates.lam), gamma_grid=tuple(gammas),
        num_samples=len(gap), num_violations=violations,
        passed=violations == 0, samples=rows)
