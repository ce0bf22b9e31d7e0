"""Excess cost of perturbing an optimised drift, and value identities built on it.

A perturbation K shares the noise of the base ensemble, so (Z, K) is a
coupling realised sample by sample. For the quartic model the excess
    H(K) = 2E(Z, K) + E(K) + V(Y + K) - V(Y)
is assembled from the enhancement by binomial expansion of [[(W + Z + K)^4]];
for the exponential model both the raw difference and the form that uses
first-order stationarity are available.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .control import (
    ControlledEnsemble,
    ControlProblem,
    DriftParameters,
    OptimizationResult,
    OptimizerConfig,
    TestControl,
    bilinear_energy,
    energy,
    first_order_guess,
    optimize,
    simulate,
)
from .gff import EnhancedGFFPath, gmc_density
from .interactions import InteractionSpec
from .lattice import LatticeSpec, apply_spectral, inner
from .observables import Functional, LinearFunctional, ZeroFunctional, bump
from .stats import Estimate, mean_se


@dataclass
class PerturbedEnsemble:
    """Base ensemble at theta plus a perturbation path on the same noise."""

    base: ControlledEnsemble
    K: np.ndarray  # (N, n_t + 1, L, L)

    def __post_init__(self):
        if self.K.shape != self.base.Z.shape:
            raise ValueError("perturbation path must match the drift path shape")
        if np.any(self.K[:, 0] != 0):
            raise ValueError("perturbation must start at zero")

    @classmethod
    def from_control(cls, ce: ControlledEnsemble, K: TestControl) -> "PerturbedEnsemble":
        return cls(ce, np.ascontiguousarray(K.path(ce)))

    @property
    def problem(self) -> ControlProblem:
        return self.base.problem

    @property
    def perturbed(self) -> np.ndarray:
        return self.base.Z + self.K

    def energy_terms(self) -> np.ndarray:
        p = self.problem
        return 2.0 * bilinear_energy(self.base.Z, self.K, p.spec, p.grid) + energy(self.K, p.spec, p.grid)


def _phi4_excess(spec: LatticeSpec, enh, Z1: np.ndarray, K1: np.ndarray, ispec: InteractionSpec) -> np.ndarray:
    W, w2, w3 = enh.W, enh.wick2, enh.wick3
    cube = w3 + 3 * w2 * Z1 + 3 * W * Z1**2 + Z1**3
    square = w2 + 2 * W * Z1 + Z1**2
    Y = W + Z1
    dens = 4 * cube * K1 + 6 * square * K1**2 + 4 * Y * K1**3 + K1**4
    return ispec.lam * spec.cell * np.sum(ispec.mask(spec) * dens, axis=(-2, -1))


def h_tilde_phi4_samples(pe: PerturbedEnsemble) -> np.ndarray:
    p = pe.problem
    ispec = p.interaction
    if ispec.kind != "phi4":
        raise ValueError("quartic excess needs a phi4 interaction")
    enh = pe.base.paths.enhanced(p.grid.n_t).scaled(p.hbar)
    pot = _phi4_excess(p.spec, enh, pe.base.Z[:, -1], pe.K[:, -1], ispec) if ispec.active else 0.0
    return pe.energy_terms() + pot


def h_tilde_phi4(pe: PerturbedEnsemble) -> Estimate:
    return mean_se(h_tilde_phi4_samples(pe))


@dataclass
class ExpExcess:
    raw: Estimate
    simplified: Estimate
    difference: Estimate  # paired raw - simplified
    min_simplified_sample: float


def _exp_terms(pe: PerturbedEnsemble):
    p = pe.problem
    spec, ispec = p.spec, p.interaction
    if ispec.kind != "exponential":
        raise ValueError("exponential excess needs an exponential interaction")
    enh = pe.base.paths.enhanced(p.grid.n_t).scaled(p.hbar)
    M = gmc_density(spec, enh.W, ispec.beta, enh.sigma2)
    Z1, K1 = pe.base.Z[:, -1], pe.K[:, -1]
    b = ispec.beta
    bz, bk = b * Z1, b * K1
    if np.max(bz + np.maximum(bk, 0)) > 700:
        raise FloatingPointError("exp(beta (Z + K)) overflows")
    w = ispec.lam * spec.cell * ispec.mask(spec) * M * np.exp(bz)
    raw_pot = np.sum(w * np.expm1(bk), axis=(-2, -1))
    # expm1(x) - x loses digits for tiny x; a short series keeps it non-negative
    small = np.abs(bk) < 1e-3
    conv = np.where(small, bk**2 / 2 * (1 + bk / 3 * (1 + bk / 4)), np.expm1(bk) - bk)
    simp_pot = np.sum(w * np.maximum(conv, 0.0), axis=(-2, -1))
    raw = pe.energy_terms() + raw_pot
    simp = energy(pe.K, spec, p.grid) + simp_pot
    return raw, simp


def h_tilde_exp_samples(pe: PerturbedEnsemble) -> tuple[np.ndarray, np.ndarray]:
    return _exp_terms(pe)


def h_tilde_exp(pe: PerturbedEnsemble) -> ExpExcess:
    raw, simp = _exp_terms(pe)
    return ExpExcess(mean_se(raw), mean_se(simp), mean_se(raw - simp), float(np.min(simp)))


def h_tilde(pe: PerturbedEnsemble) -> Estimate:
    kind = pe.problem.interaction.kind
    if kind == "phi4":
        return h_tilde_phi4(pe)
    if kind == "exponential":
        return h_tilde_exp(pe).raw
    if kind == "none" or not pe.problem.interaction.active:
        return mean_se(pe.energy_terms())
    raise ValueError(f"no excess functional for {kind!r}")


def _h_tilde_samples(pe: PerturbedEnsemble) -> np.ndarray:
    kind = pe.problem.interaction.kind
    if not pe.problem.interaction.active:
        return pe.energy_terms()
    if kind == "phi4":
        return h_tilde_phi4_samples(pe)
    if kind == "exponential":
        return _exp_terms(pe)[0]
    raise ValueError(f"no excess functional for {kind!r}")


def random_bump_controls(spec: LatticeSpec, n: int, seed: int, amplitude: float = 0.5):
    """Deterministic K_t = t * bump with random centre, radius and sign."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        center = tuple(int(c) for c in rng.integers(0, spec.L, size=2))
        radius = spec.side * rng.uniform(0.15, 0.35)
        amp = amplitude * rng.choice([-1.0, 1.0]) * rng.uniform(0.5, 1.0)
        out.append(TestControl("deterministic", f"bump_{i}", bump(spec, radius, center, amp)))
    return out


# ---------------------------------------------------- value identities


@dataclass
class VariationalSetup:
    """Everything needed to solve control problems for several observables.

    Coefficients are fitted on ``train`` and every reported number is
    evaluated on the independent ``evaluate`` ensemble.
    """

    spec: LatticeSpec
    grid: object
    interaction: InteractionSpec
    train: EnhancedGFFPath
    evaluate: EnhancedGFFPath
    cfg: OptimizerConfig = field(default_factory=OptimizerConfig)
    _solved: dict = field(default_factory=dict, repr=False)

    def problem(self, f: Functional | None = None) -> ControlProblem:
        return ControlProblem(self.spec, self.grid, self.interaction, f or ZeroFunctional())

    def solve(self, f: Functional | None = None, key=None, theta0: DriftParameters | None = None) -> "Solution":
        """Optimise the f + V problem; ``key`` caches the answer."""
        if key is not None and key in self._solved:
            return self._solved[key]
        problem = self.problem(f)
        if theta0 is None:
            theta0 = first_order_guess(problem)
        else:
            theta0 = theta0.adapt(problem)
        res = optimize(problem, theta0, self.train, self.cfg)
        sol = Solution(problem, res, simulate(problem, res.theta, self.evaluate))
        if key is not None:
            self._solved[key] = sol
        return sol

    def base(self) -> "Solution":
        return self.solve(None, key="__base__")


@dataclass
class Solution:
    problem: ControlProblem
    result: OptimizationResult
    ce: ControlledEnsemble

    @property
    def theta(self) -> DriftParameters:
        return self.result.theta

    def observable_mean(self, f: Functional) -> Estimate:
        return mean_se(f.value(self.problem.spec, self.ce.Y1))


def _paired(a: np.ndarray, b: np.ndarray) -> Estimate:
    return mean_se(a - b)


@dataclass
class TwoWayReport:
    via_difference: Estimate
    via_perturbation: Estimate
    gap: Estimate

    @property
    def passed(self) -> bool:
        return abs(self.gap.value) <= 3 * self.gap.se or self.gap.value == 0


def two_way_value(f: Functional, setup: VariationalSetup) -> TwoWayReport:
    """Value of f under the interacting measure, computed two ways.

    ``via_difference`` optimises f + V from scratch and subtracts the V-only
    optimum. ``via_perturbation`` keeps the V-only drift fixed and optimises
    an additive perturbation K in the same feature family (coefficients
    start from the base drift), then evaluates E[f(Y + K)] + H(K) with the
    excess assembled term by term.
    """
    base = setup.base()
    fresh = setup.solve(f, key=("fresh", id(f)))
    via_diff = _paired(fresh.ce.values, base.ce.values)

    problem = setup.problem(f)
    res = optimize(problem, base.theta.adapt(problem), setup.train, setup.cfg)
    shifted = simulate(problem, res.theta, setup.evaluate)
    pe = PerturbedEnsemble(base.ce, shifted.Z - base.ce.Z)
    fv = f.value(setup.spec, pe.base.Y1 + pe.K[:, -1])
    per = fv + _h_tilde_samples(pe)
    via_pert = mean_se(per)
    gap = _paired(fresh.ce.values - base.ce.values, per)
    return TwoWayReport(via_diff, via_pert, gap)


@dataclass
class SandwichReport:
    lower: Estimate
    middle: Estimate
    upper: Estimate

    @property
    def passed(self) -> bool:
        ok_low = self.lower.value <= self.middle.value + 3 * math.hypot(self.lower.se, self.middle.se)
        ok_up = self.middle.value <= self.upper.value + 3 * math.hypot(self.middle.se, self.upper.se)
        return ok_low and ok_up


def sandwich_check(f: Functional, setup: VariationalSetup) -> SandwichReport:
    """E_{f+V}[f] <= value of f <= E_V[f], each side from its optimised drift."""
    base = setup.base()
    tilted = setup.solve(f, key=("fresh", id(f)))
    lower = tilted.observable_mean(f)
    middle = _paired(tilted.ce.values, base.ce.values)
    upper = base.observable_mean(f)
    return SandwichReport(lower, middle, upper)


@dataclass
class DerivativeReport:
    alphas: np.ndarray
    values: list  # value of alpha f, per alpha
    means: list  # E_{alpha f + V}[f], per alpha
    fd_rows: list  # (alpha, fd, mean, z, bias_bound)
    integral: Estimate
    endpoint: Estimate
    integral_bias: float

    @property
    def integral_gap(self) -> Estimate:
        return Estimate(self.integral.value - self.endpoint.value, math.hypot(self.integral.se, self.endpoint.se))

    @property
    def passed(self) -> bool:
        rows_ok = all(abs(r[1] - r[2]) <= 3 * r[5] + r[4] for r in self.fd_rows)
        g = self.integral_gap
        return rows_ok and abs(g.value) <= 3 * g.se + self.integral_bias


def derivative_identity(f: Functional, alpha_grid, setup: VariationalSetup) -> DerivativeReport:
    """d/dalpha of the value of alpha f against E_{alpha f + V}[f].

    Central differences are compared at interior grid points; the integral
    of the means over [0, 1] (trapezoid) is compared with the value at
    alpha = 1. Bias bounds use second differences of the computed curves.
    Solves are warm-started along the grid.
    """
    alphas = np.asarray(alpha_grid, dtype=float)
    if alphas.size < 3 or np.any(np.diff(alphas) <= 0):
        raise ValueError("alpha grid needs at least three increasing points")
    base = setup.base()
    vals, means, per_vals = [], [], []
    theta = base.theta
    for a in alphas:
        if a == 0:
            sol = base
        else:
            sol = setup.solve(f.scaled(a), key=("alpha", id(f), float(a)), theta0=theta)
            theta = sol.theta
        per_vals.append(sol.ce.values - base.ce.values)
        vals.append(mean_se(per_vals[-1]) if a != 0 else Estimate(0.0, 0.0))
        means.append(sol.observable_mean(f))

    v = np.array([x.value for x in vals])
    rows = []
    for i in range(1, alphas.size - 1):
        h1, h2 = alphas[i] - alphas[i - 1], alphas[i + 1] - alphas[i]
        fd_samples = (per_vals[i + 1] - per_vals[i - 1]) / (h1 + h2)
        fd = mean_se(fd_samples)
        # third-derivative proxy from the mean curve bounds the stencil error
        m = np.array([x.value for x in means])
        curv = abs(m[i + 1] - 2 * m[i] + m[i - 1]) / (0.5 * (h1 + h2)) ** 2
        bias = curv * max(h1, h2) ** 2 / 6 + abs(h2 - h1) * curv / 2
        rows.append((float(alphas[i]), fd.value, means[i].value, fd.z(means[i].value), bias,
                     math.hypot(fd.se, means[i].se)))

    unit = (alphas >= 0) & (alphas <= 1)
    xs = alphas[unit]
    if xs.size < 2 or xs[0] != 0 or xs[-1] != 1:
        raise ValueError("alpha grid must contain 0 and 1 for the integral check")
    mm = np.array([means[i].value for i in np.flatnonzero(unit)])
    ss = np.array([means[i].se for i in np.flatnonzero(unit)])
    w = np.zeros(xs.size)
    d = np.diff(xs)
    w[:-1] += d / 2
    w[1:] += d / 2
    integral = Estimate(float(w @ mm), float(math.sqrt(np.sum((w * ss) ** 2))))
    endpoint = vals[int(np.flatnonzero(alphas == 1)[0])]
    sec = np.abs(np.diff(mm, 2)) / (d[:-1] * d[1:]) if xs.size >= 3 else np.zeros(1)
    bias = float(np.max(sec) * np.sum(d**3) / 12) if sec.size else 0.0
    return DerivativeReport(alphas, vals, means, rows, integral, endpoint, bias)


# ------------------------------------------------------ Gaussian answers


@dataclass
class GaussianLinear:
    """Closed forms for V = 0 and f = <l, phi>.

    Neither the value nor the tilted mean depends on hbar: the covariance
    hbar C and the exponent f / hbar cancel.
    """

    spec: LatticeSpec
    ell: np.ndarray

    @property
    def q(self) -> float:
        return float(inner(self.spec, self.ell, apply_spectral(self.spec, -1.0, self.ell)))

    def value(self, alpha: float = 1.0) -> float:
        return -0.5 * alpha**2 * self.q

    def tilted_mean(self, alpha: float = 1.0) -> float:
        return -alpha * self.q

    def optimal_drift(self, t: np.ndarray, alpha: float = 1.0) -> np.ndarray:
        return -np.asarray(t)[:, None, None] * alpha * apply_spectral(self.spec, -1.0, self.ell)

    def functional(self) -> LinearFunctional:
        return LinearFunctional(self.ell)
