"""Small-hbar behaviour of the quartic model against its deterministic limit.

The limit problem is the convex minimisation of alpha f + J with
J(phi) = lam int phi^4 + 1/2 <phi, (m^2 - Delta) phi>. It is solved by
Newton steps (conjugate gradients preconditioned by (m^2 - Delta)^{-1})
with a backtracking line search, so the objective decreases strictly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse.linalg import LinearOperator, cg

from .interactions import InteractionSpec, grad_rate_function_J, rate_function_J
from .lattice import LatticeSpec, apply_spectral, bessel_potential, inner
from .observables import Functional, QuadraticObservable
from .oracles import MCMCConfig, functional_ti, laplace_mc, tilted_means
from .stats import Estimate


@dataclass
class DeterministicResult:
    phi: np.ndarray
    value: float
    residual: float
    iterations: int
    trace: list = field(default_factory=list)


def _l2(spec: LatticeSpec, g: np.ndarray) -> float:
    return float(math.sqrt(spec.cell * np.sum(g * g)))


def deterministic_minimize(f: Functional, lam: float, spec: LatticeSpec, alpha: float = 1.0,
                           mask: np.ndarray | None = None, tol: float = 1e-10, phi0: np.ndarray | None = None,
                           max_iter: int = 200) -> DeterministicResult:
    """Minimise alpha f + J; stop when the L^2 norm of the gradient is below ``tol``."""
    mask = np.ones(spec.shape) if mask is None else mask
    phi = np.zeros(spec.shape) if phi0 is None else np.array(phi0, dtype=float)

    def obj(p):
        return float(alpha * f.value(spec, p) + rate_function_J(spec, p, lam, mask))

    def grad(p):
        return alpha * f.grad(spec, p) + grad_rate_function_J(spec, p, lam, mask)

    n = spec.L**2
    precond = LinearOperator((n, n), matvec=lambda v: apply_spectral(spec, -1.0, v.reshape(spec.shape)).ravel())
    val = obj(phi)
    g = grad(phi)
    trace = [val]
    for it in range(max_iter):
        res = _l2(spec, g)
        if res < tol:
            return DeterministicResult(phi, val, res, it, trace)

        def hess(v, p=phi):
            v = v.reshape(spec.shape)
            out = alpha * f.hessp(spec, p, v) + 12.0 * lam * mask * p * p * v + apply_spectral(spec, 1.0, v)
            return out.ravel()

        H = LinearOperator((n, n), matvec=hess)
        d, _ = cg(H, -g.ravel(), M=precond, rtol=1e-12, atol=0.0, maxiter=200)
        d = d.reshape(spec.shape)
        slope = inner(spec, g, d)
        if not slope < 0:
            d = -apply_spectral(spec, -1.0, g)
            slope = inner(spec, g, d)
        step = 1.0
        while True:
            trial = phi + step * d
            tv = obj(trial)
            if tv <= val + 1e-4 * step * slope:
                break
            step *= 0.5
            if step < 1e-14:
                break
        if not tv < val:
            # at machine precision the objective can no longer drop
            return DeterministicResult(phi, val, _l2(spec, g), it, trace)
        phi, val = trial, tv
        g = grad(phi)
        trace.append(val)
    res = _l2(spec, g)
    if res >= tol:
        raise RuntimeError(f"deterministic minimisation did not converge (residual {res:.3e})")
    return DeterministicResult(phi, val, res, max_iter, trace)


@dataclass
class TwoStartReport:
    first: DeterministicResult
    second: DeterministicResult
    distance: float
    value_gap: float
    tol: float

    @property
    def agree(self) -> bool:
        return self.distance <= 10 * self.tol


def two_start(f: Functional, lam: float, spec: LatticeSpec, alpha: float = 1.0, tol: float = 1e-10,
              seed: int = 0, mask: np.ndarray | None = None) -> TwoStartReport:
    """Solve from zero and from a random start; strict convexity makes them agree."""
    rng = np.random.default_rng(seed)
    a = deterministic_minimize(f, lam, spec, alpha, mask, tol)
    b = deterministic_minimize(f, lam, spec, alpha, mask, tol, phi0=rng.standard_normal(spec.shape))
    return TwoStartReport(a, b, _l2(spec, a.phi - b.phi), abs(a.value - b.value), tol)


def linear_solve(f: QuadraticObservable, spec: LatticeSpec, alpha: float = 1.0) -> np.ndarray:
    """Minimiser for lam = 0: (alpha Q + (m^2 - Delta)) phi = alpha Q target."""
    Q = f.operator_matrix(spec)
    A = apply_spectral(spec, 1.0, np.eye(spec.L**2).reshape(-1, spec.L, spec.L)).reshape(spec.L**2, -1).T
    rhs = alpha * Q @ f.target.ravel()
    return np.linalg.solve(alpha * Q + A, rhs).reshape(spec.shape)


def h1_norm(spec: LatticeSpec, g: np.ndarray) -> float:
    return _l2(spec, bessel_potential(spec, 1.0, g))


def lipschitz_ratios(f: Functional, lam: float, spec: LatticeSpec, alpha: float = 1.0,
                     gammas=(1e-1, 1e-2, 1e-3), tol: float = 1e-11) -> list[float]:
    base = deterministic_minimize(f, lam, spec, alpha, tol=tol).phi
    return [h1_norm(spec, deterministic_minimize(f, lam, spec, alpha + g, tol=tol, phi0=base).phi - base) / g
            for g in gammas]


# ---------------------------------------------------- Gaussian closed forms


@dataclass
class GaussianQuadratic:
    """V = 0 and f quadratic: everything is a finite-dimensional Gaussian integral.

    In flattened site coordinates the free field at hbar has covariance
    Sigma = hbar (a^2 A)^{-1} with A the matrix of m^2 - Delta, and
    f(phi) = a^2/2 (phi - target)^T Q (phi - target).
    """

    spec: LatticeSpec
    f: QuadraticObservable

    def _mats(self):
        spec = self.spec
        n = spec.L**2
        eye = np.eye(n).reshape(n, spec.L, spec.L)
        A = apply_spectral(spec, 1.0, eye).reshape(n, -1).T
        Q = self.f.operator_matrix(spec)
        return spec.cell * A, spec.cell * Q

    def value(self, hbar: float, alpha: float = 1.0) -> float:
        P, Qa = self._mats()
        mu = self.f.target.ravel()
        S = alpha * Qa / hbar
        Sigma = hbar * np.linalg.inv(P)
        M = np.eye(P.shape[0]) + Sigma @ S
        _, logdet = np.linalg.slogdet(M)
        quad = mu @ (S @ np.linalg.solve(M, mu))
        return 0.5 * hbar * (logdet + quad)

    def limit(self, alpha: float = 1.0) -> float:
        """inf of alpha f + 1/2 <phi, (m^2 - Delta) phi>."""
        P, Qa = self._mats()
        mu = self.f.target.ravel()
        S = alpha * Qa
        return 0.5 * float(mu @ (S @ np.linalg.solve(np.eye(P.shape[0]) + np.linalg.solve(P, S), mu)))

    def tilted_mean(self, hbar: float, alpha: float = 1.0) -> float:
        """E[f] under exp(-alpha f / hbar) times the free field at hbar."""
        P, Qa = self._mats()
        mu = self.f.target.ravel()
        prec = (P + alpha * Qa) / hbar
        cov = np.linalg.inv(prec)
        mean = cov @ (alpha * Qa @ mu) / hbar
        d = mean - mu
        return 0.5 * float(d @ Qa @ d + np.trace(Qa @ cov))


# ------------------------------------------------------------ hbar sweeps


@dataclass
class SweepRow:
    hbar: float
    alpha: float
    value: Estimate
    deterministic: float

    @property
    def gap(self) -> float:
        return abs(self.value.value - self.deterministic)


@dataclass
class SweepReport:
    rows: list
    laplace_check: Estimate | None = None  # direct estimate at hbar = 1

    @property
    def gaps(self) -> list[float]:
        return [r.gap for r in self.rows]

    @property
    def decreasing(self) -> bool:
        g = self.gaps
        return all(b < a for a, b in zip(g, g[1:]))

    def final_ok(self) -> bool:
        r = self.rows[-1]
        return r.gap < 0.1 * abs(r.deterministic) + 3 * r.value.se


def _alpha_inits(f, lam, spec, alphas, mask):
    inits, prev = [], None
    for a in alphas:
        prev = deterministic_minimize(f, lam, spec, float(a), mask, tol=1e-9, phi0=prev).phi
        inits.append(prev)
    return inits


def hbar_sweep(f: Functional, ispec: InteractionSpec, spec: LatticeSpec, hbar_list, cfg: MCMCConfig,
               alpha_grid=None, cross_check: bool = True) -> SweepReport:
    """Value of f at each hbar by integrating tilted means over alpha.

    Chains at each alpha start from the deterministic minimiser of
    alpha f + J, so the tilt never has to be found by the sampler.
    """
    hb = [float(h) for h in hbar_list]
    if any(b >= a for a, b in zip(hb, hb[1:])):
        raise ValueError("hbar list must be decreasing")
    alphas = np.linspace(0.0, 1.0, 9) if alpha_grid is None else np.asarray(alpha_grid, dtype=float)
    lam = ispec.lam if ispec.kind == "phi4" else 0.0
    mask = ispec.mask(spec)
    det = deterministic_minimize(f, lam, spec, 1.0, mask).value
    inits = _alpha_inits(f, lam, spec, alphas, mask)
    rows = []
    check = None
    for k, h in enumerate(hb):
        ti = functional_ti(f, ispec, spec, alphas, _seeded(cfg, k), hbar=h, inits=inits)
        rows.append(SweepRow(h, 1.0, ti.estimate, det))
        if cross_check and h == 1.0:
            check = laplace_mc(f, ispec, spec, _seeded(cfg, 1000 + k)).estimate
    return SweepReport(rows, check)


def _seeded(cfg: MCMCConfig, k: int) -> MCMCConfig:
    from dataclasses import replace
    return replace(cfg, seed=cfg.seed + 7717 * (k + 1))


@dataclass
class ChainRow:
    hbar: float
    alpha: float
    derivative: Estimate
    deterministic: float

    @property
    def gap(self) -> float:
        return abs(self.derivative.value - self.deterministic)


def semiclassical_derivative_chain(f: Functional, ispec: InteractionSpec, spec: LatticeSpec, alphas,
                                   hbar_list, cfg: MCMCConfig, h: float = 0.05) -> list[ChainRow]:
    """d/dalpha of the value of alpha f at hbar against f at the deterministic minimiser.

    The derivative is the central difference of the value over
    [alpha - h, alpha + h], where that increment is itself computed by
    integrating tilted means with Simpson's rule on three points.
    """
    lam = ispec.lam if ispec.kind == "phi4" else 0.0
    mask = ispec.mask(spec)
    rows = []
    for k, hbar in enumerate(hbar_list):
        for i, a in enumerate(alphas):
            if a - h < 0:
                raise ValueError("every alpha must be at least the difference step h")
            pts = [a - h, a, a + h]
            inits = _alpha_inits(f, lam, spec, pts, mask)
            means = tilted_means(f, ispec, spec, pts, _seeded(cfg, 31 * k + i), hbar=float(hbar), inits=inits)
            w = np.array([1.0, 4.0, 1.0]) / 6.0
            val = float(sum(wi * m.value for wi, m in zip(w, means)))
            se = float(math.sqrt(sum((wi * m.se) ** 2 for wi, m in zip(w, means))))
            phi_a = deterministic_minimize(f, lam, spec, float(a), mask).phi
            rows.append(ChainRow(float(hbar), float(a), Estimate(val, se), float(f.value(spec, phi_a))))
    return rows
