"""Discrete-time Boue-Dupuis control problem on the lattice.

The drift is a feedback ansatz
    Zdot_j = -(m^2 - Delta)^{-1} sum_f c[j, f] Phi_f(state_j),
integrated with explicit Euler steps, so Z_j only sees noise up to t_j.
The objective per sample is f(Y_1) + V(Y_1) + E(Z) with Y = hbar^{1/2} W + Z
and E(Z) = 1/2 sum_j dt <Zdot_j, (m^2 - Delta) Zdot_j>. For phi^4 the
potential is evaluated in its shifted form, which drops the mean-zero term
int [[W^4]] and with it most of the variance.

Gradients with respect to c are exact for the discretised objective
(reverse accumulation through the Euler recursion).
"""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import minimize

from .gff import EnhancedGFFPath, TimeGrid, gmc_density
from .interactions import (
    InteractionSpec,
    grad_potential_exp,
    grad_potential_phi4,
    hess_potential_phi4,
    potential_direct,
    potential_exp,
    potential_phi4_expanded,
)
from .lattice import LatticeSpec, WeightSpec, apply_spectral, inner
from .observables import Functional, ZeroFunctional
from .stats import Estimate, mean_se

logger = logging.getLogger(__name__)

PHI4_FEATURES = ("wick3", "wick2_z", "w_z2", "z3", "w", "z", "const")
EXP_FEATURES = ("exp_z", "w", "z", "const")


@dataclass
class ControlProblem:
    """Lattice, time grid, interaction and test functional f."""

    spec: LatticeSpec
    grid: TimeGrid
    interaction: InteractionSpec
    observable: Functional = field(default_factory=ZeroFunctional)

    @property
    def hbar(self) -> float:
        return self.interaction.hbar

    @property
    def feature_names(self) -> tuple[str, ...]:
        kind = self.interaction.kind
        names: tuple[str, ...]
        if kind == "phi4":
            names = PHI4_FEATURES
        elif kind == "exponential":
            names = EXP_FEATURES
        else:
            names = ("z", "const")
        if not self.observable.is_zero:
            names = names + ("f_grad", "f_grad0")
        return names

    def zero_parameters(self) -> "DriftParameters":
        return DriftParameters(np.zeros((self.grid.n_t, len(self.feature_names))), self.feature_names)

    def with_observable(self, f: Functional) -> "ControlProblem":
        return ControlProblem(self.spec, self.grid, self.interaction, f)


@dataclass
class DriftParameters:
    coef: np.ndarray  # (n_t, n_features)
    names: tuple[str, ...]

    def copy(self) -> "DriftParameters":
        return DriftParameters(self.coef.copy(), self.names)

    def flat(self) -> np.ndarray:
        return self.coef.ravel().copy()

    def with_flat(self, x: np.ndarray) -> "DriftParameters":
        return DriftParameters(np.asarray(x, dtype=float).reshape(self.coef.shape).copy(), self.names)

    def adapt(self, problem: ControlProblem) -> "DriftParameters":
        """Carry matching coefficients over to the feature set of another problem."""
        out = problem.zero_parameters()
        for k, name in enumerate(out.names):
            if name in self.names and self.coef.shape[0] == out.coef.shape[0]:
                out.coef[:, k] = self.coef[:, self.names.index(name)]
        return out


def first_order_guess(problem: ControlProblem) -> DriftParameters:
    """Coefficients that copy the potential gradient evaluated at the current state."""
    theta = problem.zero_parameters()
    lam = problem.interaction.lam
    init = {"wick3": 4 * lam, "wick2_z": 12 * lam, "w_z2": 12 * lam, "z3": 4 * lam,
            "exp_z": lam * problem.interaction.beta, "f_grad": 1.0}
    for k, name in enumerate(theta.names):
        theta.coef[:, k] = init.get(name, 0.0)
    return theta


# -------------------------------------------------------------- features


@dataclass
class _State:
    enh: object
    gmc: np.ndarray | None


class FeatureLibrary:
    def __init__(self, problem: ControlProblem):
        self.p = problem
        self.names = problem.feature_names
        self.mask = problem.interaction.mask(problem.spec)

    def state(self, paths: EnhancedGFFPath, j: int) -> _State:
        ispec = self.p.interaction
        key = ("state", j, self.p.hbar, ispec.kind, ispec.beta)
        if key not in paths._cache:
            enh = paths.enhanced(j).scaled(self.p.hbar)
            gmc = None
            if ispec.kind == "exponential":
                gmc = gmc_density(self.p.spec, enh.W, ispec.beta, enh.sigma2)
            paths._cache[key] = _State(enh, gmc)
        return paths._cache[key]

    def _one(self, name: str, st: _State, Z: np.ndarray) -> np.ndarray:
        e, mask = st.enh, self.mask
        if name == "wick3":
            return mask * e.wick3
        if name == "wick2_z":
            return mask * e.wick2 * Z
        if name == "w_z2":
            return mask * e.W * Z * Z
        if name == "z3":
            return mask * Z * Z * Z
        if name == "w":
            return mask * e.W
        if name == "z":
            return Z
        if name == "const":
            return np.broadcast_to(mask, Z.shape)
        if name == "exp_z":
            with np.errstate(over="ignore"):
                return mask * np.exp(self.p.interaction.beta * Z) * st.gmc
        if name == "f_grad":
            return self.p.observable.grad(self.p.spec, e.W + Z)
        if name == "f_grad0":
            return self.p.observable.grad(self.p.spec, np.zeros_like(Z))
        raise KeyError(name)

    def evaluate(self, st: _State, Z: np.ndarray) -> np.ndarray:
        return np.stack([self._one(n, st, Z) for n in self.names], axis=-3)

    def combine(self, st: _State, Z: np.ndarray, c: np.ndarray) -> np.ndarray:
        out = np.zeros_like(Z)
        for k, name in enumerate(self.names):
            if c[k] != 0:
                out += c[k] * self._one(name, st, Z)
        return out

    def vjp(self, st: _State, Z: np.ndarray, c: np.ndarray, g: np.ndarray) -> np.ndarray:
        """sum_f c_f (dPhi_f/dZ)^T g."""
        e, mask = st.enh, self.mask
        diag = np.zeros_like(Z)
        out = np.zeros_like(Z)
        for k, name in enumerate(self.names):
            ck = c[k]
            if ck == 0:
                continue
            if name == "wick2_z":
                diag += ck * mask * e.wick2
            elif name == "w_z2":
                diag += ck * mask * 2.0 * e.W * Z
            elif name == "z3":
                diag += ck * mask * 3.0 * Z * Z
            elif name == "z":
                diag += ck
            elif name == "exp_z":
                with np.errstate(over="ignore"):
                    diag += ck * self.p.interaction.beta * mask * np.exp(self.p.interaction.beta * Z) * st.gmc
            elif name == "f_grad":
                out += ck * self.p.observable.hessp(self.p.spec, e.W + Z, g)
        return out + diag * g


# ------------------------------------------------------------ simulation


@dataclass
class ControlledEnsemble:
    """Noise paths, drift paths and per-sample costs at a fixed theta."""

    problem: ControlProblem
    paths: EnhancedGFFPath
    theta: DriftParameters
    Z: np.ndarray  # (N, n_t + 1, L, L)
    terminal: np.ndarray  # (N,) f(Y_1) + V(Y_1)
    energies: np.ndarray  # (N,)

    @property
    def values(self) -> np.ndarray:
        return self.terminal + self.energies

    @property
    def Y1(self) -> np.ndarray:
        return np.sqrt(self.problem.hbar) * self.paths.at(self.problem.grid.n_t) + self.Z[:, -1]

    def objective(self) -> Estimate:
        return _checked_mean(self.values)


def _checked_mean(values: np.ndarray) -> Estimate:
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        raise FloatingPointError(f"non-finite objective for samples {bad[:10].tolist()}")
    return mean_se(values)


def simulate(problem: ControlProblem, theta: DriftParameters, paths: EnhancedGFFPath) -> ControlledEnsemble:
    spec, grid = problem.spec, problem.grid
    lib = FeatureLibrary(problem)
    N = paths.W.shape[0]
    Z = np.zeros((N, grid.n_t + 1) + spec.shape)
    energies = np.zeros(N)
    for j in range(grid.n_t):
        st = lib.state(paths, j)
        with np.errstate(over="ignore", invalid="ignore"):
            F = lib.combine(st, Z[:, j], theta.coef[j])
        if not np.all(np.isfinite(F)):
            raise FloatingPointError(f"drift overflow at step {j}")
        CF = apply_spectral(spec, -1.0, F)
        Z[:, j + 1] = Z[:, j] - grid.dt * CF
        energies += 0.5 * grid.dt * inner(spec, F, CF)
    terminal = terminal_cost(problem, paths, Z[:, -1])
    return ControlledEnsemble(problem, paths, theta, Z, terminal, energies)


def terminal_cost(problem: ControlProblem, paths: EnhancedGFFPath, Z1: np.ndarray) -> np.ndarray:
    spec, ispec = problem.spec, problem.interaction
    enh = paths.enhanced(problem.grid.n_t).scaled(problem.hbar)
    out = problem.observable.value(spec, enh.W + Z1)
    if ispec.active:
        if ispec.kind == "phi4":
            out = out + potential_phi4_expanded(spec, enh, Z1, ispec)
        elif ispec.kind == "exponential":
            out = out + potential_exp(spec, gmc_density(spec, enh.W, ispec.beta, enh.sigma2), Z1, ispec)
        else:
            out = out + potential_direct(spec, enh.W + Z1, ispec, enh.sigma2)
    return np.broadcast_to(out, Z1.shape[:-2]).astype(float)


def terminal_grad(problem: ControlProblem, paths: EnhancedGFFPath, Z1: np.ndarray) -> np.ndarray:
    spec, ispec = problem.spec, problem.interaction
    enh = paths.enhanced(problem.grid.n_t).scaled(problem.hbar)
    g = problem.observable.grad(spec, enh.W + Z1)
    if ispec.active:
        if ispec.kind == "phi4":
            g = g + grad_potential_phi4(spec, enh, Z1, ispec)
        elif ispec.kind == "exponential":
            g = g + grad_potential_exp(spec, gmc_density(spec, enh.W, ispec.beta, enh.sigma2), Z1, ispec)
        else:
            from .interactions import grad_potential_direct
            g = g + grad_potential_direct(spec, enh.W + Z1, ispec, enh.sigma2)
    return g


def gradient(ce: ControlledEnsemble) -> np.ndarray:
    """d objective / d coef by reverse accumulation, shape (n_t, n_features)."""
    problem, paths, Z = ce.problem, ce.paths, ce.Z
    spec, grid = problem.spec, problem.grid
    lib = FeatureLibrary(problem)
    N = Z.shape[0]
    p = terminal_grad(problem, paths, Z[:, -1])
    out = np.zeros_like(ce.theta.coef)
    for j in range(grid.n_t - 1, -1, -1):
        st = lib.state(paths, j)
        # g = dt C (F_j - p_{j+1}); dt C F_j is exactly Z_j - Z_{j+1}
        g = (Z[:, j] - Z[:, j + 1]) - grid.dt * apply_spectral(spec, -1.0, p)
        Phi = lib.evaluate(st, Z[:, j])
        out[j] = spec.cell * np.einsum("nxy,nfxy->f", g, Phi, optimize=True) / N
        p = p + lib.vjp(st, Z[:, j], ce.theta.coef[j], g)
    return out


def gradient_fd(problem: ControlProblem, theta: DriftParameters, paths: EnhancedGFFPath, h: float = 1e-5) -> np.ndarray:
    """Coefficientwise central differences of the sample-average objective (slow oracle)."""
    out = np.zeros_like(theta.coef)
    for idx in np.ndindex(theta.coef.shape):
        tp, tm = theta.copy(), theta.copy()
        tp.coef[idx] += h
        tm.coef[idx] -= h
        fp = simulate(problem, tp, paths).values.mean()
        fm = simulate(problem, tm, paths).values.mean()
        out[idx] = (fp - fm) / (2 * h)
    return out


def objective(problem: ControlProblem, theta: DriftParameters, paths: EnhancedGFFPath) -> Estimate:
    return simulate(problem, theta, paths).objective()


def gram_matrices(ce: ControlledEnsemble) -> np.ndarray:
    """Per-step metric H_j = dt E<Phi_f, C Phi_g>, shape (n_t, nf, nf)."""
    problem, paths, Z = ce.problem, ce.paths, ce.Z
    spec, grid = problem.spec, problem.grid
    lib = FeatureLibrary(problem)
    N = Z.shape[0]
    out = np.zeros((grid.n_t, len(lib.names), len(lib.names)))
    for j in range(grid.n_t):
        Phi = lib.evaluate(lib.state(paths, j), Z[:, j])
        CPhi = apply_spectral(spec, -1.0, Phi)
        nf = Phi.shape[1]
        A = np.moveaxis(Phi, 1, 0).reshape(nf, -1)
        B = np.moveaxis(CPhi, 1, 0).reshape(nf, -1)
        out[j] = grid.dt * spec.cell * (A @ B.T) / N
    return out


# --------------------------------------------------------- energies


def drift_rates(Z: np.ndarray, grid: TimeGrid) -> np.ndarray:
    return np.diff(Z, axis=-3) / grid.dt


def energy(Z: np.ndarray, spec: LatticeSpec, grid: TimeGrid) -> np.ndarray:
    """1/2 sum_j dt ||(m^2 - Delta)^{1/2} Zdot_j||^2, batched over leading axes."""
    return bilinear_energy(Z, Z, spec, grid)


def bilinear_energy(Z: np.ndarray, K: np.ndarray, spec: LatticeSpec, grid: TimeGrid) -> np.ndarray:
    """Symmetric form E(Z, K) with E(Z, Z) = E(Z)."""
    zd, kd = drift_rates(Z, grid), drift_rates(K, grid)
    return 0.5 * grid.dt * np.sum(inner(spec, zd, apply_spectral(spec, 1.0, kd)), axis=-1)


# ------------------------------------------------------------ optimizer


@dataclass
class OptimizerConfig:
    method: str = "natural"  # natural | lbfgs
    iterations: int = 200
    step_size: float = 1.0
    decay: float = 0.995
    tol: float = 1e-6
    ridge: float = 1e-4
    gradient_mode: str = "reverse"  # reverse | fd
    patience: int = 50


@dataclass
class TraceRow:
    iteration: int
    objective: float
    se: float
    grad_norm: float
    step_size: float


@dataclass
class OptimizationResult:
    theta: DriftParameters
    trace: list
    converged: bool
    improved: bool
    reason: str

    def trace_csv(self) -> str:
        return trace_to_csv(self.trace)


class OptimizationDiverged(RuntimeError):
    def __init__(self, msg, trace):
        super().__init__(msg)
        self.trace = trace


def trace_to_csv(trace) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["iteration", "objective", "se", "grad_norm", "step_size"])
    for r in trace:
        w.writerow([r.iteration, repr(r.objective), repr(r.se), repr(r.grad_norm), repr(r.step_size)])
    return buf.getvalue()


def _grad(problem, theta, paths, ce, mode):
    if mode == "fd":
        return gradient_fd(problem, theta, paths)
    return gradient(ce)


def _natural_direction(ce: ControlledEnsemble, grad: np.ndarray, ridge: float) -> tuple[np.ndarray, float]:
    H = gram_matrices(ce)
    d = np.zeros_like(grad)
    norm2 = 0.0
    for j in range(grad.shape[0]):
        Hj = H[j] + ridge * (np.trace(H[j]) / H.shape[1] + 1e-300) * np.eye(H.shape[1])
        d[j] = np.linalg.lstsq(Hj, grad[j], rcond=1e-12)[0]
        norm2 += float(grad[j] @ d[j])
    return d, math.sqrt(max(norm2, 0.0))


def optimize(problem: ControlProblem, theta0: DriftParameters, paths: EnhancedGFFPath,
             cfg: OptimizerConfig | None = None) -> OptimizationResult:
    """Minimise the sample-average objective on a fixed (training) ensemble.

    ``natural``: steps along H^{-1} grad with H the per-step Gram matrix of the
    features in the energy metric, geometric step decay and step halving on
    any increase, so the trace never goes up. After an accepted step the
    step size doubles back toward the decayed schedule. ``lbfgs``: scipy L-BFGS-B on the
    same deterministic objective.
    """
    cfg = cfg or OptimizerConfig()
    if cfg.method == "lbfgs":
        return _optimize_lbfgs(problem, theta0, paths, cfg)
    if cfg.method != "natural":
        raise ValueError(f"unknown optimizer {cfg.method!r}")
    theta = theta0.copy()
    ce = simulate(problem, theta, paths)
    est = ce.objective()
    start = est.value
    trace = []
    eta = cfg.step_size
    rejected = 0
    converged = False
    reason = "iteration cap"
    for it in range(cfg.iterations):
        g = _grad(problem, theta, paths, ce, cfg.gradient_mode)
        d, gnorm = _natural_direction(ce, g, cfg.ridge)
        trace.append(TraceRow(it, est.value, est.se, gnorm, eta))
        if gnorm < cfg.tol:
            converged, reason = True, "gradient tolerance"
            break
        while True:
            trial = theta.with_flat(theta.flat() - eta * d.ravel())
            try:
                ce_new = simulate(problem, trial, paths)
                est_new = ce_new.objective()
                ok = est_new.value <= est.value
            except FloatingPointError:
                ok = False
            if ok:
                rejected = 0
                break
            rejected += 1
            eta *= 0.5
            if rejected >= cfg.patience:
                raise OptimizationDiverged(f"no decrease for {rejected} consecutive steps", trace)
            if eta < 1e-12:
                break
        if not ok:
            converged, reason = True, "step underflow"
            break
        theta, ce, est = trial, ce_new, est_new
        # recover from earlier halvings, but never above the decayed schedule
        eta = min(2.0 * eta, cfg.step_size * cfg.decay ** (it + 1))
    else:
        g = _grad(problem, theta, paths, ce, cfg.gradient_mode)
        d, gnorm = _natural_direction(ce, g, cfg.ridge)
        trace.append(TraceRow(cfg.iterations, est.value, est.se, gnorm, eta))
    improved = est.value < start or trace[0].grad_norm < cfg.tol
    if not improved:
        logger.warning("optimizer did not improve on the starting objective")
    return OptimizationResult(theta, trace, converged, improved, reason)


def _optimize_lbfgs(problem, theta0, paths, cfg):
    trace = []
    cache = {}

    def fun(x):
        key = x.tobytes()
        if key not in cache:
            th = theta0.with_flat(x)
            ce = simulate(problem, th, paths)
            vals = ce.values
            if not np.all(np.isfinite(vals)):
                cache[key] = (np.inf, np.zeros_like(x), math.nan)
            else:
                est = mean_se(vals)
                cache[key] = (est.value, _grad(problem, th, paths, ce, cfg.gradient_mode).ravel(), est.se)
        return cache[key][0], cache[key][1]

    def callback(xk):
        f, g = fun(xk)
        trace.append(TraceRow(len(trace), f, cache[xk.tobytes()][2], float(np.linalg.norm(g)), math.nan))

    x0 = theta0.flat()
    f0, g0 = fun(x0)
    trace.append(TraceRow(0, f0, cache[x0.tobytes()][2], float(np.linalg.norm(g0)), math.nan))
    res = minimize(fun, x0, jac=True, method="L-BFGS-B", callback=callback,
                   options={"maxiter": cfg.iterations, "gtol": cfg.tol, "ftol": 1e-15, "maxcor": 20})
    theta = theta0.with_flat(res.x)
    f_final = fun(res.x)[0]
    return OptimizationResult(theta, trace, bool(res.success), f_final < f0, str(res.message))


# ------------------------------------------------------------- test controls


@dataclass
class TestControl:
    """Adapted perturbation K. ``kind`` selects the family.

    deterministic: K_j = t_j * field
    path:          K_j = field[j] (explicit deterministic path)
    weighted_z:    K_j = rho * Z_j
    feedback:      Kdot_j = -C(leading feature at state j)

    Every family is multiplied by ``scale``.
    """

    __test__ = False  # not a pytest class

    kind: str
    name: str
    field: np.ndarray | None = None
    weight: WeightSpec | None = None
    scale: float = 1.0

    def path(self, ce: ControlledEnsemble) -> np.ndarray:
        return self.scale * self._unit_path(ce)

    def _unit_path(self, ce: ControlledEnsemble) -> np.ndarray:
        problem = ce.problem
        spec, grid = problem.spec, problem.grid
        N = ce.Z.shape[0]
        t = grid.times[:, None, None]
        if self.kind == "deterministic":
            K = t * self.field
            return np.broadcast_to(K, (N,) + K.shape)
        if self.kind == "path":
            return np.broadcast_to(self.field, (N,) + self.field.shape)
        if self.kind == "weighted_z":
            return self.weight.power(spec) * ce.Z
        if self.kind == "feedback":
            lib = FeatureLibrary(problem)
            lead = lib.names[0]
            K = np.zeros_like(ce.Z)
            for j in range(grid.n_t):
                Phi = lib._one(lead, lib.state(ce.paths, j), ce.Z[:, j])
                K[:, j + 1] = K[:, j] - grid.dt * apply_spectral(spec, -1.0, Phi)
            return K
        raise ValueError(f"unknown test-control kind {self.kind!r}")

    def scaled(self, s: float) -> "TestControl":
        return replace(self, scale=self.scale * s)


def bump_control(spec: LatticeSpec, radius: float, center=None, amplitude: float = 1.0) -> TestControl:
    from .observables import bump
    center = center if center is not None else (spec.L // 2, spec.L // 2)
    return TestControl("deterministic", f"bump_r{radius:g}", bump(spec, radius, center, amplitude))


def random_smooth_control(spec: LatticeSpec, seed: int, scale: float = 1.0) -> TestControl:
    rng = np.random.default_rng(seed)
    g = apply_spectral(spec, -1.0, rng.standard_normal(spec.shape) / spec.a)
    g *= scale / max(np.max(np.abs(g)), 1e-300)
    return TestControl("deterministic", f"smooth_{seed}", g)


def weighted_drift_control(weight: WeightSpec) -> TestControl:
    return TestControl("weighted_z", "rho_z", weight=weight)


def feedback_control(scale: float = 1.0) -> TestControl:
    return TestControl("feedback", "wick_feedback", scale=scale)


def registered_controls(spec: LatticeSpec, seed: int = 0) -> list[TestControl]:
    return [
        bump_control(spec, radius=spec.side / 4),
        random_smooth_control(spec, seed),
        weighted_drift_control(WeightSpec(gamma=0.5, center=(spec.L // 2, spec.L // 2))),
        feedback_control(),
    ]


# ------------------------------------------------ first-order quantities


def _per_sample_gateaux(ce: ControlledEnsemble, K: np.ndarray) -> np.ndarray:
    problem = ce.problem
    gT = terminal_grad(problem, ce.paths, ce.Z[:, -1])
    return inner(problem.spec, gT, K[:, -1]) + 2.0 * bilinear_energy(ce.Z, K, problem.spec, problem.grid)


def gateaux(ce: ControlledEnsemble, K: TestControl | np.ndarray) -> Estimate:
    """E[<grad G(Y_1), K_1> + 2 E(Z, K)]."""
    Kp = K.path(ce) if isinstance(K, TestControl) else K
    return mean_se(_per_sample_gateaux(ce, Kp))


def objective_on_path(problem: ControlProblem, paths: EnhancedGFFPath, Z: np.ndarray) -> np.ndarray:
    return terminal_cost(problem, paths, Z[:, -1]) + energy(Z, problem.spec, problem.grid)


def gateaux_fd(ce: ControlledEnsemble, K: TestControl | np.ndarray, sigma: float = 1e-3) -> float:
    """Fourth-order central difference of the sample objective along K."""
    Kp = K.path(ce) if isinstance(K, TestControl) else K

    def at(s):
        return objective_on_path(ce.problem, ce.paths, ce.Z + s * Kp).mean()

    return float((8 * (at(sigma) - at(-sigma)) - (at(2 * sigma) - at(-2 * sigma))) / (12 * sigma))


def el_residual(ce: ControlledEnsemble, K: TestControl | np.ndarray, form: str = "masked") -> Estimate:
    """Euler-Lagrange residual assembled from the explicit interaction integrands.

    ``masked``: finite-volume quartic form; ``full``: the same with the mask
    required to be identically one; ``exponential``: linearised exponential
    form lam beta int xi e^{beta Z} K dM.
    """
    problem = ce.problem
    spec, ispec = problem.spec, problem.interaction
    Kp = K.path(ce) if isinstance(K, TestControl) else K
    enh = ce.paths.enhanced(problem.grid.n_t).scaled(problem.hbar)
    Z1, K1 = ce.Z[:, -1], Kp[:, -1]
    if form in ("masked", "full"):
        if form == "full" and not np.all(ispec.mask(spec) == 1):
            raise ValueError("full-space form needs the mask to be identically one")
        pot = inner(spec, grad_potential_phi4(spec, enh, Z1, ispec), K1) if ispec.active else 0.0
    elif form == "exponential":
        M = gmc_density(spec, enh.W, ispec.beta, enh.sigma2)
        pot = ispec.lam * ispec.beta * spec.cell * np.sum(ispec.mask(spec) * np.exp(ispec.beta * Z1) * M * K1, axis=(-2, -1))
    else:
        raise ValueError(f"unknown form {form!r}")
    per = inner(spec, problem.observable.grad(spec, enh.W + Z1), K1) + pot + 2.0 * bilinear_energy(ce.Z, Kp, spec, problem.grid)
    return mean_se(per)


def second_variation(ce: ControlledEnsemble, K: TestControl | np.ndarray, sigma: float = 1e-3) -> Estimate:
    """Per-sample central second difference of the objective along K."""
    Kp = K.path(ce) if isinstance(K, TestControl) else K
    p, s = ce.problem, sigma
    f0 = objective_on_path(p, ce.paths, ce.Z)
    fp = objective_on_path(p, ce.paths, ce.Z + s * Kp)
    fm = objective_on_path(p, ce.paths, ce.Z - s * Kp)
    return mean_se((fp - 2 * f0 + fm) / s**2)


# -------------------------------------------------------- a-priori bound


@dataclass
class AprioriReport:
    lhs: Estimate
    commutator: Estimate
    noise_terms: Estimate
    observable_term: Estimate

    @property
    def ratio(self) -> float:
        rhs = abs(self.commutator.value) + abs(self.noise_terms.value) + abs(self.observable_term.value)
        return self.lhs.value / (1.0 + rhs)


def apriori_bound(ce: ControlledEnsemble, w: WeightSpec) -> AprioriReport:
    """Weighted bound quantities obtained by testing the EL equation with K = rho Z."""
    problem = ce.problem
    spec, grid, ispec = problem.spec, problem.grid, problem.interaction
    if ispec.kind != "phi4":
        raise ValueError("the a-priori bound is formulated for the quartic model")
    rho = w.rho(spec)
    r = np.sqrt(rho)
    mask = ispec.mask(spec)
    Z = ce.Z
    Z1 = Z[:, -1]
    lam = ispec.lam
    lhs = 2 * lam * spec.cell * np.sum(mask * rho * Z1**4, axis=(-2, -1)) + energy(r * Z, spec, grid)

    zd = drift_rates(Z, grid)
    comm = apply_spectral(spec, 1.0, r * zd) - r * apply_spectral(spec, 1.0, zd)
    commutator = grid.dt * np.sum(inner(spec, zd, comm * r), axis=-1) if w.gamma else np.zeros(Z.shape[0])

    enh = ce.paths.enhanced(grid.n_t).scaled(problem.hbar)
    noise = lam * spec.cell * np.sum(mask * rho * (4 * enh.wick3 * Z1 + 12 * enh.wick2 * Z1**2 + 12 * enh.W * Z1**3),
                                     axis=(-2, -1))
    obs = inner(spec, problem.observable.grad(spec, enh.W + Z1), rho * Z1)
    return AprioriReport(mean_se(lhs), mean_se(commutator), mean_se(noise), mean_se(obs))


# --------------------------------------------------------- sign diagnostic


@dataclass
class SignReport:
    mean_Z1_max: float
    frac_positive: float
    site_mean: Estimate
    passed: bool


def sign_diagnostic_exp(ce: ControlledEnsemble, tol: float = 1e-12) -> SignReport:
    if ce.problem.interaction.kind != "exponential":
        raise ValueError("sign diagnostic applies to the exponential model")
    Z1 = ce.Z[:, -1]
    site_mean = mean_se(Z1.mean(axis=(-2, -1))) if Z1.shape[0] > 1 else Estimate(float(Z1.mean()), 0.0)
    passed = site_mean.value <= 2 * site_mean.se
    return SignReport(float(np.mean(Z1.max(axis=(-2, -1)))), float(np.mean(Z1 > tol)), site_mean, passed)
