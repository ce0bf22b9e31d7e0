"""Monte-Carlo ground truth for the lattice Gibbs measure.

Target density on site configurations:
    exp(-(V(phi) + alpha f(phi)) / hbar - <phi, (m^2 - Delta) phi> / (2 hbar))
with the Wick constant hbar * G(0) inside V. Sampling works in whitened
coordinates phi = hbar^{1/2} A eta, A eta = (m^2 - Delta)^{-1/2} eta / a, in
which the free part is a standard normal. The Hamiltonian variant rotates
(eta, p) exactly and only kicks with the interaction; the random-walk variant
is a preconditioned Crank-Nicolson proposal.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import simpson
from scipy.special import logsumexp

from .gff import NoiseEnsemble, sample_terminal
from .interactions import InteractionSpec, coupling_derivative, grad_potential_direct, potential_direct
from .lattice import LatticeSpec, WeightSpec, apply_spectral, green_at_origin, weighted_sobolev_norm
from .observables import Functional, MomentObservable, ZeroFunctional
from .stats import Estimate, batch_means, effective_sample_size, gelman_rubin, mean_se, ratio_log

logger = logging.getLogger(__name__)

_MASK64 = (1 << 64) - 1
_EPS_MAX = math.pi / 2
_JITTER = 0.2


@dataclass
class MCMCConfig:
    algorithm: str = "hmc"  # hmc | rwm
    step_size: float = 0.3
    n_leapfrog: int = 5
    n_burn: int = 200
    n_samples: int = 1000
    thin: int = 1
    n_chains: int = 4
    seed: int = 0
    adapt: bool = True

    def __post_init__(self):
        if self.algorithm not in ("hmc", "rwm"):
            raise ValueError(f"unknown MCMC algorithm {self.algorithm!r}")


@dataclass
class SampleSet:
    """Configurations with their correlation structure.

    ``fields`` has shape (n_chains, n_draws, L, L). Independent draws use a
    single chain and ``correlated=False``.
    """

    fields: np.ndarray
    correlated: bool = True
    acceptance: np.ndarray | None = None
    step_size: float | None = None

    @classmethod
    def iid(cls, fields: np.ndarray) -> "SampleSet":
        return cls(np.asarray(fields)[None, ...], correlated=False)

    def flat(self) -> np.ndarray:
        return self.fields.reshape((-1,) + self.fields.shape[-2:])

    def estimate(self, values: np.ndarray) -> Estimate:
        values = np.asarray(values).reshape(self.fields.shape[:2])
        if self.correlated:
            return batch_means(values)
        return mean_se(values)

    def rhat(self, fn) -> float:
        return gelman_rubin(fn(self.fields))


class _Target:
    def __init__(self, spec: LatticeSpec, ispec: InteractionSpec, hbar: float, f: Functional, alpha: float):
        self.spec, self.ispec, self.hbar, self.f, self.alpha = spec, ispec, hbar, f, alpha
        self.sigma2 = hbar * green_at_origin(spec)
        self.h = math.sqrt(hbar)

    def to_phi(self, eta):
        return self.h * apply_spectral(self.spec, -0.5, eta) / self.spec.a

    def U(self, eta):
        phi = self.to_phi(eta)
        u = potential_direct(self.spec, phi, self.ispec, self.sigma2)
        if self.alpha != 0 and not self.f.is_zero:
            u = u + self.alpha * self.f.value(self.spec, phi)
        return u / self.hbar

    def grad_U(self, eta):
        return self.grad_U_phi(self.to_phi(eta))

    def grad_U_phi(self, phi):
        g = grad_potential_direct(self.spec, phi, self.ispec, self.sigma2)
        if self.alpha != 0 and not self.f.is_zero:
            g = g + self.alpha * self.f.grad(self.spec, phi)
        g = np.where(np.isfinite(g), g, np.inf)
        if not np.all(np.isfinite(g)):
            out = np.full_like(g, np.inf)
            ok = np.all(np.isfinite(g), axis=(-2, -1))
            out[ok] = self.spec.a * apply_spectral(self.spec, -0.5, g[ok]) / self.h
            return out
        return self.spec.a * apply_spectral(self.spec, -0.5, g) / self.h


def _chain_rngs(seed: int, n: int):
    return [np.random.Generator(np.random.Philox(key=((int(seed) & _MASK64) << 64) | (c + 1 << 32))) for c in range(n)]


def _normals(rngs, shape):
    return np.stack([r.standard_normal(shape) for r in rngs])


def _uniforms(rngs):
    return np.array([r.random() for r in rngs])


def mcmc_sample(ispec: InteractionSpec, spec: LatticeSpec, cfg: MCMCConfig, hbar: float = 1.0,
                f: Functional | None = None, alpha: float = 0.0, init: np.ndarray | None = None) -> SampleSet:
    """Draw correlated samples of the lattice Gibbs measure.

    ``init`` is an optional starting configuration (site variables) shared by
    all chains; otherwise chains start from independent free-field draws.
    """
    f = f or ZeroFunctional()
    tgt = _Target(spec, ispec, hbar, f, alpha)
    rngs = _chain_rngs(cfg.seed, cfg.n_chains)
    # stream 0 is reserved for the trajectory-length jitter shared by all chains
    jitter = np.random.Generator(np.random.Philox(key=(int(cfg.seed) & _MASK64) << 64))
    shape = spec.shape
    if init is None:
        eta = _normals(rngs, shape)
    else:
        eta0 = spec.a * apply_spectral(spec, 0.5, np.asarray(init, dtype=float)) / tgt.h
        eta = np.broadcast_to(eta0, (cfg.n_chains,) + shape).copy()
    u = tgt.U(eta)
    eps = cfg.step_size
    out = np.empty((cfg.n_chains, cfg.n_samples) + shape)
    accepted = np.zeros(cfg.n_chains)
    window_acc, window_n = 0.0, 0
    total = cfg.n_burn + cfg.n_samples * cfg.thin
    for it in range(total):
        if cfg.algorithm == "hmc":
            # a random trajectory length breaks the periodicity of the exact Gaussian rotation
            eps_it = eps * (1.0 + _JITTER * (2.0 * jitter.random() - 1.0))
            eta_new, u_new, log_ratio = _hmc_step(tgt, eta, u, eps_it, cfg.n_leapfrog, rngs)
        else:
            xi = _normals(rngs, shape)
            eta_new = math.cos(eps) * eta + math.sin(eps) * xi
            u_new = tgt.U(eta_new)
            log_ratio = u - u_new
        with np.errstate(over="ignore", invalid="ignore"):
            accept = np.log(_uniforms(rngs)) < np.where(np.isfinite(log_ratio), log_ratio, -np.inf)
        eta = np.where(accept[:, None, None], eta_new, eta)
        u = np.where(accept, u_new, u)
        if it < cfg.n_burn:
            window_acc += accept.mean()
            window_n += 1
            if cfg.adapt and window_n == 25:
                rate = window_acc / window_n
                if rate < 0.6:
                    eps *= 0.7
                elif rate > 0.85 and eps < _EPS_MAX:
                    eps = min(eps * 1.25, _EPS_MAX)
                window_acc, window_n = 0.0, 0
            continue
        accepted += accept
        k = it - cfg.n_burn
        if k % cfg.thin == 0:
            out[:, k // cfg.thin] = tgt.to_phi(eta)
    rate = accepted / (cfg.n_samples * cfg.thin)
    if np.any(rate == 0):
        raise RuntimeError("a chain accepted no proposal after burn-in")
    exact = not ispec.active and (alpha == 0 or f.is_zero)
    # high acceptance at the largest useful rotation is not a tuning problem
    too_high = (rate > 0.9) & (eps < _EPS_MAX)
    if not exact and np.any((rate < 0.2) | too_high):
        warnings.warn(f"acceptance rates {np.round(rate, 3)} outside the target window", RuntimeWarning)
    return SampleSet(out, True, rate, eps)


def _hmc_step(tgt: _Target, eta, u, eps, n_leap, rngs):
    p = _normals(rngs, eta.shape[1:])
    h0 = u + 0.5 * np.sum(p * p, axis=(-2, -1)) + 0.5 * np.sum(eta * eta, axis=(-2, -1))
    c, s = math.cos(eps), math.sin(eps)
    x = eta.copy()
    bad = np.zeros(eta.shape[0], dtype=bool)

    def kick(x, p, h):
        # a diverging trajectory is parked at zero and rejected at the end
        nonlocal bad
        with np.errstate(over="ignore", invalid="ignore"):
            phi = tgt.to_phi(np.where(bad[:, None, None], 0.0, x))
            g = tgt.grad_U_phi(phi)
            p = p - h * g
        bad |= ~np.all(np.isfinite(p), axis=(-2, -1))
        return np.where(bad[:, None, None], 0.0, p)

    p = kick(x, p, 0.5 * eps)
    for i in range(n_leap):
        x, p = c * x + s * p, -s * x + c * p
        p = kick(x, p, eps if i < n_leap - 1 else 0.5 * eps)
    x = np.where(bad[:, None, None], eta, x)
    with np.errstate(over="ignore", invalid="ignore"):
        u_new = tgt.U(x)
        h1 = u_new + 0.5 * np.sum(p * p, axis=(-2, -1)) + 0.5 * np.sum(x * x, axis=(-2, -1))
    log_ratio = np.where(bad, -np.inf, h0 - h1)
    return x, u_new, log_ratio


# ------------------------------------------------------------ log partition


@dataclass
class LogPartition:
    estimate: Estimate
    ess_fraction: float = math.nan
    flags: list = field(default_factory=list)
    table: list = field(default_factory=list)

    @property
    def value(self):
        return self.estimate.value

    @property
    def se(self):
        return self.estimate.se


def _potential_values(target, spec: LatticeSpec, phi: np.ndarray, sigma2: float) -> np.ndarray:
    if isinstance(target, InteractionSpec):
        return potential_direct(spec, phi, target, sigma2)
    return target.value(spec, phi)


def log_partition_mc(target, spec: LatticeSpec, n_samples: int, seed: int) -> LogPartition:
    """-log E[exp(-V(W_1))] over independent free-field draws.

    ``target`` is an InteractionSpec or any Functional (e.g. a linear one).
    """
    if n_samples < 1000:
        raise ValueError("log_partition_mc needs at least 1000 samples")
    ens = NoiseEnsemble(seed, n_samples)
    V = np.empty(n_samples)
    chunk = 4096
    for start in range(0, n_samples, chunk):
        idx = range(start, min(start + chunk, n_samples))
        W1 = sample_terminal(spec, ens, idx)
        V[idx.start: idx.stop] = _potential_values(target, spec, W1, green_at_origin(spec))
    shift = V.min()
    w = np.exp(-(V - shift))
    if not np.any(w > 0):
        raise FloatingPointError("all weights are zero")
    est = ratio_log(w)
    ess = effective_sample_size(w) / n_samples
    flags = []
    if ess < 0.05:
        flags.append("low effective sample size; estimate may be biased")
        warnings.warn(f"effective sample size fraction {ess:.3f} below 5%", RuntimeWarning)
    return LogPartition(Estimate(est.value + shift, est.se), ess, flags)


def log_partition_ti(ispec: InteractionSpec, spec: LatticeSpec, coupling_grid, cfg: MCMCConfig,
                     rule: str = "trapezoid") -> LogPartition:
    """Thermodynamic integration of E_lam[dV/dlam] from 0 to the final coupling."""
    grid = np.asarray(coupling_grid, dtype=float)
    if grid.size < 5 or grid[0] != 0 or np.any(np.diff(grid) <= 0):
        raise ValueError("coupling grid must start at 0, increase, and have at least 5 points")
    sigma2 = green_at_origin(spec)
    means, ses, table = [], [], []
    for k, lam in enumerate(grid):
        ss = mcmc_sample(ispec.with_coupling(lam), spec, _reseed(cfg, k))
        vals = coupling_derivative(spec, ss.flat(), ispec, sigma2)
        est = ss.estimate(vals)
        means.append(est.value)
        ses.append(est.se)
        table.append((float(lam), est.value, est.se))
    means, ses = np.array(means), np.array(ses)
    w = _quadrature_weights(grid, rule)
    value = float(w @ means)
    se = float(math.sqrt(np.sum((w * ses) ** 2)))
    flags = []
    if ispec.kind in ("phi4", "mass"):
        # d/dlam E_lam[dV/dlam] = -Var <= 0, so the integrand must not rise
        rises = np.diff(means) > 3 * np.hypot(ses[1:], ses[:-1])
        if np.any(rises):
            flags.append("integrand increases along the coupling path")
    return LogPartition(Estimate(value, se), math.nan, flags, table)


def _quadrature_weights(grid: np.ndarray, rule: str) -> np.ndarray:
    n = grid.size
    if rule == "trapezoid":
        w = np.zeros(n)
        d = np.diff(grid)
        w[:-1] += d / 2
        w[1:] += d / 2
        return w
    if rule == "simpson":
        return np.array([simpson(np.eye(n)[i], x=grid) for i in range(n)])
    raise ValueError(f"unknown quadrature rule {rule!r}")


def _reseed(cfg: MCMCConfig, k: int) -> MCMCConfig:
    from dataclasses import replace
    return replace(cfg, seed=(int(cfg.seed) * 1_000_003 + 7919 * (k + 1)) & _MASK64)


def laplace_mc(f: Functional, ispec: InteractionSpec, spec: LatticeSpec, cfg: MCMCConfig,
               hbar: float = 1.0, samples: SampleSet | None = None) -> LogPartition:
    """-hbar log E_{theta^V}[exp(-f / hbar)] from MCMC draws."""
    ss = samples if samples is not None else mcmc_sample(ispec, spec, cfg, hbar=hbar)
    fv = f.value(spec, ss.flat())
    shift = float(np.min(fv))
    w = np.exp(-(fv - shift) / hbar)
    est = ss.estimate(w)
    if not est.value > 0:
        raise FloatingPointError("all weights are zero")
    value = shift - hbar * math.log(est.value)
    se = hbar * est.se / est.value
    return LogPartition(Estimate(value, se), effective_sample_size(w) / w.size)


# ------------------------------------------------------------ comparisons


@dataclass
class MomentReport:
    rows: list  # (name, value_A, se_A, value_B, se_B, z)

    @property
    def passed(self) -> bool:
        return all(abs(r[-1]) <= 3 for r in self.rows)

    @property
    def max_abs_z(self) -> float:
        return max(abs(r[-1]) for r in self.rows)


def moment_compare(A: SampleSet, B: SampleSet, observables: list[MomentObservable]) -> MomentReport:
    rows = []
    for obs in observables:
        ea = A.estimate(obs(A.fields))
        eb = B.estimate(obs(B.fields))
        d = ea.value - eb.value
        s = math.hypot(ea.se, eb.se)
        z = 0.0 if d == 0 else (d / s if s > 0 else math.copysign(math.inf, d))
        rows.append((obs.name, ea.value, ea.se, eb.value, eb.se, z))
    return MomentReport(rows)


@dataclass
class ExpMomentReport:
    delta: float
    log_estimate: float
    ess_fraction: float
    cumulant_log_estimate: float
    overflow: bool
    message: str = ""


def exp_moment_probe(samples: SampleSet, spec: LatticeSpec, delta: float, weight: WeightSpec | None = None,
                     eps: float = 0.1) -> ExpMomentReport:
    """E[exp(delta ||phi||^4)] with the weighted W^{-eps,4} norm, in log form.

    The second-order cumulant value delta*mu + delta^2 var/2 is reported
    next to it as a lognormal-type cross-check for small delta.
    """
    weight = weight or WeightSpec(gamma=1.0, center=(spec.L // 2, spec.L // 2))
    X = weighted_sobolev_norm(spec, samples.flat(), weight, -eps, 4) ** 4
    if delta == 0:
        return ExpMomentReport(0.0, 0.0, 1.0, 0.0, False)
    a = delta * X
    if np.max(a) > 700:
        return ExpMomentReport(delta, math.inf, 0.0, math.nan, True, "exceeds float range at this delta")
    log_est = float(logsumexp(a) - math.log(a.size))
    w = np.exp(a - a.max())
    cum = float(delta * X.mean() + 0.5 * delta**2 * X.var())
    return ExpMomentReport(delta, log_est, effective_sample_size(w) / w.size, cum, False)


def tilted_means(f: Functional, ispec: InteractionSpec, spec: LatticeSpec, alpha_grid, cfg: MCMCConfig,
                 hbar: float = 1.0, inits=None) -> list[Estimate]:
    """E[f] under the measure tilted by exp(-alpha f / hbar), per alpha.

    ``inits`` optionally gives a starting configuration per alpha (for
    instance the deterministic minimiser), which removes most of the burn-in
    when the tilt moves the mass far from the origin.
    """
    out = []
    for k, a in enumerate(alpha_grid):
        init = None if inits is None else inits[k]
        ss = mcmc_sample(ispec, spec, _reseed(cfg, k), hbar=hbar, f=f, alpha=float(a), init=init)
        out.append(ss.estimate(f.value(spec, ss.flat())))
    return out


def functional_ti(f: Functional, ispec: InteractionSpec, spec: LatticeSpec, alpha_grid, cfg: MCMCConfig,
                  hbar: float = 1.0, inits=None, rule: str = "simpson") -> LogPartition:
    """-hbar log E[exp(-f / hbar)] as the integral over alpha in [0, 1] of E_alpha[f].

    This needs no reweighting, so it stays usable when exp(-f / hbar) is far
    too peaked for a direct Laplace estimate (small hbar).
    """
    grid = np.asarray(alpha_grid, dtype=float)
    if grid.size < 3 or grid[0] != 0 or grid[-1] != 1 or np.any(np.diff(grid) <= 0):
        raise ValueError("alpha grid must increase from 0 to 1 with at least three points")
    if rule == "simpson" and grid.size % 2 == 0:
        rule = "trapezoid"
    means = tilted_means(f, ispec, spec, grid, cfg, hbar=hbar, inits=inits)
    m = np.array([e.value for e in means])
    s = np.array([e.se for e in means])
    w = _quadrature_weights(grid, rule)
    table = [(float(a), e.value, e.se) for a, e in zip(grid, means)]
    return LogPartition(Estimate(float(w @ m), float(math.sqrt(np.sum((w * s) ** 2)))), math.nan, [], table)
