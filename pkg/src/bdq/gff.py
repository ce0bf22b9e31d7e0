"""Brownian-martingale sampling of the lattice Gaussian free field.

The cylindrical noise increment on a step of length dt is sqrt(dt) * xi / a
with xi standard normal per site, so that <X_1, f> has variance <f, f>.
W_t = (m^2 - Delta)^{-1/2} X_t is then a GFF martingale with
Cov(W_s(x), W_t(y)) = min(s, t) G(x - y).

Noise is drawn from a Philox stream keyed by (seed, sample index), which
makes every variate a pure function of (seed, sample, step, site).
"""
from __future__ import annotations

import os
import struct
import warnings
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .lattice import LatticeSpec, apply_multiplier, apply_spectral, green_at_origin, green_function
from .stats import Estimate, mean_se

_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class TimeGrid:
    n_t: int

    def __post_init__(self):
        if int(self.n_t) < 1:
            raise ValueError("n_t must be at least 1")
        object.__setattr__(self, "n_t", int(self.n_t))

    @property
    def dt(self) -> float:
        return 1.0 / self.n_t

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_t + 1) / self.n_t

    def index(self, t: float) -> int:
        j = int(round(t * self.n_t))
        if abs(j - t * self.n_t) > 1e-9 or not 0 <= j <= self.n_t:
            raise ValueError(f"t={t} is not a grid time of n_t={self.n_t}")
        return j


@dataclass(frozen=True)
class NoiseEnsemble:
    """Reproducible per-sample standard-normal streams."""

    seed: int
    n_samples: int

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError("n_samples must be positive")

    def generator(self, i: int) -> np.random.Generator:
        if not 0 <= i < self.n_samples:
            raise IndexError(f"sample index {i} outside [0, {self.n_samples})")
        key = ((int(self.seed) & _MASK64) << 64) | int(i)
        return np.random.Generator(np.random.Philox(key=key))

    def normals(self, i: int, n_t: int, L: int) -> np.ndarray:
        """Shape (n_t, L, L). Step j does not depend on n_t beyond j."""
        return self.generator(i).standard_normal((n_t, L, L))

    def block(self, indices, n_t: int, L: int) -> np.ndarray:
        indices = list(indices)
        out = np.empty((len(indices), n_t, L, L))
        for k, i in enumerate(indices):
            out[k] = self.normals(i, n_t, L)
        return out

    def split(self, n_first: int) -> tuple[range, range]:
        return range(0, n_first), range(n_first, self.n_samples)


def worker_count() -> int:
    """Worker count from BDQ_WORKERS (default 1)."""
    try:
        return max(1, int(os.environ.get("BDQ_WORKERS", "1")))
    except ValueError:
        return 1


class Enhanced(NamedTuple):
    """Field together with its second and third Wick powers at one time."""

    W: np.ndarray
    wick2: np.ndarray
    wick3: np.ndarray
    sigma2: float

    def scaled(self, hbar: float) -> "Enhanced":
        """Enhancement of hbar^{1/2} W, whose Wick constant is hbar * sigma2."""
        if hbar == 1:
            return self
        h = np.sqrt(hbar)
        return Enhanced(h * self.W, hbar * self.wick2, hbar * h * self.wick3, hbar * self.sigma2)


def wick_power(phi: np.ndarray, n: int, sigma2: float) -> np.ndarray:
    """Hermite-renormalised power of ``phi`` with variance parameter sigma2."""
    if n == 0:
        return np.ones_like(phi)
    if n == 1:
        return phi
    if n == 2:
        return phi * phi - sigma2
    if n == 3:
        return phi * (phi * phi - 3.0 * sigma2)
    if n == 4:
        p2 = phi * phi
        return p2 * p2 - 6.0 * sigma2 * p2 + 3.0 * sigma2**2
    raise ValueError("Wick powers implemented up to degree 4")


@dataclass
class EnhancedGFFPath:
    """Time-discretised GFF martingale for one sample or a batch.

    ``W`` has shape (..., n_t + 1, L, L) with W[..., 0, :, :] == 0.
    """

    spec: LatticeSpec
    grid: TimeGrid
    W: np.ndarray
    sigma2: np.ndarray = field(init=False)
    _cache: dict = field(init=False, repr=False)

    def __post_init__(self):
        self.sigma2 = wick_sigma(self.spec, self.grid.times)
        self._cache = {}

    @property
    def X(self) -> np.ndarray:
        return apply_spectral(self.spec, 0.5, self.W)

    @property
    def n_samples(self) -> int:
        return int(np.prod(self.W.shape[:-3])) if self.W.ndim > 3 else 1

    def at(self, j: int) -> np.ndarray:
        return self.W[..., j, :, :]

    def enhanced(self, j: int) -> Enhanced:
        # memoised: optimisers revisit the same paths many times
        if j not in self._cache:
            Wj = self.at(j)
            s2 = float(self.sigma2[j])
            self._cache[j] = Enhanced(Wj, wick_power(Wj, 2, s2), wick_power(Wj, 3, s2), s2)
        return self._cache[j]

    def gmc(self, beta: float, j: int | None = None) -> np.ndarray:
        j = self.grid.n_t if j is None else j
        return gmc_density(self.spec, self.at(j), beta, float(self.sigma2[j]))

    def subset(self, idx) -> "EnhancedGFFPath":
        return EnhancedGFFPath(self.spec, self.grid, self.W[idx])


def wick_sigma(spec: LatticeSpec, t) -> np.ndarray | float:
    """sigma^2_t = t G(0)."""
    t = np.asarray(t, dtype=float)
    if np.any(t < 0) or np.any(t > 1 + 1e-12):
        raise ValueError("t must lie in [0, 1]")
    out = t * green_at_origin(spec)
    return float(out) if out.ndim == 0 else out


def enhance(path: EnhancedGFFPath, t: float) -> tuple[np.ndarray, np.ndarray]:
    e = path.enhanced(path.grid.index(t))
    return e.wick2, e.wick3


def paths_from_normals(spec: LatticeSpec, grid: TimeGrid, xi: np.ndarray) -> EnhancedGFFPath:
    """Build W paths from standard normals of shape (..., n_t, L, L)."""
    incr = np.sqrt(grid.dt) / spec.a * xi
    dW = apply_multiplier(spec, spec.symbol(-0.5), incr)
    W = np.zeros(xi.shape[:-3] + (grid.n_t + 1,) + spec.shape)
    np.cumsum(dW, axis=-3, out=W[..., 1:, :, :])
    return EnhancedGFFPath(spec, grid, W)


def sample_path(spec: LatticeSpec, grid: TimeGrid, ens: NoiseEnsemble, i: int) -> EnhancedGFFPath:
    return paths_from_normals(spec, grid, ens.normals(i, grid.n_t, spec.L))


def sample_paths(spec: LatticeSpec, grid: TimeGrid, ens: NoiseEnsemble, indices=None) -> EnhancedGFFPath:
    """Batched paths, shape (n, n_t + 1, L, L), for the given sample indices."""
    indices = range(ens.n_samples) if indices is None else indices
    return paths_from_normals(spec, grid, ens.block(indices, grid.n_t, spec.L))


def sample_terminal(spec: LatticeSpec, ens: NoiseEnsemble, indices=None) -> np.ndarray:
    """W_1 draws only (a single step), shape (n, L, L)."""
    return sample_paths(spec, TimeGrid(1), ens, indices).W[:, 1]


# ------------------------------------------------------------------- GMC


def gmc_density(spec: LatticeSpec, W1: np.ndarray, beta: float, sigma2: float | None = None) -> np.ndarray:
    """Mean-one lattice chaos density exp(beta W - beta^2 sigma^2 / 2)."""
    if beta**2 >= 8 * np.pi:
        warnings.warn(f"beta^2 = {beta**2:.3f} is not below 8 pi; chaos is degenerate", RuntimeWarning)
    if sigma2 is None:
        sigma2 = green_at_origin(spec)
    with np.errstate(invalid="ignore"):
        return np.exp(beta * np.asarray(W1, dtype=float) - 0.5 * beta**2 * sigma2)


def ball_mask(spec: LatticeSpec, radius: float, center=(0, 0)) -> np.ndarray:
    return (spec.torus_distance(center) <= radius + 1e-12).astype(float)


def gmc_mass_all_centres(spec: LatticeSpec, M: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """M(A + x) for every translate x, via circular correlation."""
    Mh = np.fft.rfft2(M)
    Ah = np.conj(np.fft.rfft2(mask))
    return spec.cell * np.fft.irfft2(Mh * Ah, s=spec.shape)


def gmc_second_moment_exact(spec: LatticeSpec, beta: float, mask: np.ndarray) -> float:
    """a^4 sum_{x,y in A} exp(beta^2 G(x - y)) via the autocorrelation of A."""
    G = green_function(spec)
    auto = np.fft.irfft2(np.abs(np.fft.rfft2(mask)) ** 2, s=spec.shape)
    return float(spec.cell**2 * np.sum(np.rint(auto) * np.exp(beta**2 * G)))


@dataclass
class ScalingReport:
    slope: float
    theory_slope: float
    radii: np.ndarray
    moments: np.ndarray
    se: np.ndarray
    relative_error: float


def gmc_scaling_experiment(spec: LatticeSpec, beta: float, p: float, radii, n_samples: int, seed: int,
                           chunk: int = 64) -> ScalingReport:
    """Log-log slope of E[M(B(x, r))^p]^{1/p} against r.

    The moment is averaged over all ball centres of each sample (translation
    invariance); samples are independent so the SE comes from per-sample means.
    """
    radii = np.asarray(sorted(radii), dtype=float)
    if len(radii) < 3 or radii[-1] / radii[0] < 4 - 1e-9:
        raise ValueError("need at least three radii spanning two doublings")
    if beta > 0 and not 1 < p < 8 * np.pi / beta**2:
        raise ValueError("p outside the finite-moment window")
    ens = NoiseEnsemble(seed, n_samples)
    masks = [ball_mask(spec, r) for r in radii]
    per_sample = np.empty((n_samples, len(radii)))
    for start in range(0, n_samples, chunk):
        idx = range(start, min(start + chunk, n_samples))
        M = gmc_density(spec, sample_terminal(spec, ens, idx), beta)
        for k, mask in enumerate(masks):
            mass = gmc_mass_all_centres(spec, M, mask)
            per_sample[idx.start: idx.stop, k] = np.mean(np.maximum(mass, 0.0) ** p, axis=(-2, -1))
    mom = per_sample.mean(axis=0)
    mom_se = per_sample.std(axis=0, ddof=1) / np.sqrt(n_samples)
    y = np.log(mom) / p
    slope = float(np.polyfit(np.log(radii), y, 1)[0])
    theory = 2.0 - (p - 1.0) * beta**2 / (4 * np.pi)
    return ScalingReport(slope, theory, radii, mom, mom_se, abs(slope - theory) / theory)


# ------------------------------------------------------------ covariance


@dataclass
class CovarianceReport:
    rows: list  # (s, t, offset, empirical, se, exact, z)
    independence: Estimate

    @property
    def max_abs_z(self) -> float:
        zs = [abs(r[-1]) for r in self.rows] + [abs(self.independence.value / self.independence.se)]
        return float(max(zs))


def covariance_check(ens: NoiseEnsemble, spec: LatticeSpec, grid: TimeGrid, offsets, times=None) -> CovarianceReport:
    """Empirical E[W_s(x) W_t(x + r)] against min(s, t) G(r)."""
    if ens.n_samples < 1000:
        raise ValueError("covariance_check needs at least 1000 samples")
    if times is None:
        times = [(1.0, 1.0)] + ([(0.5, 1.0)] if grid.n_t % 2 == 0 else [])
    paths = sample_paths(spec, grid, ens)
    G = green_function(spec)
    rows = []
    for s, t in times:
        Ws, Wt = paths.at(grid.index(s)), paths.at(grid.index(t))
        for r in offsets:
            shifted = np.roll(Wt, shift=(-r[0], -r[1]), axis=(-2, -1))
            est = mean_se(np.mean(Ws * shifted, axis=(-2, -1)))
            exact = min(s, t) * G[r[0] % spec.L, r[1] % spec.L]
            rows.append((s, t, tuple(r), est.value, est.se, exact, (est.value - exact) / est.se))
    jh = grid.index(0.5) if grid.n_t % 2 == 0 else grid.n_t // 2
    W_half, W_one = paths.at(jh), paths.at(grid.n_t)
    corr = mean_se(np.mean(W_half * (W_one - W_half), axis=(-2, -1)))
    return CovarianceReport(rows, corr)


# ----------------------------------------------------------- persistence

_HEADER = struct.Struct("<4sqddqQq")
_MAGIC = b"BDQE"


def save_ensemble(path, spec: LatticeSpec, n_t: int, seed: int, data: np.ndarray) -> None:
    """Write ``data`` of shape (n_samples, n_t, L, L) atomically."""
    data = np.ascontiguousarray(data, dtype="<f8")
    if data.shape[1:] != (n_t, spec.L, spec.L):
        raise ValueError(f"data shape {data.shape} does not match header")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, spec.L, spec.a, spec.m, n_t, int(seed) & _MASK64, data.shape[0]))
        fh.write(data.tobytes())
    os.replace(tmp, path)


def load_ensemble(path) -> tuple[LatticeSpec, int, int, np.ndarray]:
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        magic, L, a, m, n_t, seed, n = _HEADER.unpack(head)
        if magic != _MAGIC:
            raise ValueError(f"{path} is not an ensemble file")
        data = np.frombuffer(fh.read(), dtype="<f8")
    if data.size != n * n_t * L * L:
        raise ValueError(f"{path} is truncated")
    return LatticeSpec(L, a, m), n_t, seed, data.reshape(n, n_t, L, L).astype(float)
