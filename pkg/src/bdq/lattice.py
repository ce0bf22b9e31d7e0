"""Periodic square lattice with spectral operators and weighted norms.

Every field is a real array whose last two axes are the L x L grid; any
leading axes are treated as a batch. Integrals carry the cell measure a**2,
so ``inner(spec, f, g) = a**2 * sum(f * g)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def _is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class LatticeSpec:
    """L x L periodic grid with spacing ``a`` and mass ``m``.

    ``eigenvalues[k1, k2]`` holds the spectrum of the discrete Laplacian
    ``-Delta`` in FFT ordering, (4/a^2)(sin^2(pi k1/L) + sin^2(pi k2/L)).
    """

    L: int
    a: float
    m: float
    eigenvalues: np.ndarray = field(init=False, repr=False, compare=False)
    _dense: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not isinstance(self.L, (int, np.integer)) or not _is_power_of_two(int(self.L)):
            raise ValueError(f"L must be a power of two, got {self.L!r}")
        if not self.a > 0:
            raise ValueError(f"lattice spacing must be positive, got {self.a!r}")
        if not self.m > 0:
            raise ValueError(f"mass must be positive, got {self.m!r}")
        object.__setattr__(self, "L", int(self.L))
        object.__setattr__(self, "a", float(self.a))
        object.__setattr__(self, "m", float(self.m))
        k = np.arange(self.L)
        s2 = np.sin(np.pi * k / self.L) ** 2
        lam = (4.0 / self.a**2) * (s2[:, None] + s2[None, :])
        lam.setflags(write=False)
        object.__setattr__(self, "eigenvalues", lam)
        object.__setattr__(self, "_dense", {})

    @property
    def side(self) -> float:
        return self.L * self.a

    @property
    def cell(self) -> float:
        return self.a * self.a

    @property
    def volume(self) -> float:
        return self.side**2

    @property
    def shape(self) -> tuple[int, int]:
        return (self.L, self.L)

    def symbol(self, s: float) -> np.ndarray:
        """Multiplier (m^2 + lambda_k)^s on the full FFT grid."""
        return (self.m**2 + self.eigenvalues) ** s

    def half_symbol(self, s: float) -> np.ndarray:
        """Same multiplier restricted to the rfft2 half grid."""
        return self.symbol(s)[:, : self.L // 2 + 1]

    def coordinates(self) -> tuple[np.ndarray, np.ndarray]:
        """Physical site coordinates (x, y), each of shape (L, L)."""
        x = np.arange(self.L) * self.a
        return np.meshgrid(x, x, indexing="ij")

    def torus_distance(self, center=(0, 0)) -> np.ndarray:
        """Periodic distance of every site from the grid point ``center``."""
        idx = np.arange(self.L)
        d = []
        for c in center:
            delta = np.abs(idx - int(c)) % self.L
            d.append(np.minimum(delta, self.L - delta) * self.a)
        return np.sqrt(d[0][:, None] ** 2 + d[1][None, :] ** 2)


def make_lattice(L: int, a: float = 1.0, m: float = 1.0) -> LatticeSpec:
    return LatticeSpec(L, a, m)


def _check_field(spec: LatticeSpec, f: np.ndarray) -> np.ndarray:
    f = np.asarray(f, dtype=float)
    if f.shape[-2:] != spec.shape:
        raise ValueError(f"field shape {f.shape} does not end in {spec.shape}")
    if not np.all(np.isfinite(f)):
        raise ValueError("field contains non-finite values")
    return f


def apply_multiplier(spec: LatticeSpec, mult: np.ndarray, f: np.ndarray) -> np.ndarray:
    """Multiply the Fourier coefficients of ``f`` by a real even multiplier."""
    f = _check_field(spec, f)
    half = mult[:, : spec.L // 2 + 1]
    return np.fft.irfft2(np.fft.rfft2(f) * half, s=spec.shape)


_DENSE_MAX_L = 16


def _dense_operator(spec: LatticeSpec, key, mult: np.ndarray) -> np.ndarray:
    cache = spec._dense
    if key not in cache:
        eye = np.eye(spec.L**2).reshape(-1, spec.L, spec.L)
        M = apply_multiplier(spec, mult, eye).reshape(spec.L**2, -1)
        cache[key] = np.ascontiguousarray(0.5 * (M + M.T))
    return cache[key]


def _apply_dense(spec: LatticeSpec, M: np.ndarray, f: np.ndarray) -> np.ndarray:
    return (f.reshape(-1, spec.L**2) @ M).reshape(f.shape)


def apply_spectral(spec: LatticeSpec, s: float, f: np.ndarray) -> np.ndarray:
    """Apply (m^2 - Delta)^s to ``f`` (batched over leading axes).

    Small lattices use a cached dense matrix, which beats batched tiny FFTs.
    """
    if s == 0:
        return _check_field(spec, f).copy()
    if spec.L <= _DENSE_MAX_L:
        M = _dense_operator(spec, ("mass", float(s)), spec.symbol(s))
        return _apply_dense(spec, M, _check_field(spec, f))
    return apply_multiplier(spec, spec.symbol(s), f)


def bessel_potential(spec: LatticeSpec, s: float, f: np.ndarray) -> np.ndarray:
    """Apply <D>^s = (1 - Delta)^(s/2), which ignores the mass."""
    mult = (1.0 + spec.eigenvalues) ** (s / 2.0)
    if spec.L <= _DENSE_MAX_L:
        return _apply_dense(spec, _dense_operator(spec, ("bessel", float(s)), mult), _check_field(spec, f))
    return apply_multiplier(spec, mult, f)


def inner(spec: LatticeSpec, f: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Cell-weighted inner product; reduces the last two axes only."""
    return spec.cell * np.sum(f * g, axis=(-2, -1))


def mode_inner(spec: LatticeSpec, f: np.ndarray, g: np.ndarray) -> float:
    """The same inner product computed from Fourier coefficients (Parseval)."""
    fh = np.fft.fft2(f)
    gh = np.fft.fft2(g)
    return float(spec.cell * np.sum((fh * np.conj(gh)).real) / spec.L**2)


def laplacian(spec: LatticeSpec, f: np.ndarray) -> np.ndarray:
    """Five-point periodic Laplacian in real space."""
    out = -4.0 * f
    for ax in (-2, -1):
        out = out + np.roll(f, 1, axis=ax) + np.roll(f, -1, axis=ax)
    return out / spec.a**2


def gradient(spec: LatticeSpec, f: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Forward differences along both axes."""
    return tuple((np.roll(f, -1, axis=ax) - f) / spec.a for ax in (-2, -1))


def delta_field(spec: LatticeSpec, site=(0, 0)) -> np.ndarray:
    d = np.zeros(spec.shape)
    d[site] = 1.0
    return d


def green_function(spec: LatticeSpec) -> np.ndarray:
    """Lattice kernel G(x) of (m^2 - Delta)^{-1} centred at the origin.

    The delta is normalised to unit integral (1/a^2 at the origin), so that
    ``a**2 * G.sum() == 1/m**2`` and ``G[0, 0]`` is the site variance of the
    free field.
    """
    return apply_spectral(spec, -1.0, delta_field(spec) / spec.cell)


def green_at_origin(spec: LatticeSpec) -> float:
    return float(np.sum(1.0 / (spec.m**2 + spec.eigenvalues)) / spec.volume)


# ---------------------------------------------------------------- weights


@dataclass(frozen=True)
class WeightSpec:
    """Polynomial weight rho(x) = (1 + d(x, center)^2)^(-gamma).

    ``alpha`` is the power used when the weight enters a norm as rho^alpha.
    gamma = 0 gives rho identically one.
    """

    gamma: float = 0.0
    center: tuple[int, int] = (0, 0)
    alpha: float = 1.0

    def rho(self, spec: LatticeSpec) -> np.ndarray:
        if self.gamma == 0:
            return np.ones(spec.shape)
        d = spec.torus_distance(self.center)
        return (1.0 + d**2) ** (-self.gamma)

    def power(self, spec: LatticeSpec, alpha: float | None = None) -> np.ndarray:
        alpha = self.alpha if alpha is None else alpha
        if self.gamma == 0:
            return np.ones(spec.shape)
        return self.rho(spec) ** alpha


def _lp(spec: LatticeSpec, g: np.ndarray, p: float) -> np.ndarray:
    if np.isinf(p):
        return np.max(np.abs(g), axis=(-2, -1))
    return (spec.cell * np.sum(np.abs(g) ** p, axis=(-2, -1))) ** (1.0 / p)


def weighted_sobolev_norm(spec: LatticeSpec, f: np.ndarray, w: WeightSpec, s: float, p: float):
    """||rho^alpha <D>^s f||_{L^p}; batched over leading axes."""
    if p < 1:
        raise ValueError("p must be >= 1")
    g = bessel_potential(spec, s, f) if s != 0 else _check_field(spec, f)
    return _lp(spec, w.power(spec) * g, p)


def shell_index(spec: LatticeSpec) -> np.ndarray:
    """Dyadic shell label of each FFT mode.

    Shell -1 is the zero mode and shell i >= 0 holds integer wavenumbers with
    2^(i-1) < |n| <= 2^i, so labels run from -1 to log2(L).
    """
    n = np.fft.fftfreq(spec.L, d=1.0 / spec.L)
    kappa = np.sqrt(n[:, None] ** 2 + n[None, :] ** 2)
    shell = np.full(spec.shape, -1, dtype=int)
    nz = kappa > 0
    shell[nz] = np.ceil(np.log2(kappa[nz]) - 1e-12).astype(int)
    shell[nz] = np.maximum(shell[nz], 0)
    return shell


def littlewood_paley(spec: LatticeSpec, f: np.ndarray) -> dict[int, np.ndarray]:
    """Sharp Fourier-annulus blocks of ``f``; they sum back to ``f``."""
    shells = shell_index(spec)
    fh = np.fft.fft2(_check_field(spec, f))
    return {
        int(i): np.fft.ifft2(fh * (shells == i)).real
        for i in range(-1, int(np.log2(spec.L)) + 1)
    }


def besov_norm(spec: LatticeSpec, f: np.ndarray, w: WeightSpec, s: float, p: float, q: float):
    """Weighted Besov norm (sum_i 2^{isq} ||Delta_i(rho^alpha f)||_p^q)^{1/q}."""
    blocks = littlewood_paley(spec, w.power(spec) * _check_field(spec, f))
    terms = np.array([2.0 ** (i * s) * _lp(spec, b, p) for i, b in blocks.items()])
    if np.isinf(q):
        return terms.max(axis=0)
    return np.sum(terms**q, axis=0) ** (1.0 / q)


@dataclass
class WeightReport:
    max_ratio: float
    commutator_ratio: float
    eps: float
    passed: bool


def validate_weight(w: WeightSpec, eps: float, spec: LatticeSpec, n_fields: int = 100, seed: int = 0) -> WeightReport:
    """Discrete admissibility check for a weight.

    Reports max_x (|Delta r| + |grad r|)/r with r = rho^{1/2}, and the largest
    ratio ||[Delta, r] f|| / (||r f|| + ||r grad f||) over random fields.
    Passes when both are at most ``eps``.
    """
    r = np.sqrt(w.rho(spec))
    gx, gy = gradient(spec, r)
    ratio = (np.abs(laplacian(spec, r)) + np.hypot(gx, gy)) / r
    max_ratio = float(ratio.max())

    rng = np.random.default_rng(seed)
    fields = rng.standard_normal((n_fields,) + spec.shape)
    comm = laplacian(spec, r * fields) - r * laplacian(spec, fields)
    fx, fy = gradient(spec, fields)
    h1 = _lp(spec, r * fields, 2) + _lp(spec, r * np.hypot(fx, fy), 2)
    comm_ratio = float(np.max(_lp(spec, comm, 2) / h1))
    passed = max_ratio <= eps and comm_ratio <= eps
    return WeightReport(max_ratio, comm_ratio, eps, passed)
