"""Wick-renormalised interactions, their drift expansions and gradients.

Two calling conventions coexist:

* the *shifted* forms take the enhancement of the Gaussian part and a drift
  Z and never evaluate the pure-noise term (used by the control problem);
* the *direct* forms take a full configuration phi and a Wick constant
  (used by the samplers and as the oracle for the shifted algebra).

Gradients are L^2(a^2 dx) gradients, so <grad, K> = a^2 sum(grad * K) is the
directional derivative.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import logsumexp

from .gff import Enhanced, wick_power
from .lattice import LatticeSpec, apply_spectral, inner

KINDS = ("none", "phi4", "exponential", "mass")


@dataclass(frozen=True)
class InteractionSpec:
    """Which potential, its couplings and its spatial cutoff.

    ``cutoff`` is the indicator of the interaction region for phi4 and the
    smooth profile xi for the exponential model; ``None`` means identically
    one. ``mass`` is the Gaussian test potential lam * int cutoff phi^2 used
    to validate thermodynamic integration against a determinant.
    """

    kind: str = "none"
    lam: float = 0.0
    beta: float = 0.0
    hbar: float = 1.0
    cutoff: np.ndarray | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown interaction kind {self.kind!r}")
        if self.lam < 0:
            raise ValueError("coupling must be non-negative")
        if not self.hbar > 0:
            raise ValueError("hbar must be positive")
        if self.kind == "exponential" and not 0 < self.beta**2 < 8 * math.pi:
            raise ValueError("exponential model needs 0 < beta^2 < 8 pi")
        if self.cutoff is not None:
            c = np.asarray(self.cutoff, dtype=float)
            if np.any(c < 0) or not np.all(np.isfinite(c)):
                raise ValueError("cutoff must be finite and non-negative")
            object.__setattr__(self, "cutoff", c)

    @property
    def active(self) -> bool:
        return self.kind != "none" and self.lam > 0

    def mask(self, spec: LatticeSpec) -> np.ndarray:
        if self.cutoff is None:
            return np.ones(spec.shape)
        if self.cutoff.shape != spec.shape:
            raise ValueError("cutoff shape does not match the lattice")
        return self.cutoff

    def with_coupling(self, lam: float) -> "InteractionSpec":
        return replace(self, lam=float(lam), cutoff=self.cutoff)


def semiclassical_rescale(ispec: InteractionSpec, hbar: float) -> InteractionSpec:
    if not hbar > 0:
        raise ValueError("hbar must be positive")
    return replace(ispec, hbar=float(hbar), cutoff=ispec.cutoff)


def _require(ispec: InteractionSpec, kind: str):
    if ispec.kind != kind:
        raise ValueError(f"expected a {kind} interaction, got {ispec.kind!r}")


def _masked_integral(spec: LatticeSpec, mask: np.ndarray, g: np.ndarray) -> np.ndarray:
    return spec.cell * np.sum(mask * g, axis=(-2, -1))


# ------------------------------------------------------------------ phi^4


def potential_phi4_direct(spec: LatticeSpec, phi: np.ndarray, ispec: InteractionSpec, sigma2: float):
    _require(ispec, "phi4")
    return ispec.lam * _masked_integral(spec, ispec.mask(spec), wick_power(phi, 4, sigma2))


def potential_phi4_expanded(spec: LatticeSpec, enh: Enhanced, Z: np.ndarray, ispec: InteractionSpec):
    """lam int_Lambda (4 W3 Z + 6 W2 Z^2 + 4 W Z^3 + Z^4).

    Equals the direct potential at W + Z minus the pure-noise term int [[W^4]].
    """
    _require(ispec, "phi4")
    g = Z * (4.0 * enh.wick3 + Z * (6.0 * enh.wick2 + Z * (4.0 * enh.W + Z)))
    return ispec.lam * _masked_integral(spec, ispec.mask(spec), g)


def grad_potential_phi4(spec: LatticeSpec, enh: Enhanced, Z: np.ndarray, ispec: InteractionSpec) -> np.ndarray:
    _require(ispec, "phi4")
    g = 4.0 * enh.wick3 + Z * (12.0 * enh.wick2 + Z * (12.0 * enh.W + 4.0 * Z))
    return ispec.lam * ispec.mask(spec) * g


def hess_potential_phi4(spec: LatticeSpec, enh: Enhanced, Z: np.ndarray, ispec: InteractionSpec) -> np.ndarray:
    """Pointwise second derivative in Z (a diagonal operator)."""
    _require(ispec, "phi4")
    return ispec.lam * ispec.mask(spec) * (12.0 * enh.wick2 + 24.0 * enh.W * Z + 12.0 * Z * Z)


# ----------------------------------------------------------- exponential


def potential_exp(spec: LatticeSpec, gmc: np.ndarray, Z: np.ndarray, ispec: InteractionSpec):
    """lam int xi exp(beta Z) dM, accumulated in log space for large beta Z."""
    _require(ispec, "exponential")
    xi = ispec.mask(spec)
    bz = ispec.beta * Z
    if np.max(bz, initial=-np.inf) <= 100.0:
        return ispec.lam * _masked_integral(spec, xi, np.exp(bz) * gmc)
    weights = ispec.lam * spec.cell * xi * gmc
    weights = np.broadcast_to(weights, np.broadcast_shapes(weights.shape, bz.shape))
    with np.errstate(over="ignore"):
        return np.exp(logsumexp(bz, b=weights, axis=(-2, -1)))


def grad_potential_exp(spec: LatticeSpec, gmc: np.ndarray, Z: np.ndarray, ispec: InteractionSpec) -> np.ndarray:
    _require(ispec, "exponential")
    with np.errstate(over="ignore"):
        return ispec.lam * ispec.beta * ispec.mask(spec) * np.exp(ispec.beta * Z) * gmc


def potential_exp_direct(spec: LatticeSpec, phi: np.ndarray, ispec: InteractionSpec, sigma2: float):
    """lam int xi [[exp(beta phi)]] with [[.]] the mean-one normalisation."""
    _require(ispec, "exponential")
    dens = np.exp(ispec.beta * phi - 0.5 * ispec.beta**2 * sigma2)
    return ispec.lam * _masked_integral(spec, ispec.mask(spec), dens)


# -------------------------------------------------- generic direct access


def potential_direct(spec: LatticeSpec, phi: np.ndarray, ispec: InteractionSpec, sigma2: float):
    """V(phi) for any kind, batched over leading axes."""
    if ispec.kind == "phi4":
        return potential_phi4_direct(spec, phi, ispec, sigma2)
    if ispec.kind == "exponential":
        return potential_exp_direct(spec, phi, ispec, sigma2)
    if ispec.kind == "mass":
        return ispec.lam * _masked_integral(spec, ispec.mask(spec), phi * phi)
    return np.zeros(np.shape(phi)[:-2])


def grad_potential_direct(spec: LatticeSpec, phi: np.ndarray, ispec: InteractionSpec, sigma2: float) -> np.ndarray:
    mask = ispec.mask(spec)
    if ispec.kind == "phi4":
        return ispec.lam * mask * (4.0 * phi**3 - 12.0 * sigma2 * phi)
    if ispec.kind == "exponential":
        return ispec.lam * ispec.beta * mask * np.exp(ispec.beta * phi - 0.5 * ispec.beta**2 * sigma2)
    if ispec.kind == "mass":
        return 2.0 * ispec.lam * mask * phi
    return np.zeros_like(phi)


def coupling_derivative(spec: LatticeSpec, phi: np.ndarray, ispec: InteractionSpec, sigma2: float):
    """dV/dlam, i.e. the potential at unit coupling."""
    return potential_direct(spec, phi, ispec.with_coupling(1.0), sigma2)


# --------------------------------------------------------- rate function


def rate_function_J(spec: LatticeSpec, phi: np.ndarray, lam: float, mask: np.ndarray | None = None):
    """lam int_Lambda phi^4 + 1/2 <phi, (m^2 - Delta) phi>, with the bare quartic."""
    mask = np.ones(spec.shape) if mask is None else mask
    quart = _masked_integral(spec, mask, phi**4)
    return lam * quart + 0.5 * inner(spec, phi, apply_spectral(spec, 1.0, phi))


def grad_rate_function_J(spec: LatticeSpec, phi: np.ndarray, lam: float, mask: np.ndarray | None = None) -> np.ndarray:
    mask = np.ones(spec.shape) if mask is None else mask
    return 4.0 * lam * mask * phi**3 + apply_spectral(spec, 1.0, phi)
