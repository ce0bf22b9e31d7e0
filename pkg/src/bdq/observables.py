"""Test functionals f(phi) with gradients, and scalar moment observables.

A functional exposes ``value(spec, phi)`` (batched over leading axes),
``grad(spec, phi)`` (the L^2(a^2) gradient field) and ``hessp(spec, phi, v)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .gff import wick_power
from .lattice import LatticeSpec, WeightSpec, bessel_potential, inner


class Functional:
    is_zero = False

    def value(self, spec: LatticeSpec, phi: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def grad(self, spec: LatticeSpec, phi: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def hessp(self, spec: LatticeSpec, phi: np.ndarray, v: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def scaled(self, alpha: float) -> "Functional":
        return Scaled(self, float(alpha))


class ZeroFunctional(Functional):
    is_zero = True

    def value(self, spec, phi):
        return np.zeros(np.shape(phi)[:-2])

    def grad(self, spec, phi):
        return np.zeros_like(phi)

    def hessp(self, spec, phi, v):
        return np.zeros_like(v)


@dataclass
class Scaled(Functional):
    base: Functional
    alpha: float

    @property
    def is_zero(self):
        return self.alpha == 0 or self.base.is_zero

    def value(self, spec, phi):
        return self.alpha * self.base.value(spec, phi)

    def grad(self, spec, phi):
        return self.alpha * self.base.grad(spec, phi)

    def hessp(self, spec, phi, v):
        return self.alpha * self.base.hessp(spec, phi, v)


@dataclass
class LinearFunctional(Functional):
    """f(phi) = <ell, phi> + offset."""

    ell: np.ndarray
    offset: float = 0.0

    def value(self, spec, phi):
        return inner(spec, self.ell, phi) + self.offset

    def grad(self, spec, phi):
        return np.broadcast_to(self.ell, np.shape(phi)).copy()

    def hessp(self, spec, phi, v):
        return np.zeros_like(v)


@dataclass
class ConstantFunctional(Functional):
    c: float

    def value(self, spec, phi):
        return np.full(np.shape(phi)[:-2], float(self.c))

    def grad(self, spec, phi):
        return np.zeros_like(phi)

    def hessp(self, spec, phi, v):
        return np.zeros_like(v)


@dataclass
class QuadraticObservable(Functional):
    """f(psi) = C int rho ((1 - Delta)^{-1/2}(psi - target))^2."""

    C: float
    target: np.ndarray
    weight: WeightSpec = field(default_factory=WeightSpec)

    def __post_init__(self):
        if self.C < 0:
            raise ValueError("C must be non-negative")

    @property
    def is_zero(self):
        return self.C == 0

    def _smooth(self, spec, g):
        return bessel_potential(spec, -1.0, g)

    def value(self, spec, phi):
        u = self._smooth(spec, phi - self.target)
        return self.C * spec.cell * np.sum(self.weight.rho(spec) * u * u, axis=(-2, -1))

    def grad(self, spec, phi):
        return self.hessp(spec, phi, phi - self.target)

    def hessp(self, spec, phi, v):
        return 2.0 * self.C * self._smooth(spec, self.weight.rho(spec) * self._smooth(spec, v))

    def operator_matrix(self, spec: LatticeSpec) -> np.ndarray:
        """Q as an (L^2, L^2) matrix acting on flattened fields, grad f = Q (psi - target)."""
        eye = np.eye(spec.L**2).reshape(spec.L**2, spec.L, spec.L)
        cols = self.hessp(spec, None, eye).reshape(spec.L**2, -1)
        return cols.T


def bump(spec: LatticeSpec, radius: float, center=(0, 0), amplitude: float = 1.0) -> np.ndarray:
    """Smooth compactly supported bump exp(1 - 1/(1 - (d/R)^2)), peak ``amplitude``."""
    d = spec.torus_distance(center) / radius
    out = np.zeros(spec.shape)
    inside = d < 1
    out[inside] = np.exp(1.0 - 1.0 / (1.0 - d[inside] ** 2))
    return amplitude * out


# ------------------------------------------------------ moment observables


@dataclass
class MomentObservable:
    """Named scalar statistic of a configuration, batched over leading axes."""

    name: str
    fn: object

    def __call__(self, phi: np.ndarray) -> np.ndarray:
        return self.fn(phi)


def moment_family(spec: LatticeSpec, sigma2: float, weight: WeightSpec | None = None,
                  offsets=((0, 0), (0, 1), (1, 1), (0, 2)), mask: np.ndarray | None = None,
                  bump_radius: float | None = None) -> list[MomentObservable]:
    """The registered comparison observables.

    Site mean, int rho phi^2, translation-averaged two-point function at each
    offset, int_Lambda [[phi^4]], and a bump-smeared field average.
    """
    weight = weight or WeightSpec(gamma=0.5, center=(spec.L // 2, spec.L // 2))
    rho = weight.rho(spec)
    mask = np.ones(spec.shape) if mask is None else mask
    radius = bump_radius or spec.side / 4
    b = bump(spec, radius, center=(spec.L // 2, spec.L // 2))
    obs = [
        MomentObservable("site_mean", lambda p: p.mean(axis=(-2, -1))),
        MomentObservable("weighted_square", lambda p: inner(spec, rho, p * p)),
    ]
    for r in offsets:
        def two_point(p, r=tuple(r)):
            return np.mean(p * np.roll(p, shift=(-r[0], -r[1]), axis=(-2, -1)), axis=(-2, -1))
        obs.append(MomentObservable(f"two_point_{r[0]}_{r[1]}", two_point))
    obs.append(MomentObservable("wick4", lambda p: inner(spec, mask, wick_power(p, 4, sigma2))))
    obs.append(MomentObservable("bump_average", lambda p: inner(spec, b, p)))
    return obs
