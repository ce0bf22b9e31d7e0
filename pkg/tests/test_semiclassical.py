import numpy as np
import pytest

from bdq.interactions import InteractionSpec
from bdq.lattice import LatticeSpec, WeightSpec
from bdq.observables import QuadraticObservable, bump
from bdq.oracles import MCMCConfig
from bdq.semiclassical import (
    GaussianQuadratic,
    deterministic_minimize,
    hbar_sweep,
    linear_solve,
    lipschitz_ratios,
    semiclassical_derivative_chain,
    two_start,
)

SPEC = LatticeSpec(4, 1.0, 1.0)
F = QuadraticObservable(1.0, bump(SPEC, 1.5, (2, 2)), WeightSpec(0.5, (2, 2)))
FAST = MCMCConfig(n_burn=100, n_samples=800, n_chains=2, seed=5)


def test_newton_matches_linear_solve():
    r = deterministic_minimize(F, 0.0, SPEC)
    np.testing.assert_allclose(r.phi, linear_solve(F, SPEC), atol=1e-10)
    assert r.value == pytest.approx(GaussianQuadratic(SPEC, F).limit())


def test_two_start_agreement_and_monotone_trace():
    rep = two_start(F, 0.5, SPEC, seed=2)
    assert rep.agree
    assert max(rep.first.residual, rep.second.residual) < 1e-8
    assert np.all(np.diff(rep.second.trace) < 0)


def test_lipschitz_ratios_stable():
    r = lipschitz_ratios(F, 0.5, SPEC)
    assert max(r) / min(r) < 2


def test_gaussian_value_tends_to_limit():
    gq = GaussianQuadratic(SPEC, F)
    gaps = [abs(gq.value(h) - gq.limit()) for h in (1, 0.5, 0.25, 0.125, 1e-4)]
    assert all(b < a for a, b in zip(gaps, gaps[1:]))
    assert gaps[-1] < 1e-3


def test_hbar_sweep_gaussian():
    rep = hbar_sweep(F, InteractionSpec("none"), SPEC, [1.0, 0.25], FAST, alpha_grid=np.linspace(0, 1, 5))
    gq = GaussianQuadratic(SPEC, F)
    for row in rep.rows:
        assert abs(row.value.z(gq.value(row.hbar))) < 4


def test_hbar_list_must_decrease():
    with pytest.raises(ValueError):
        hbar_sweep(F, InteractionSpec("none"), SPEC, [0.5, 1.0], FAST)


def test_chain_rejects_small_alpha():
    with pytest.raises(ValueError):
        semiclassical_derivative_chain(F, InteractionSpec("none"), SPEC, [0.01], [1.0], FAST)
