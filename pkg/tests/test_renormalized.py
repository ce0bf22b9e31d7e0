import math

import numpy as np
import pytest

from bdq.control import ControlProblem, OptimizerConfig, TestControl, first_order_guess, simulate
from bdq.gff import NoiseEnsemble, TimeGrid, sample_paths
from bdq.interactions import InteractionSpec, potential_phi4_direct
from bdq.lattice import LatticeSpec
from bdq.observables import LinearFunctional, bump
from bdq.renormalized import (
    GaussianLinear,
    PerturbedEnsemble,
    VariationalSetup,
    derivative_identity,
    h_tilde_exp,
    h_tilde_phi4_samples,
    random_bump_controls,
    sandwich_check,
    two_way_value,
)

SPEC = LatticeSpec(4, 1.0, 1.0)
GRID = TimeGrid(4)
TRAIN = sample_paths(SPEC, GRID, NoiseEnsemble(1, 300))
EVAL = sample_paths(SPEC, GRID, NoiseEnsemble(2, 1500))


def _ce(ispec):
    p = ControlProblem(SPEC, GRID, ispec)
    return simulate(p, first_order_guess(p), EVAL)


def test_phi4_excess_matches_direct_difference():
    ce = _ce(InteractionSpec("phi4", 0.5))
    K = random_bump_controls(SPEC, 1, 4)[0]
    pe = PerturbedEnsemble.from_control(ce, K)
    s2 = float(ce.paths.sigma2[-1])
    Y, Y2 = ce.Y1, ce.Y1 + pe.K[:, -1]
    isp = ce.problem.interaction
    direct = pe.energy_terms() + potential_phi4_direct(SPEC, Y2, isp, s2) - potential_phi4_direct(SPEC, Y, isp, s2)
    np.testing.assert_allclose(h_tilde_phi4_samples(pe), direct, rtol=1e-9, atol=1e-10)


def test_perturbation_must_start_at_zero():
    ce = _ce(InteractionSpec("phi4", 0.5))
    K = np.ones_like(ce.Z)
    with pytest.raises(ValueError):
        PerturbedEnsemble(ce, K)


def test_exp_simplified_form_nonnegative():
    ce = _ce(InteractionSpec("exponential", 1.0, beta=math.sqrt(2 * math.pi)))
    for K in random_bump_controls(SPEC, 3, 0):
        assert h_tilde_exp(PerturbedEnsemble.from_control(ce, K)).min_simplified_sample >= 0


def test_gaussian_linear_closed_forms():
    ell = bump(SPEC, 1.5, (2, 2), 0.5)
    gl = GaussianLinear(SPEC, ell)
    assert gl.value(0.0) == 0
    assert gl.value(2.0) == pytest.approx(4 * gl.value(1.0))
    assert gl.tilted_mean(1.0) == pytest.approx(2 * gl.value(1.0))


def test_gaussian_identities_end_to_end():
    ell = bump(SPEC, 1.5, (2, 2), 0.5)
    f = LinearFunctional(ell)
    gl = GaussianLinear(SPEC, ell)
    setup = VariationalSetup(SPEC, GRID, InteractionSpec("none"), TRAIN, EVAL, OptimizerConfig(iterations=20))
    sw = sandwich_check(f, setup)
    assert sw.passed
    assert abs(sw.lower.z(gl.tilted_mean())) < 4
    tw = two_way_value(f, setup)
    assert abs(tw.via_difference.value - tw.via_perturbation.value) <= 3 * math.hypot(tw.via_difference.se, tw.via_perturbation.se) + 1e-12
    rep = derivative_identity(f, [0.0, 0.5, 1.0], setup)
    assert rep.passed


def test_derivative_grid_validation():
    setup = VariationalSetup(SPEC, GRID, InteractionSpec("none"), TRAIN, EVAL)
    with pytest.raises(ValueError):
        derivative_identity(LinearFunctional(np.zeros(SPEC.shape)), [0.0, 1.0], setup)
