import math

import numpy as np
import pytest

from bdq.control import (
    ControlProblem,
    OptimizerConfig,
    TestControl,
    apriori_bound,
    el_residual,
    energy,
    first_order_guess,
    gateaux,
    gateaux_fd,
    gradient,
    gradient_fd,
    optimize,
    random_smooth_control,
    registered_controls,
    simulate,
    trace_to_csv,
)
from bdq.gff import NoiseEnsemble, TimeGrid, sample_paths
from bdq.interactions import InteractionSpec
from bdq.lattice import LatticeSpec, WeightSpec, inner
from bdq.observables import LinearFunctional, QuadraticObservable, bump
from bdq.renormalized import GaussianLinear

SPEC = LatticeSpec(4, 1.0, 1.0)
GRID = TimeGrid(4)
PATHS = sample_paths(SPEC, GRID, NoiseEnsemble(11, 64))

PROBLEMS = {
    "phi4": ControlProblem(SPEC, GRID, InteractionSpec("phi4", 0.5)),
    "exp": ControlProblem(SPEC, GRID, InteractionSpec("exponential", 1.0, beta=math.sqrt(2 * math.pi))),
    "phi4_quad": ControlProblem(SPEC, GRID, InteractionSpec("phi4", 0.5),
                                QuadraticObservable(0.5, bump(SPEC, 1.5, (2, 2)), WeightSpec(0.5, (2, 2)))),
}


def _jitter(problem, seed=0):
    th = first_order_guess(problem)
    th.coef += 0.05 * np.random.default_rng(seed).standard_normal(th.coef.shape)
    return th


@pytest.mark.parametrize("name", list(PROBLEMS))
def test_adjoint_gradient_matches_fd(name):
    p = PROBLEMS[name]
    th = _jitter(p)
    g = gradient(simulate(p, th, PATHS))
    fd = gradient_fd(p, th, PATHS, h=1e-6)
    np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-7)


@pytest.mark.parametrize("name", ["phi4", "exp"])
def test_gateaux_matches_fd(name):
    p = PROBLEMS[name]
    ce = simulate(p, _jitter(p), PATHS)
    for k in range(3):
        K = random_smooth_control(SPEC, k, scale=0.5)
        g = gateaux(ce, K).value
        assert abs(g - gateaux_fd(ce, K)) <= 1e-4 * abs(g)


def test_energy_of_deterministic_linear_path():
    # K_t = t f has energy 1/2 <f, (m^2 - Delta) f>
    f = bump(SPEC, 1.5, (1, 1))
    K = TestControl("deterministic", "b", f).path(simulate(PROBLEMS["phi4"], PROBLEMS["phi4"].zero_parameters(), PATHS))
    from bdq.lattice import apply_spectral
    e = energy(K, SPEC, GRID)
    assert np.allclose(e, 0.5 * inner(SPEC, f, apply_spectral(SPEC, 1.0, f)))


def test_zero_drift_has_zero_energy():
    p = PROBLEMS["phi4"]
    ce = simulate(p, p.zero_parameters(), PATHS)
    assert np.all(ce.energies == 0)


def test_optimizer_reaches_gaussian_optimum():
    ell = bump(SPEC, 1.5, (2, 2), 0.5)
    p = ControlProblem(SPEC, GRID, InteractionSpec("none"), LinearFunctional(ell))
    th = p.zero_parameters()
    res = optimize(p, th, PATHS, OptimizerConfig(iterations=50))
    ce = simulate(p, res.theta, PATHS)
    gl = GaussianLinear(SPEC, ell)
    np.testing.assert_allclose(ce.Z[:, -1], gl.optimal_drift(np.array([1.0]))[0] + 0 * ce.Z[:, -1], atol=1e-6)
    assert "iteration" in trace_to_csv(res.trace).splitlines()[0]


def test_optimizer_improves_phi4():
    p = PROBLEMS["phi4"]
    res = optimize(p, first_order_guess(p), PATHS, OptimizerConfig(iterations=30))
    assert res.improved
    assert res.trace[-1].objective <= res.trace[0].objective


def test_el_residual_detects_zero_drift():
    paths = sample_paths(SPEC, GRID, NoiseEnsemble(3, 2000))
    p = PROBLEMS["phi4"]
    ce = simulate(p, p.zero_parameters(), paths)
    zs = [abs(el_residual(ce, K).z()) for K in registered_controls(SPEC)]
    assert max(zs) > 3


def test_apriori_report_fields():
    p = PROBLEMS["phi4"]
    rep = apriori_bound(simulate(p, first_order_guess(p), PATHS), WeightSpec(0.5, (2, 2)))
    assert rep.lhs.value > 0 and math.isfinite(rep.ratio)
