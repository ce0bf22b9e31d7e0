import math
import warnings

import numpy as np
import pytest

from bdq.interactions import InteractionSpec
from bdq.lattice import LatticeSpec, WeightSpec, green_function
from bdq.observables import ConstantFunctional, LinearFunctional, ZeroFunctional, bump, moment_family
from bdq.oracles import (
    MCMCConfig,
    SampleSet,
    exp_moment_probe,
    functional_ti,
    laplace_mc,
    log_partition_mc,
    log_partition_ti,
    mcmc_sample,
    moment_compare,
)
from bdq.renormalized import GaussianLinear

SPEC = LatticeSpec(4, 1.0, 1.0)
FAST = MCMCConfig(n_burn=100, n_samples=1500, n_chains=2, seed=3)


def test_free_field_two_point():
    ss = mcmc_sample(InteractionSpec("none"), SPEC, FAST)
    G = green_function(SPEC)
    f = ss.fields
    for r in [(0, 0), (0, 1), (1, 1)]:
        v = np.mean(f * np.roll(f, (-r[0], -r[1]), axis=(-2, -1)), axis=(-2, -1))
        assert abs(ss.estimate(v).z(G[r])) < 4


def test_phi4_chains_converge():
    ss = mcmc_sample(InteractionSpec("phi4", 0.5), SPEC, FAST)
    assert ss.rhat(lambda x: np.mean(x * x, axis=(-2, -1))) < 1.05
    assert np.all((ss.acceptance > 0.2) & (ss.acceptance < 0.95))


def test_rwm_runs():
    cfg = MCMCConfig(algorithm="rwm", n_burn=50, n_samples=200, n_chains=2, step_size=0.5)
    ss = mcmc_sample(InteractionSpec("phi4", 0.5), SPEC, cfg)
    assert ss.fields.shape == (2, 200, 4, 4)


def test_config_validation():
    with pytest.raises(ValueError):
        MCMCConfig(algorithm="gibbs")


def test_log_partition_mc_trivial_and_linear():
    assert log_partition_mc(InteractionSpec("none"), SPEC, 1000, 0).value == 0
    ell = bump(SPEC, 1.5, (2, 2))
    est = log_partition_mc(LinearFunctional(ell), SPEC, 20000, 1)
    assert abs(est.estimate.z(GaussianLinear(SPEC, ell).value())) < 4


def test_log_partition_mc_needs_samples():
    with pytest.raises(ValueError):
        log_partition_mc(InteractionSpec("none"), SPEC, 10, 0)


def test_ti_against_determinant():
    c = 0.3
    isp = InteractionSpec("mass", c)
    exact = 0.5 * float(np.sum(np.log1p(2 * c * SPEC.cell / (SPEC.cell * (SPEC.m**2 + SPEC.eigenvalues)))))
    ti = log_partition_ti(isp, SPEC, np.linspace(0, c, 5), FAST)
    assert abs(ti.estimate.z(exact)) < 4


def test_ti_grid_validation():
    with pytest.raises(ValueError):
        log_partition_ti(InteractionSpec("phi4", 0.5), SPEC, [0, 0.5], FAST)


def test_laplace_constants():
    assert laplace_mc(ZeroFunctional(), InteractionSpec("none"), SPEC, FAST).value == 0
    est = laplace_mc(ConstantFunctional(1.7), InteractionSpec("phi4", 0.5), SPEC, FAST)
    assert est.value == pytest.approx(1.7) and est.se == pytest.approx(0, abs=1e-12)


def test_functional_ti_linear_gaussian():
    ell = bump(SPEC, 1.5, (2, 2))
    ti = functional_ti(LinearFunctional(ell), InteractionSpec("none"), SPEC, np.linspace(0, 1, 5), FAST)
    assert abs(ti.estimate.z(GaussianLinear(SPEC, ell).value())) < 4


def test_moment_compare_same_law():
    a = mcmc_sample(InteractionSpec("none"), SPEC, FAST)
    b = mcmc_sample(InteractionSpec("none"), SPEC, MCMCConfig(n_burn=100, n_samples=1500, n_chains=2, seed=99))
    obs = moment_family(SPEC, green_function(SPEC)[0, 0])
    rep = moment_compare(a, b, obs)
    assert rep.max_abs_z < 4.5
    for name, va, sa, vb, sb, z in rep.rows:
        assert z == pytest.approx((va - vb) / math.hypot(sa, sb))


def test_exp_moment_probe_small_delta():
    ss = SampleSet.iid(np.random.default_rng(0).standard_normal((500, 4, 4)))
    rep = exp_moment_probe(ss, SPEC, 1e-3, WeightSpec(0.5, (2, 2)))
    assert not rep.overflow
    assert rep.log_estimate == pytest.approx(rep.cumulant_log_estimate, rel=0.05)
    assert exp_moment_probe(ss, SPEC, 0.0).log_estimate == 0


def test_hmc_tilted_gaussian_has_no_periodic_bias():
    # an exact Gaussian rotation with a fixed trajectory length leaves some
    # modes almost unmixed; chains started at one point then keep its variance
    from bdq.observables import QuadraticObservable
    from bdq.oracles import tilted_means
    from bdq.semiclassical import GaussianQuadratic, deterministic_minimize

    spec = LatticeSpec(8, 1.0, 1.0)
    f = QuadraticObservable(1.0, bump(spec, 3.0, (4, 4)), WeightSpec(0.5, (4, 4)))
    init = deterministic_minimize(f, 0.0, spec, 0.5).phi
    cfg = MCMCConfig(n_burn=200, n_samples=1000, n_chains=4, seed=17)
    ss = mcmc_sample(InteractionSpec("none"), spec, cfg, f=f, alpha=0.5, init=init)
    v = f.value(spec, ss.flat()).reshape(ss.fields.shape[:2])
    x = v - v.mean(axis=1, keepdims=True)
    lag1 = np.sum(x[:, 1:] * x[:, :-1]) / np.sum(x * x)
    assert abs(lag1) < 0.25
    est = tilted_means(f, InteractionSpec("none"), spec, [0.5], cfg, inits=[init])[0]
    assert abs(est.z(GaussianQuadratic(spec, f).tilted_mean(1.0, 0.5))) < 4
