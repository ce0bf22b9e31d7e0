import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bdq.gff import (
    NoiseEnsemble,
    TimeGrid,
    ball_mask,
    covariance_check,
    gmc_density,
    gmc_second_moment_exact,
    load_ensemble,
    sample_paths,
    save_ensemble,
    wick_power,
)
from bdq.lattice import LatticeSpec, green_at_origin, inner
from bdq.stats import mean_se


def test_noise_is_order_independent():
    ens = NoiseEnsemble(7, 10)
    a = ens.block([3, 1], 4, 8)
    b = ens.block([1, 3], 4, 8)
    np.testing.assert_array_equal(a[0], b[1])


def test_noise_prefix_stable_in_n_t():
    ens = NoiseEnsemble(7, 4)
    np.testing.assert_array_equal(ens.normals(2, 8, 8)[:4], ens.normals(2, 4, 8))


def test_seeds_differ():
    assert not np.array_equal(NoiseEnsemble(1, 2).normals(0, 2, 4), NoiseEnsemble(2, 2).normals(0, 2, 4))


def test_path_starts_at_zero(spec8):
    p = sample_paths(spec8, TimeGrid(4), NoiseEnsemble(0, 3))
    assert np.all(p.at(0) == 0)
    assert p.W.shape == (3, 5, 8, 8)


def test_covariance_against_green(spec8):
    rep = covariance_check(NoiseEnsemble(3, 4000), spec8, TimeGrid(4), [(0, 0), (0, 1), (1, 1)])
    assert rep.max_abs_z < 4


@settings(max_examples=30, deadline=None)
@given(x=st.floats(-5, 5), s2=st.floats(0.01, 3))
def test_wick_powers_are_hermite(x, s2):
    # He_n(x / s) s^n
    s = math.sqrt(s2)
    he = np.polynomial.hermite_e.hermeval
    for n in range(5):
        coef = [0] * n + [1]
        assert wick_power(np.array(x), n, s2) == pytest.approx(s**n * he(x / s, coef), rel=1e-9, abs=1e-9)


def test_wick_means_vanish(spec8):
    p = sample_paths(spec8, TimeGrid(2), NoiseEnsemble(5, 3000))
    W1 = p.at(2)
    s2 = green_at_origin(spec8)
    for n in (2, 3, 4):
        assert abs(mean_se(wick_power(W1, n, s2).mean(axis=(-2, -1))).z()) < 4


def test_gmc_mean_one_and_second_moment(spec8):
    p = sample_paths(spec8, TimeGrid(1), NoiseEnsemble(9, 20000))
    beta = math.sqrt(2 * math.pi)
    mask = ball_mask(spec8, 2.0, (4, 4))
    mass = inner(spec8, mask, gmc_density(spec8, p.at(1), beta))
    assert abs(mean_se(mass).z(spec8.cell * mask.sum())) < 4
    assert abs(mean_se(mass**2).z(gmc_second_moment_exact(spec8, beta, mask))) < 4


def test_ensemble_roundtrip(tmp_path, spec8):
    data = NoiseEnsemble(4, 3).block(range(3), 2, 8)
    save_ensemble(tmp_path / "e.bdqe", spec8, 2, 4, data)
    spec, n_t, seed, back = load_ensemble(tmp_path / "e.bdqe")
    assert (spec.L, spec.a, spec.m, n_t, seed) == (8, 1.0, 1.0, 2, 4)
    np.testing.assert_array_equal(back, data)


def test_ensemble_shape_mismatch_rejected(tmp_path, spec8):
    with pytest.raises(ValueError):
        save_ensemble(tmp_path / "e.bdqe", spec8, 3, 0, np.zeros((2, 2, 8, 8)))
