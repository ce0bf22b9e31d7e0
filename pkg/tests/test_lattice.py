import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bdq.lattice import (
    LatticeSpec,
    WeightSpec,
    _DENSE_MAX_L,
    apply_multiplier,
    apply_spectral,
    besov_norm,
    bessel_potential,
    delta_field,
    green_at_origin,
    green_function,
    inner,
    laplacian,
    littlewood_paley,
    validate_weight,
    weighted_sobolev_norm,
)


def test_rejects_non_power_of_two():
    with pytest.raises(ValueError):
        LatticeSpec(6, 1.0, 1.0)


def test_eigenvalues_match_stencil(spec8, rng):
    f = rng.standard_normal(spec8.shape)
    via_fft = apply_spectral(spec8, 1.0, f)
    direct = spec8.m**2 * f - laplacian(spec8, f)
    np.testing.assert_allclose(via_fft, direct, atol=1e-12)


def test_green_solves_resolvent(spec8):
    # (m^2 - Delta) G = delta / a^2
    G = green_function(spec8)
    np.testing.assert_allclose(apply_spectral(spec8, 1.0, G), delta_field(spec8) / spec8.cell, atol=1e-12)
    assert green_at_origin(spec8) == pytest.approx(G[0, 0])


@settings(max_examples=20, deadline=None)
@given(s=st.floats(-2, 2), t=st.floats(-2, 2), seed=st.integers(0, 2**31))
def test_spectral_powers_compose(s, t, seed):
    spec = LatticeSpec(8, 0.5, 1.3)
    f = np.random.default_rng(seed).standard_normal(spec.shape)
    lhs = apply_spectral(spec, s, apply_spectral(spec, t, f))
    np.testing.assert_allclose(lhs, apply_spectral(spec, s + t, f), rtol=1e-9, atol=1e-9)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_spectral_operator_is_symmetric(seed):
    spec = LatticeSpec(8, 1.0, 1.0)
    r = np.random.default_rng(seed)
    f, g = r.standard_normal((2,) + spec.shape)
    a = inner(spec, apply_spectral(spec, -1.0, f), g)
    b = inner(spec, f, apply_spectral(spec, -1.0, g))
    assert a == pytest.approx(b, rel=1e-10)


@pytest.mark.parametrize("L", [_DENSE_MAX_L, 2 * _DENSE_MAX_L])
def test_dense_and_fft_paths_agree(L, rng):
    spec = LatticeSpec(L, 1.0, 0.7)
    f = rng.standard_normal((3,) + spec.shape)
    for s in (-1.0, -0.5, 0.5):
        ref = apply_multiplier(spec, spec.symbol(s), f)
        np.testing.assert_allclose(apply_spectral(spec, s, f), ref, atol=1e-12)
    ref = apply_multiplier(spec, (1.0 + spec.eigenvalues) ** 0.5, f)
    np.testing.assert_allclose(bessel_potential(spec, 1.0, f), ref, atol=1e-12)


def test_littlewood_paley_blocks_sum_to_field(spec8, rng):
    f = rng.standard_normal(spec8.shape)
    blocks = littlewood_paley(spec8, f)
    np.testing.assert_allclose(sum(blocks.values()), f, atol=1e-12)


def test_besov_l2_comparable(spec8, rng):
    f = rng.standard_normal((50,) + spec8.shape)
    w = WeightSpec()
    r = besov_norm(spec8, f, w, 0.0, 2, 2) / weighted_sobolev_norm(spec8, f, w, 0.0, 2)
    assert r.min() >= 1 / 3 and r.max() <= 3


def test_constant_weight_has_zero_ratios(spec8):
    rep = validate_weight(WeightSpec(0.0), 0.1, spec8)
    assert rep.max_ratio == 0 and rep.commutator_ratio == 0 and rep.passed


def test_weight_ratio_grows_with_gamma(spec8):
    ratios = [validate_weight(WeightSpec(g, (4, 4)), 0.5, spec8).max_ratio for g in (0.1, 0.25, 0.5, 1.0)]
    assert all(b > a for a, b in zip(ratios, ratios[1:]))
