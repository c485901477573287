import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from acerase import guidance as G
from acerase.diffusion import build_schedule
from acerase.guidance import GuidanceConfig, VerificationError

E1, E2, ZERO = np.array([1.0, 0.0]), np.array([0.0, 1.0]), np.zeros(2)

vec = st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=2).map(np.array)
scale = st.floats(0, 20)


def test_hand_examples():
    np.testing.assert_array_equal(G.cfg_compose(ZERO, E1, 7.5), [7.5, 0.0])
    np.testing.assert_array_equal(G.ceg(ZERO, E1, 3.0), [-3.0, 0.0])
    np.testing.assert_array_equal(G.ueg(ZERO, E1, 3.0), [3.0, 0.0])
    np.testing.assert_array_equal(G.pg_ueg(ZERO, E1, E2, 3.0, 3.0, 0.5), [3.0, -1.5])


def test_zero_guidance_returns_unconditional():
    u, c = np.array([0.3, -2.0]), np.array([1.1, 4.0])
    np.testing.assert_array_equal(G.ceg(u, c, 0.0), u)
    np.testing.assert_array_equal(G.ueg(u, c, 0.0), u)
    np.testing.assert_array_equal(G.cfg_compose(u, c, 1.0), c)


def test_dimension_mismatch():
    for fn in (G.cfg_compose, G.ceg, G.ueg):
        with pytest.raises(ValueError):
            fn(np.zeros(2), np.zeros(3), 1.0)
    with pytest.raises(ValueError):
        G.pg_ueg(ZERO, ZERO, np.zeros(3), 1.0, 1.0, 1.0)
    with pytest.raises(ValueError):
        G.pg_ueg(ZERO, E1, E2, 1.0, 1.0, -0.1)


@settings(max_examples=200)
@given(u=vec, c=vec, p=vec, eta=scale, eta_p=scale, gamma=st.floats(0, 3))
def test_guidance_identities(u, c, p, eta, eta_p, gamma):
    tol = 1e-9 * (1 + np.abs(u).max() + np.abs(c).max() + np.abs(p).max()) * (1 + eta + eta_p * gamma)
    np.testing.assert_allclose(G.ceg(u, c, eta), G.cfg_compose(u, c, -eta), atol=tol, rtol=0)
    np.testing.assert_allclose(G.ueg(u, c, eta), G.cfg_compose(u, c, eta), atol=tol, rtol=0)
    np.testing.assert_allclose((G.ceg(u, c, eta) + G.ueg(u, c, eta)) / 2, u, atol=tol, rtol=0)
    np.testing.assert_array_equal(G.pg_ueg(u, c, p, eta, 0.0, gamma), G.ueg(u, c, eta))
    np.testing.assert_allclose(G.pg_ueg(u, c, u, eta, eta_p, gamma), G.ueg(u, c, eta), atol=tol, rtol=0)
    np.testing.assert_array_equal(G.cfg_compose(u, u, eta), u)


@settings(max_examples=100)
@given(u=vec, c=vec, p=vec, eta=scale, s=st.floats(-10, 10))
def test_compositions_are_homogeneous(u, c, p, eta, s):
    tol = 1e-9 * (1 + abs(s)) * (1 + np.abs(np.concatenate([u, c, p])).max()) * (1 + eta) ** 2
    for fn in (G.ceg, G.ueg, G.cfg_compose):
        np.testing.assert_allclose(fn(s * u, s * c, eta), s * fn(u, c, eta), atol=tol, rtol=0)
    np.testing.assert_allclose(G.pg_ueg(s * u, s * c, s * p, eta, 2.0, 0.7),
                               s * G.pg_ueg(u, c, p, eta, 2.0, 0.7), atol=tol, rtol=0)


def test_decomposition_examples():
    rng = np.random.default_rng(0)
    u, c, e = rng.normal(size=(3, 2))
    assert G.verify_decomposition(u, c, e, 3.0, 7.5).max_abs_diff < 1e-12
    at_one = G.verify_decomposition(u, c, e, 3.0, 1.0)
    np.testing.assert_array_equal(at_one.composed, e)
    np.testing.assert_allclose(at_one.reconstructed, e, atol=1e-15)
    plain = G.verify_decomposition(u, c, e, 0.0, 7.5)
    np.testing.assert_allclose(plain.composed, G.cfg_compose(u, e, 7.5), atol=1e-14)


def test_denoising_constants_positive_on_default_schedule():
    s = build_schedule()
    for omega in (2.0, 7.5):
        for t in range(1, 31):
            assert min(G.verify_denoising_constants(s, t, t - 1, omega, 3.0).as_tuple()) > 0


def test_denoising_constants_hand_values():
    s = build_schedule()
    t = 12
    k = G.denoising_constants(s, t, t - 1, 7.5, 3.0)
    gap = np.sqrt(s.alpha_bar[t - 1]) * (s.beta[t] - s.beta[t - 1])
    assert k.C1 == pytest.approx(np.sqrt(s.alpha_bar[t - 1] / s.alpha_bar[t]), rel=1e-15)
    assert k.C3 / k.C2 == pytest.approx(s.sigma[t] * 7.5, rel=1e-14)
    assert k.C4 == pytest.approx(gap * s.sigma[t] * 3.0 * 6.5, rel=1e-14)


def test_constant_four_degenerates_at_omega_one():
    with pytest.raises(VerificationError) as info:
        G.verify_denoising_constants(build_schedule(), 5, 4, 1.0, 3.0)
    assert info.value.index == 4


def test_guidance_config_validation():
    GuidanceConfig(gamma={1: 0.5})
    with pytest.raises(ValueError):
        GuidanceConfig(eta_u=-1.0)
    with pytest.raises(ValueError):
        GuidanceConfig(gamma={1: -0.5})
    with pytest.raises(KeyError):
        GuidanceConfig(gamma={1: 0.5}).require_gamma([1, 2])
