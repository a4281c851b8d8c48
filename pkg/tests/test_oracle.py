import numpy as np
import pytest
from hypothesis import given, strategies as st

from hrflow.dists import GaussianMixture, StandardGaussian, density, make_rng, preset
from hrflow.interp import SpaceTimePoint, interp_state
from hrflow.metrics import w1_1d
from hrflow.oracle import (UndefinedVelocityLaw, empirical_velocity_law, independent_sampler,
                           joint_density, rho_t, velocity_law)

SRC, TGT = preset("1d-2n")
RING_SRC, RING_TGT = preset("2d-6n")
ODD = GaussianMixture([0.2, 0.5, 0.3], [[-2.0], [0.5], [3.0]], [0.4, 1.1, 0.25])


def test_rho_t_endpoints():
    x = np.linspace(-3, 3, 13)[:, None]
    assert np.allclose(rho_t(SRC, TGT, x, 0.0), density(SRC, x), rtol=1e-12)
    assert np.allclose(rho_t(SRC, TGT, x, 1.0), density(TGT, x), rtol=1e-12)


@pytest.mark.parametrize("t", [0.0, 0.25, 0.5, 0.75, 1.0])
def test_rho_t_normalized(t):
    g = np.linspace(-12, 12, 40_001)
    assert abs(np.trapezoid(rho_t(ODD, TGT, g[:, None], t), g) - 1) < 1e-6


def test_rho_t_against_monte_carlo():
    rng = make_rng(0, 1)
    n = 1_000_000
    xt = interp_state(SRC.draw(n, rng), TGT.draw(n, rng), 0.5)[:, 0]
    h = 0.02
    mc = np.mean(np.abs(xt) < h / 2) / h
    exact = rho_t(SRC, TGT, [0.0], 0.5)
    assert abs(mc / exact - 1) < 0.02


def test_law_at_t0_is_shifted_target():
    for x in (-1.0, 0.3, 1.7):
        law = velocity_law(SRC, TGT, SpaceTimePoint([x], 0.0))
        v = np.linspace(-4, 4, 41)[:, None]
        assert np.allclose(law.density(v), density(TGT, x + v), rtol=1e-10, atol=1e-300)


def test_two_modes_at_minus_one():
    law = velocity_law(SRC, TGT, SpaceTimePoint([-1.0], 0.0))
    assert sorted(law.means[:, 0].tolist()) == pytest.approx([0.0, 2.0])
    assert np.allclose(law.weights, 0.5)


@pytest.mark.parametrize("anchor", [(-1.0, 0.0), (0.0, 0.5), (1.0, 0.9), (2.5, 0.3)])
def test_law_normalized(anchor):
    law = velocity_law(ODD, TGT, SpaceTimePoint([anchor[0]], anchor[1]))
    g = np.linspace(-25, 25, 200_001)
    assert abs(np.trapezoid(law.density(g[:, None]), g) - 1) < 1e-6
    assert abs(law.weights.sum() - 1) < 1e-9


@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(0, 1))
def test_change_of_variables_identity_1d(v, x, t):
    law = velocity_law(ODD, TGT, SpaceTimePoint([x], t))
    lhs = law.density([[v]])[0] * rho_t(ODD, TGT, [x], t)
    rhs = joint_density(ODD, TGT, [[x - t * v]], [[x + (1 - t) * v]])[0]
    assert lhs == pytest.approx(rhs, rel=1e-9, abs=1e-300)


@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(-2, 2), st.floats(-2, 2), st.floats(0, 1))
def test_change_of_variables_identity_2d(v1, v2, x1, x2, t):
    x = np.array([x1, x2])
    v = np.array([v1, v2])
    law = velocity_law(RING_SRC, RING_TGT, SpaceTimePoint(x, t))
    lhs = law.density(v[None])[0] * rho_t(RING_SRC, RING_TGT, x, t)
    rhs = joint_density(RING_SRC, RING_TGT, (x - t * v)[None], (x + (1 - t) * v)[None])[0]
    assert lhs == pytest.approx(rhs, rel=1e-9, abs=1e-300)


def test_undefined_far_from_support():
    with pytest.raises(UndefinedVelocityLaw):
        velocity_law(SRC, TGT, SpaceTimePoint([1e3], 0.5))
    with pytest.raises(UndefinedVelocityLaw):
        velocity_law(SRC, TGT, SpaceTimePoint([1e3], 1.0))


def test_nonmixture_rejected():
    with pytest.raises(TypeError):
        velocity_law(*preset("8n-moons"), SpaceTimePoint([0.0, 0.0], 0.5))


@pytest.mark.parametrize("anchor", [(-1.0, 0.0), (0.0, 0.5), (1.0, 0.9)])
def test_empirical_matches_closed_form(anchor):
    a = SpaceTimePoint([anchor[0]], anchor[1])
    emp = empirical_velocity_law(independent_sampler(SRC, TGT), a, 0.05, 10_000, seed=1)
    assert len(emp) == 10_000
    assert w1_1d(emp, velocity_law(SRC, TGT, a).sample(10_000, 2)) < 0.1


def test_window_shrinking_converges():
    a = SpaceTimePoint([0.0], 0.5)
    ref = velocity_law(SRC, TGT, a).sample(20_000, 3)
    errs = [w1_1d(empirical_velocity_law(independent_sampler(SRC, TGT), a, w, 20_000, seed=4), ref)
            for w in (0.8, 0.4, 0.1)]
    assert errs[0] > errs[1] > errs[2]


def test_empirical_gives_up_outside_support():
    with pytest.raises(RuntimeError):
        empirical_velocity_law(independent_sampler(SRC, TGT), SpaceTimePoint([50.0], 0.5), 0.05, 1000,
                               max_draws=200_000)
    with pytest.raises(ValueError):
        empirical_velocity_law(independent_sampler(SRC, TGT), SpaceTimePoint([0.0], 0.5), 0.0, 1000)


def test_standard_gaussian_pair_is_gaussian():
    s = StandardGaussian(1)
    law = velocity_law(s, s, SpaceTimePoint([0.7], 0.5))
    # X1 - X0 is independent of X0 + X1 for iid Gaussians
    assert law.means[0, 0] == pytest.approx(0.0)
    assert law.stdevs[0] == pytest.approx(np.sqrt(2.0))
