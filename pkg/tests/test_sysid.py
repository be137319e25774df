import numpy as np
import pytest

from nicpest import sysid
from nicpest.errors import RankDeficientInput
from nicpest.sysid import IdentConfig, OrderRule, StateSpaceModel


def random_stable_system(seed, order=3, m=3):
    r = np.random.default_rng(seed)
    A = r.normal(size=(order, order))
    A *= 0.9 / max(np.max(np.abs(np.linalg.eigvals(A))), 1e-9)
    return StateSpaceModel(A=A, B=r.normal(size=(order, m)),
                           C=r.normal(size=(1, order)),
                           D=0.1 * r.normal(size=(1, m)), fs=400.0)


def test_simulate_matches_direct_recursion():
    model = random_stable_system(1)
    r = np.random.default_rng(2)
    u = r.normal(size=(3, 200))
    x = np.zeros(model.order)
    ref = np.empty((1, 200))
    for t in range(200):
        ref[:, t] = model.C @ x + model.D @ u[:, t]
        x = model.A @ x + model.B @ u[:, t]
    got = sysid.simulate(model, u)
    np.testing.assert_allclose(got, ref, atol=1e-10)


def test_simulate_pure_feedthrough():
    model = StateSpaceModel(A=np.zeros((2, 2)), B=np.zeros((2, 3)),
                            C=np.zeros((1, 2)), D=np.array([[1.0, -2.0, 0.5]]),
                            fs=400.0)
    u = np.random.default_rng(3).normal(size=(3, 50))
    np.testing.assert_allclose(sysid.simulate(model, u),
                               np.array([[1.0, -2.0, 0.5]]) @ u, atol=1e-14)


def test_simulate_is_linear_in_the_input():
    model = random_stable_system(4)
    r = np.random.default_rng(5)
    u1 = r.normal(size=(3, 300))
    u2 = r.normal(size=(3, 300))
    lhs = sysid.simulate(model, u1 + u2)
    rhs = sysid.simulate(model, u1) + sysid.simulate(model, u2)
    np.testing.assert_allclose(lhs, rhs, atol=1e-9)


def test_simulate_initial_state_adds_homogeneous_response():
    model = random_stable_system(6, order=2)
    u = np.zeros((3, 40))
    x0 = np.array([1.0, -0.5])
    y = sysid.simulate(model, u, x0=x0)
    x = x0.copy()
    ref = np.empty(40)
    for t in range(40):
        ref[t] = (model.C @ x)[0]
        x = model.A @ x
    np.testing.assert_allclose(y[0], ref, atol=1e-10)


def test_simulate_rejects_wrong_channel_count():
    model = random_stable_system(7)
    with pytest.raises(ValueError):
        sysid.simulate(model, np.zeros((2, 10)))


def test_impulse_response_hand_values():
    model = StateSpaceModel(A=np.array([[0.5]]), B=np.array([[1.0]]),
                            C=np.array([[2.0]]), D=np.array([[3.0]]), fs=1.0)
    h = sysid.impulse_response(model, 5)
    np.testing.assert_allclose(h, [[3.0, 2.0, 1.0, 0.5, 0.25]])


def test_markov_parameters_match_impulse_response():
    model = random_stable_system(8)
    M = sysid.markov_parameters(model, 12)
    h = sysid.impulse_response(model, 12)
    assert M.shape == (12, 1, 3)
    np.testing.assert_allclose(M[:, 0, :].T, h, atol=1e-12)


def test_identification_recovers_markov_parameters():
    true = random_stable_system(9)
    r = np.random.default_rng(10)
    u = r.normal(size=(3, 2000))
    y = sysid.simulate(true, u)
    est = sysid.identify(u, y, IdentConfig(), fs=400.0)
    assert est.spectral_radius() < 1.0 + 1e-9
    M_true = sysid.markov_parameters(true, 20)
    M_est = sysid.markov_parameters(est, 20)
    rel = np.linalg.norm(M_est - M_true) / np.linalg.norm(M_true)
    assert rel < 1e-6


def test_identification_finds_the_true_order():
    true = random_stable_system(11, order=2)
    r = np.random.default_rng(12)
    u = r.normal(size=(3, 2000))
    y = sysid.simulate(true, u)
    est = sysid.identify(u, y, IdentConfig())
    assert est.order == 2


def test_identify_rejects_flat_inputs():
    u = np.ones((3, 1000))
    y = np.random.default_rng(13).normal(size=(1, 1000))
    with pytest.raises(RankDeficientInput):
        sysid.identify(u, y, IdentConfig())


def test_identify_rejects_short_records():
    r = np.random.default_rng(14)
    with pytest.raises(ValueError):
        sysid.identify(r.normal(size=(3, 150)), r.normal(size=(1, 150)),
                       IdentConfig())


def test_identify_zero_output_gives_zero_model():
    r = np.random.default_rng(15)
    u = r.normal(size=(3, 1000))
    est = sysid.identify(u, np.zeros((1, 1000)), IdentConfig())
    y = sysid.simulate(est, u)
    np.testing.assert_allclose(y, 0.0, atol=1e-9)


def test_order_selection_gap_rule():
    svs = np.array([100.0, 10.0, 9.0, 1e-12, 1e-13])
    assert sysid.select_order(svs, IdentConfig(max_order=4)) == 3
    assert sysid.select_order(svs, IdentConfig(
        max_order=4, order_rule=OrderRule.FIXED)) == 4


def test_model_serialization_round_trip():
    model = random_stable_system(16)
    back = StateSpaceModel.from_dict(model.to_dict())
    np.testing.assert_array_equal(back.A, model.A)
    np.testing.assert_array_equal(back.B, model.B)
    np.testing.assert_array_equal(back.C, model.C)
    np.testing.assert_array_equal(back.D, model.D)
    assert back.fs == model.fs
    bad = model.to_dict()
    bad["order"] = 99
    with pytest.raises(ValueError):
        StateSpaceModel.from_dict(bad)


def test_model_shape_validation():
    with pytest.raises(ValueError):
        StateSpaceModel(A=np.zeros((2, 3)), B=np.zeros((2, 1)),
                        C=np.zeros((1, 2)), D=np.zeros((1, 1)), fs=1.0)
    with pytest.raises(ValueError):
        StateSpaceModel(A=np.zeros((2, 2)), B=np.zeros((3, 1)),
                        C=np.zeros((1, 2)), D=np.zeros((1, 1)), fs=1.0)
