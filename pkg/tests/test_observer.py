import numpy as np
import pytest

from grumpc import gru_model, observer
from grumpc.observer import (AugmentedState, ObserverGains,
                             ObserverSynthesisError, alpha_coefficient,
                             augmented_step, build_A_delta, certify_gains,
                             delta_margin, jury_schur_check, observer_step,
                             synthesize_gains, trivial_gains)

from conftest import scaled_certified_weights


def inf_norm(M):
    return np.max(np.sum(np.abs(np.atleast_2d(M)), axis=1))


def random_gains(rng, n, p, scale=0.3):
    return ObserverGains(
        L_zxi=rng.uniform(-scale, scale, (n, p)),
        L_fxi=rng.uniform(-scale, scale, (n, p)),
        L_zy=rng.uniform(-scale, scale, (n, p)),
        L_fy=rng.uniform(-scale, scale, (n, p)),
        L_xiy=rng.uniform(-scale, scale, (p, p)),
        L_xixi=rng.uniform(-scale, scale, (p, p)),
        delta=0.0)


# ---------------------------------------------------------------------------
# augmented system
# ---------------------------------------------------------------------------

def test_augmented_fixed_point_at_equilibrium():
    rng = np.random.default_rng(41)
    w = scaled_certified_weights(rng, n=4)
    # find a fixed point by rolling to convergence under constant input
    u0 = np.array([0.3])
    x = np.zeros(4)
    for _ in range(2000):
        x = gru_model.gru_step(w, x, u0)
    y0 = gru_model.gru_output(w, x)
    s = AugmentedState(x, u0)
    nxt, ya = augmented_step(w, s, np.zeros(1), y0)
    assert np.max(np.abs(nxt.stacked() - s.stacked())) < 1e-10
    np.testing.assert_allclose(ya, np.concatenate([y0, u0]))


def test_augmented_integrator_freezes_on_track():
    rng = np.random.default_rng(43)
    w = scaled_certified_weights(rng, n=3)
    s = AugmentedState(rng.uniform(-1, 1, 3), rng.uniform(-0.5, 0.5, 1))
    y_now = gru_model.gru_output(w, s.x)
    nxt, _ = augmented_step(w, s, rng.uniform(-0.1, 0.1, 1), y_now)
    np.testing.assert_allclose(nxt.xi, s.xi, atol=1e-15)


def test_augmented_step_matches_composition():
    rng = np.random.default_rng(47)
    w = scaled_certified_weights(rng, n=4)
    s = AugmentedState(rng.uniform(-1, 1, 4), rng.uniform(-0.5, 0.5, 1))
    v = rng.uniform(-0.3, 0.3, 1)
    y0 = rng.uniform(-0.5, 0.5, 1)
    nxt, ya = augmented_step(w, s, v, y0)
    np.testing.assert_allclose(nxt.x, gru_model.gru_step(w, s.x, v + s.xi),
                               atol=1e-15)
    np.testing.assert_allclose(
        nxt.xi, s.xi + y0 - gru_model.gru_output(w, s.x), atol=1e-15)
    np.testing.assert_allclose(ya[:1], gru_model.gru_output(w, s.x))
    np.testing.assert_allclose(ya[1:], s.xi)


# ---------------------------------------------------------------------------
# observer dynamics
# ---------------------------------------------------------------------------

def test_observer_zero_gains_equals_augmented_step():
    rng = np.random.default_rng(53)
    w = scaled_certified_weights(rng, n=4)
    zero = ObserverGains(np.zeros((4, 1)), np.zeros((4, 1)), np.zeros((4, 1)),
                         np.zeros((4, 1)), np.zeros((1, 1)), np.zeros((1, 1)),
                         delta=0.0)
    s = AugmentedState(rng.uniform(-1, 1, 4), rng.uniform(-0.5, 0.5, 1))
    v = rng.uniform(-0.3, 0.3, 1)
    y0 = rng.uniform(-0.3, 0.3, 1)
    true_next, _ = augmented_step(w, s, v, y0)
    y_meas = rng.uniform(-1, 1, 1)        # arbitrary measurement, gains zero
    est_next = observer_step(w, zero, AugmentedState(s.x, s.xi), v, y0,
                             y_meas, rng.uniform(-1, 1, 1))
    np.testing.assert_allclose(est_next.stacked(), true_next.stacked(),
                               atol=1e-15)


def test_observer_exact_estimate_tracks_truth_any_gains():
    rng = np.random.default_rng(59)
    w = scaled_certified_weights(rng, n=4)
    g = random_gains(rng, 4, 1)
    s = AugmentedState(rng.uniform(-1, 1, 4), rng.uniform(-0.5, 0.5, 1))
    v = rng.uniform(-0.3, 0.3, 1)
    y0 = rng.uniform(-0.3, 0.3, 1)
    true_next, ya = augmented_step(w, s, v, y0)
    est_next = observer_step(w, g, AugmentedState(s.x.copy(), s.xi.copy()),
                             v, y0, ya[:1], s.xi)
    np.testing.assert_allclose(est_next.stacked(), true_next.stacked(),
                               atol=1e-14)


def deadbeat_gains(w, lam=0.5):
    """Fallback gains with the integrator row copying the measured xi."""
    g = trivial_gains(w, lam)
    return ObserverGains(g.L_zxi, g.L_fxi, g.L_zy, g.L_fy,
                         -np.eye(w.p), np.eye(w.p), delta=g.delta)


def test_observer_contraction_bound_along_rollouts():
    # the certificate assumes admissible inputs (xi + v and xi_hat + v inside
    # the unit box, states inside the invariant set), which the controller
    # enforces in closed loop; the integrator estimate starts at the known
    # true value and the deadbeat row keeps it there
    rng = np.random.default_rng(61)
    for trial in range(5):
        w = scaled_certified_weights(rng, n=4, target=-0.1)
        g = deadbeat_gains(w)
        A = build_A_delta(w, g).A
        assert certify_gains(w, g).passed
        for _ in range(10):
            st = AugmentedState(rng.uniform(-1, 1, 4), rng.uniform(-0.5, 0.5, 1))
            est = AugmentedState(rng.uniform(-1, 1, 4), st.xi.copy())
            y0 = rng.uniform(-0.3, 0.3, 1)
            for k in range(60):
                u_des = np.array([0.5 * np.sin(0.1 * k)])
                v = u_des - st.xi
                y = gru_model.gru_output(w, st.x)
                nxt, _ = augmented_step(w, st, v, y0)
                est_n = observer_step(w, g, est, v, y0, y, st.xi)
                assert np.max(np.abs(v + st.xi)) <= 1.0
                assert np.max(np.abs(v + est.xi)) <= 1.0
                e_now = np.array([np.max(np.abs(st.x - est.x)),
                                  np.max(np.abs(st.xi - est.xi))])
                e_next = np.array([np.max(np.abs(nxt.x - est_n.x)),
                                   np.max(np.abs(nxt.xi - est_n.xi))])
                assert np.all(e_next <= A @ e_now + 1e-12)
                st, est = nxt, est_n


# ---------------------------------------------------------------------------
# certification arithmetic
# ---------------------------------------------------------------------------

def test_alpha_zero_cases():
    rng = np.random.default_rng(67)
    w = scaled_certified_weights(rng, n=3)
    g = trivial_gains(w)
    assert alpha_coefficient(w, g) == 0.0        # L_zxi = W_z
    wz = gru_model.zero_weights(3, 1, 1)
    zero = ObserverGains(*(np.zeros((3, 1)),) * 4, np.zeros((1, 1)),
                         np.zeros((1, 1)), delta=0.0)
    assert alpha_coefficient(wz, zero) == 0.0


def test_alpha_formula_oracle():
    rng = np.random.default_rng(71)
    w = scaled_certified_weights(rng, n=4)
    g = random_gains(rng, 4, 1)
    want = 0.25 * inf_norm(w.W_z - g.L_zxi) * (
        1.0 + inf_norm(w.W_r)
        + 0.25 * inf_norm(w.U_r) * inf_norm(w.W_f - g.L_fxi))
    assert alpha_coefficient(w, g) == pytest.approx(want, rel=1e-15)


def test_delta_zero_weights_zero_gains():
    wz = gru_model.zero_weights(3, 1, 1)
    zero = ObserverGains(*(np.zeros((3, 1)),) * 4, np.zeros((1, 1)),
                         np.zeros((1, 1)), delta=0.0)
    assert delta_margin(wz, zero) == pytest.approx(1.0)


def test_delta_equals_minus_nu_for_zero_output_gains():
    rng = np.random.default_rng(73)
    for _ in range(10):
        w = gru_model.random_weights(4, 1, 1, rng)
        g = ObserverGains(rng.uniform(-1, 1, (4, 1)), rng.uniform(-1, 1, (4, 1)),
                          np.zeros((4, 1)), np.zeros((4, 1)),
                          rng.uniform(-1, 1, (1, 1)), rng.uniform(-1, 1, (1, 1)),
                          delta=0.0)
        assert delta_margin(w, g) == pytest.approx(-gru_model.diss_residual(w),
                                                   abs=1e-14)


def test_delta_formula_oracle():
    rng = np.random.default_rng(79)
    w = scaled_certified_weights(rng, n=4)
    g = random_gains(rng, 4, 1)
    gb = gru_model.gate_bounds(w)
    want = 1.0 - (inf_norm(w.U_r) * (0.25 * inf_norm(w.U_f - g.L_fy @ w.U_o)
                                     + gb.sigma_f_bar)
                  + 0.25 * (1 + gb.phi_r_bar) / (1 - gb.sigma_z_bar)
                  * inf_norm(w.U_z - g.L_zy @ w.U_o))
    assert delta_margin(w, g) == pytest.approx(want, rel=1e-15)


def test_A_delta_structure():
    rng = np.random.default_rng(83)
    w = scaled_certified_weights(rng, n=4)
    ed = build_A_delta(w, trivial_gains(w, lam=0.4))
    assert ed.A[0, 0] == pytest.approx(1.0 - ed.delta)
    assert ed.A[0, 1] == 0.0                       # alpha = 0
    assert ed.A[1, 1] == pytest.approx(0.6)        # |1 - lam|
    assert ed.spectral_radius() == pytest.approx(max(1.0 - ed.delta, 0.6))

    wz = gru_model.zero_weights(3, 1, 1)
    zero = ObserverGains(*(np.zeros((3, 1)),) * 4, np.zeros((1, 1)),
                         np.zeros((1, 1)), delta=0.0)
    edz = build_A_delta(wz, zero)
    np.testing.assert_allclose(edz.A, [[0.0, 0.0], [0.0, 1.0]])
    assert not jury_schur_check(edz.A)


def test_jury_hand_cases():
    assert jury_schur_check([[0.5, 0.0], [0.3, 0.5]])
    assert not jury_schur_check([[1.0, 0.0], [0.0, 0.2]])


def test_jury_matches_eigenvalue_oracle():
    rng = np.random.default_rng(89)
    agree = 0
    for k in range(1000):
        if k % 3 == 0:
            # near-boundary cases: scale a random matrix to |eig| around 1
            A = rng.uniform(-1, 1, (2, 2))
            r = np.max(np.abs(np.linalg.eigvals(A)))
            if r > 0:
                A *= rng.uniform(0.99, 1.01) / r
        else:
            A = rng.uniform(-2, 2, (2, 2))
        want = bool(np.max(np.abs(np.linalg.eigvals(A))) < 1.0)
        assert jury_schur_check(A) == want
        agree += 1
    assert agree == 1000


# ---------------------------------------------------------------------------
# gain synthesis
# ---------------------------------------------------------------------------

def test_trivial_gains_always_certify():
    rng = np.random.default_rng(97)
    for _ in range(20):
        n = int(rng.integers(2, 6))
        w = scaled_certified_weights(rng, n=n, target=float(rng.uniform(-0.3, -0.02)))
        rep = certify_gains(w, trivial_gains(w, lam=float(rng.uniform(0.1, 0.9))))
        assert rep.passed, rep.reason


def test_trivial_gains_require_certificate():
    rng = np.random.default_rng(101)
    w = gru_model.random_weights(4, 1, 1, rng, scale=2.0)
    assert gru_model.diss_residual(w) > 0
    with pytest.raises(ObserverSynthesisError):
        trivial_gains(w)


def test_trivial_gains_spectral_radius():
    rng = np.random.default_rng(103)
    w = scaled_certified_weights(rng, n=4, target=-0.2)
    g = trivial_gains(w, lam=0.5)
    ed = build_A_delta(w, g)
    assert ed.spectral_radius() == pytest.approx(max(1 - ed.delta, 0.5))
    assert ed.spectral_radius() < 1.0


def test_synthesis_beats_or_matches_fallback():
    rng = np.random.default_rng(107)
    for _ in range(5):
        w = scaled_certified_weights(rng, n=4, target=-0.1)
        base = certify_gains(w, trivial_gains(w)).spectral_norm
        g = synthesize_gains(w, maxiter=600)
        rep = certify_gains(w, g)
        assert rep.passed
        assert rep.spectral_norm <= base + 1e-12


def test_synthesis_rejects_uncertified_model():
    rng = np.random.default_rng(109)
    w = gru_model.random_weights(3, 1, 1, rng, scale=2.0)
    with pytest.raises(ObserverSynthesisError):
        synthesize_gains(w)


def test_error_decay_below_tolerance():
    rng = np.random.default_rng(113)
    w = scaled_certified_weights(rng, n=4, target=-0.15)
    g = synthesize_gains(w, maxiter=600)
    st = AugmentedState(np.zeros(4), np.zeros(1))
    est = AugmentedState(rng.uniform(-1, 1, 4), st.xi.copy())
    y0 = np.array([0.1])
    err = None
    for k in range(500):
        u_des = np.array([0.5 * np.sin(0.05 * k)])
        v = u_des - st.xi
        y = gru_model.gru_output(w, st.x)
        nxt, _ = augmented_step(w, st, v, y0)
        est = observer_step(w, g, est, v, y0, y, st.xi)
        st = nxt
        err = np.max(np.abs(st.stacked() - est.stacked()))
    assert err < 1e-6


def test_gain_serialization_round_trip(tmp_path):
    rng = np.random.default_rng(127)
    w = scaled_certified_weights(rng, n=4)
    g = synthesize_gains(w, maxiter=300)
    path = tmp_path / "gains.json"
    observer.save_gains(g, w, path)
    g2 = observer.load_gains(path)
    for name in observer.GAIN_FIELDS:
        assert np.array_equal(getattr(g, name), getattr(g2, name)), name
    assert g2.delta == g.delta
