from pathlib import Path

import numpy as np
import pytest
from scipy.optimize import minimize

from pathfunnel.control import ControllerState, extract_control, min_norm_qp, sontag
from pathfunnel.dynamics import InputBox
from pathfunnel.funnel import box_min, load_certificate
from pathfunnel.scenarios import get_scenario
from pathfunnel.verify import draw_condition_samples

DATA = Path(__file__).parent / "data"
CERT = load_certificate(DATA / "straight-4m-pf.json")
V4 = CERT["funnel"]
SCN = get_scenario("straight-4m")
LO, HI = InputBox().affine_bounds()


def band_states(V, n, seed=0):
    rng = np.random.default_rng(seed)
    th = rng.uniform(0, SCN.segment.T, 20 * n)
    b = rng.uniform(-0.6, 0.6, (20 * n, 4))
    val = V.value(th, b)
    keep = (val >= V.beta_lower) & (val <= V.beta)
    return th[keep][:n], b[keep][:n]


def test_zero_gradient_gives_center_and_nominal():
    c = 0.5 * (LO + HI)
    np.testing.assert_array_equal(sontag(0.7, np.zeros(3), c, LO, HI), c)
    v_nom = np.array([1.0, 0.3, 0.0])
    v, ok = min_norm_qp(-0.1, np.zeros(3), -0.05, v_nom, LO, HI)
    assert ok
    np.testing.assert_array_equal(v, v_nom)
    # a > -lambda with g = 0: nothing helps, fall back to the box minimizer
    _, ok = min_norm_qp(0.2, np.zeros(3), -0.05, v_nom, LO, HI)
    assert not ok


def test_sontag_unsaturated_decrease():
    th, b = band_states(V4, 10_000, seed=1)
    assert len(th) == 10_000
    c = 0.5 * (LO + HI)
    n_unsat = 0
    for t, bb in zip(th, b):
        a, g = V4.lie_derivative_affine(t, bb, SCN.segment)
        v = sontag(float(a), g, c, LO, HI, clamp=False)
        if np.all((v >= LO) & (v <= HI)):
            n_unsat += 1
        assert float(a) + g @ v < 0
    assert n_unsat > 0


@pytest.mark.filterwarnings("ignore:Values in x were outside bounds")
def test_min_norm_qp_against_generic_solver():
    rng = np.random.default_rng(3)
    lo, hi = np.array([0.2, -1.0, -2.0]), np.array([2.0, 1.0, 2.0])
    for _ in range(200):
        g = rng.normal(size=3)
        a = rng.normal()
        v_nom = rng.uniform(lo, hi)
        target = -abs(rng.normal()) * 0.3
        v, ok = min_norm_qp(a, g, target, v_nom, lo, hi)
        assert np.all(v >= lo - 1e-12) and np.all(v <= hi + 1e-12)
        feasible = float(box_min(a, g, lo, hi)) <= target
        assert ok == feasible
        if not ok:
            continue
        assert a + g @ v <= target + 1e-9
        ref = minimize(lambda x: np.sum((x - v_nom) ** 2), np.clip(v_nom, lo, hi), method="SLSQP",
                       bounds=list(zip(lo, hi)),
                       constraints=[{"type": "ineq", "fun": lambda x: target - a - g @ x}])
        assert np.sum((v - v_nom) ** 2) <= ref.fun * (1 + 1e-6) + 1e-9


def test_qp_decrease_on_band_states():
    th, b = band_states(V4, 1000, seed=2)
    for t, bb in zip(th, b):
        res = extract_control(V4, t, bb, SCN.segment)
        m = float(box_min(*V4.lie_derivative_affine(t, bb, SCN.segment), LO, HI))
        if m <= -V4.lam:
            assert res.feasible and res.vdot <= -V4.lam + 1e-9
        else:
            assert res.vdot == pytest.approx(m)


@pytest.mark.parametrize("strategy", ["sontag-clamp", "min-norm-qp"])
@pytest.mark.parametrize("mode", ["pf", "tt"])
def test_inputs_saturated(strategy, mode):
    rng = np.random.default_rng(4)
    box = InputBox()
    for _ in range(300):
        t = rng.uniform(0, SCN.segment.T)
        b = rng.uniform(-1, 1, 4) * [1, 1, 1, 3]
        u = extract_control(V4, t, b, SCN.segment, strategy, box, mode).input
        assert box.contains(u)
        if mode == "tt":
            assert u.u0 == 1.0


def test_tt_theta_is_elapsed_time():
    ctrl = ControllerState(V4, SCN.segment, mode="tt", dt_ctrl=0.01)
    s = SCN.segment.state(0.0)
    for k in range(1, 251):
        ctrl.step(s)
        assert ctrl.theta == min(k * 0.01, SCN.segment.T)


def test_pf_theta_monotone_with_rate_in_bounds():
    ctrl = ControllerState(V4, SCN.segment, mode="pf")
    box = InputBox()
    prev = 0.0
    for k in range(50):
        s = SCN.segment.state(ctrl.theta)
        u, _ = ctrl.step(s)
        assert box.u0_lo <= u.u0 <= box.u0_hi
        assert ctrl.theta == pytest.approx(min(prev + u.u0 * 0.01, SCN.segment.T))
        assert ctrl.theta >= prev
        prev = ctrl.theta


def test_controller_validation():
    with pytest.raises(ValueError):
        ControllerState(V4, SCN.segment, mode="xx")
    with pytest.raises(ValueError):
        ControllerState(V4, SCN.segment, strategy="lqr")
    with pytest.raises(ValueError):
        ControllerState(V4, SCN.segment, theta=-1.0)
    with pytest.raises(ValueError):
        extract_control(V4, 0.0, np.zeros(4), SCN.segment, strategy="bang")
    ctrl = ControllerState(V4, SCN.segment)
    with pytest.raises(ValueError):
        ctrl.step(SCN.segment.state(0.0), dt=0.0)


def test_qp_decrease_on_falsifier_band_samples():
    # the falsifier's decrease-condition samples: the QP target is met at each
    th, b = draw_condition_samples(V4, SCN.spec, SCN.segment, 4000, np.random.default_rng(5))["d"]
    val = V4.value(th, b)
    band = (val >= V4.beta_lower) & (val <= V4.beta)
    th, b = th[band], b[band]
    assert len(th) > 500
    for t, bb in zip(th, b):
        assert extract_control(V4, t, bb, SCN.segment).vdot <= -V4.lam + 1e-9
