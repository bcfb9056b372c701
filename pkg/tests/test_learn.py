import numpy as np
import pytest

from pathfunnel.learn import (N_PARAMS, ROW_DELTA, ConstraintSet, SynthesisConfig, Synthesizer,
                              chebyshev_center, constraints_from_counterexample,
                              derivative_features, funnel_to_params, params_to_funnel, pd_cut,
                              synthesize, value_features)
from pathfunnel.scenarios import get_scenario
from pathfunnel.verify import Counterexample

SCN = get_scenario("straight-4m")


def random_params(rng):
    M = rng.normal(size=(4, 4))
    C = M @ M.T + 0.5 * np.eye(4)
    p = np.r_[C[np.triu_indices(4)], rng.uniform(0, 0.2)]
    return p


def test_unit_box_center():
    res = chebyshev_center(ConstraintSet(p_max=1.0))
    assert res.status == "ok"
    np.testing.assert_allclose(res.center, 0.0, atol=1e-9)
    assert res.radius == pytest.approx(1.0)


def test_half_box_center():
    cs = ConstraintSet(p_max=1.0)
    a = np.zeros(N_PARAMS)
    a[0] = -1.0
    cs.add(a, -0.5, {"condition": "test"})
    res = chebyshev_center(cs)
    assert res.center[0] == pytest.approx(0.75)
    assert res.radius == pytest.approx(0.25)
    # dense-grid oracle along the constrained direction
    grid = np.linspace(-1, 1, 20001)
    slack = np.minimum.reduce([grid - 0.5, 1 - grid, np.full_like(grid, 1.0)])
    assert grid[np.argmax(slack)] == pytest.approx(0.75, abs=1e-4)
    assert slack.max() == pytest.approx(0.25, abs=1e-4)


def test_contradictory_rows_infeasible():
    cs = ConstraintSet(p_max=10.0)
    a = np.zeros(N_PARAMS)
    a[1] = 1.0
    cs.add(a, -2.0, {})
    cs.add(-a, -2.0, {})
    assert chebyshev_center(cs).status == "infeasible"


def test_chebyshev_matches_grid_on_random_polytopes():
    rng = np.random.default_rng(0)
    for _ in range(100):
        # facet normals in a random plane: the optimum lives in that plane
        U, _ = np.linalg.qr(rng.normal(size=(N_PARAMS, 2)))
        m = rng.integers(3, 8)
        ang = np.sort(rng.uniform(0, 2 * np.pi, m))
        ang[: 3] = ang[0] + np.array([0, 2.1, 4.2])  # keep it bounded in the plane
        c2 = np.stack([np.cos(ang), np.sin(ang)], axis=1) * rng.uniform(0.5, 2.0, (m, 1))
        z0 = rng.uniform(-0.3, 0.3, 2)
        rhs = c2 @ z0 + rng.uniform(0.05, 0.6, m) * np.linalg.norm(c2, axis=1)
        cs = ConstraintSet(p_max=50.0)
        for c, r in zip(c2, rhs):
            cs.add(U @ c, r, {})
        res = chebyshev_center(cs)
        assert res.status == "ok"
        g = np.linspace(-1.5, 1.5, 601)
        Z = np.stack(np.meshgrid(g, g), axis=-1).reshape(-1, 2)
        slack = ((rhs[None] - Z @ c2.T) / np.linalg.norm(c2, axis=1)).min(axis=1)
        k = np.argmax(slack)
        # refine around the best grid point
        g2 = np.linspace(-0.006, 0.006, 121)
        Z2 = Z[k] + np.stack(np.meshgrid(g2, g2), axis=-1).reshape(-1, 2)
        slack2 = ((rhs[None] - Z2 @ c2.T) / np.linalg.norm(c2, axis=1)).min(axis=1)
        assert abs(slack2.max() - res.radius) < 1e-3


def test_row_a_expansion():
    cx = Counterexample("a", 0.0, [0.5, 0.0, 0.0, 0.0], 0.1)
    (a, rhs, tag), = constraints_from_counterexample(cx, None, SCN.spec, SCN.segment)
    expect = np.zeros(N_PARAMS)
    expect[0] = 0.25
    np.testing.assert_array_equal(a, expect)
    assert rhs == 1.0 - ROW_DELTA
    assert tag["condition"] == "a"


def test_rows_match_basis_expansion():
    # independent expansion: evaluate the funnel at unit parameter vectors
    rng = np.random.default_rng(1)
    basis = [params_to_funnel(e) for e in np.eye(N_PARAMS)]
    for _ in range(100):
        th = rng.uniform(0, SCN.segment.T)
        b = rng.uniform(-1, 1, 4)
        v = rng.uniform([0.2, -2.9, -4], [2.0, 2.9, 4])
        phi = np.array([float(B.value(th, b)) for B in basis])
        psi = np.array([float(B.lie_derivative(th, b, v, SCN.segment)) for B in basis])
        np.testing.assert_allclose(value_features(th, b), phi, atol=1e-10)
        np.testing.assert_allclose(derivative_features(th, b, v, SCN.segment), psi, atol=1e-10)
        p = random_params(rng)
        V = params_to_funnel(p)
        assert value_features(th, b) @ p == pytest.approx(float(V.value(th, b)), abs=1e-10)


def test_param_round_trip():
    rng = np.random.default_rng(2)
    p = random_params(rng)
    np.testing.assert_allclose(funnel_to_params(params_to_funnel(p)), p)


def test_decrease_row_needs_input_and_cuts_candidate():
    cx = Counterexample("d", 1.0, [0.0, 0.3, 0.0, 0.0], 0.05)
    with pytest.raises(ValueError):
        constraints_from_counterexample(cx, None, SCN.spec, SCN.segment)
    rng = np.random.default_rng(3)
    for mu in (0.0, 1.0):
        for _ in range(50):
            p = random_params(rng)
            V = params_to_funnel(p, lam=0.02)
            th = rng.uniform(0, SCN.segment.T)
            b = rng.uniform(-0.5, 0.5, 4)
            v = rng.uniform([0.2, -2.9, -4], [2.0, 2.9, 4])
            val = float(V.value(th, b))
            vdot = float(V.lie_derivative(th, b, v, SCN.segment))
            cx = Counterexample("d", th, list(b), 0.0)
            (a, rhs, _), = constraints_from_counterexample(cx, v, SCN.spec, SCN.segment,
                                                           band_weight=mu, beta_lower=0.5)
            if val >= 0.5 and vdot > -0.02 - ROW_DELTA:
                assert a @ p > rhs
            # the row is the decrease inequality shifted by mu (V - beta_lower)
            assert a @ p - rhs == pytest.approx(vdot + 0.02 + ROW_DELTA + mu * (val - 0.5))


def test_pd_cut():
    p = np.zeros(N_PARAMS)
    p[[0, 4, 7, 9]] = [1.0, 1.0, -0.5, 2.0]
    rows = pd_cut(p)
    assert len(rows) == 1
    a, rhs, _ = rows[0]
    assert a @ p > rhs
    ident = np.zeros(N_PARAMS)
    ident[[0, 4, 7, 9]] = 1.0
    assert a @ ident <= rhs
    assert pd_cut(ident) == []


def test_config_validation():
    with pytest.raises(ValueError):
        SynthesisConfig(mode="mpc")
    with pytest.raises(ValueError):
        SynthesisConfig(final_budget=10, loop_budget=100)
    with pytest.raises(ValueError):
        SynthesisConfig(band_weight=-1.0)
    with pytest.raises(ValueError):
        SynthesisConfig(band_weight_fallbacks=(0.5, -0.1))
    assert SynthesisConfig(mode="tt").input_box.fixed_timing


def test_deterministic_and_progressing():
    cfg = SynthesisConfig(max_iterations=2, seed_demos=2, seed_boundary_rows=20,
                          demos_per_iteration=1)
    r1 = synthesize(SCN.spec, SCN.segment, "pf", cfg, seed=4)
    r2 = synthesize(SCN.spec, SCN.segment, "pf", cfg, seed=4)
    d1, d2 = r1.to_dict(), r2.to_dict()
    d1.pop("seconds"), d2.pop("seconds")
    assert d1 == d2
    cands = [tuple(e["candidate"]) for e in r1.log]
    assert len(set(cands)) == len(cands)


def test_rows_nested_and_cut_candidates():
    cfg = SynthesisConfig(max_iterations=2, seed_demos=2, seed_boundary_rows=20,
                          demos_per_iteration=1)
    syn = Synthesizer(SCN.spec, SCN.segment, cfg, seed=5)
    rep = syn.run()
    n_seed = len(syn.cs) - sum(e.get("rows_added", 0) for e in rep.log) \
        - sum(e["pd_cuts"] for e in rep.log)
    assert n_seed > 0
    start = n_seed
    for e in rep.log:
        start += e["pd_cuts"]
        p = np.array(e["candidate"])
        added = slice(start, start + e.get("rows_added", 0))
        for a, r in zip(syn.cs.A[added], syn.cs.rhs[added]):
            assert a @ p > r
        start += e.get("rows_added", 0)


def test_band_weight_escalation_shares_budget():
    # an unreachable decrease margin drives every weight infeasible
    cfg = SynthesisConfig(max_iterations=5, seed_demos=4, seed_boundary_rows=20,
                          demos_per_iteration=2, lam=3.0)
    rep = synthesize(SCN.spec, SCN.segment, "pf", cfg, seed=1)
    att = rep.config["attempts"]
    assert [a["band_weight"] for a in att] == [0.0, 0.25, 1.0][: len(att)]
    assert all(a["outcome"] == "infeasible" for a in att[:-1])
    assert sum(a["iterations"] for a in att) == rep.iterations <= 5
    assert {e["band_weight"] for e in rep.log} == {a["band_weight"] for a in att}
