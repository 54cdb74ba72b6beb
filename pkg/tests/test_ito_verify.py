import math

import numpy as np
import pytest

from itospde.errors import AssumptionViolated
from itospde.grid_spaces import GridFunction, build_grid
from itospde.ito_verify import (
    FunctionalR,
    bounded_square,
    energy_identity_ledger,
    general_ito_ledger,
    grad_v_ratio,
    gronwall_check,
    lifting_convergence,
    max_principle_experiment,
    mollified_positive_square,
    phi_grad,
    phi_hess_dir,
    phi_value,
    positive_part_chain_rule_check,
    positive_square,
    square,
)
from itospde.spde import SPDECoefficients, SPDEProblem, simulate
from itospde.stochastic import NoiseDriver

import oracles

SMOOTH = [square(), bounded_square(), mollified_positive_square(0.3)]


def test_phi_value_examples():
    g = build_grid([(0, 1)], 0.5)
    assert phi_value(square(), GridFunction(g, [1.0])) == 0.5
    g4 = build_grid([(0, 1)], 0.25)
    assert phi_value(positive_square(), GridFunction(g4, [-1.0, -2.0, -0.5])) == 0.0
    assert phi_value(positive_square(), GridFunction(g4, [0.0, -2.0, 3.0])) == 2.25
    assert phi_value(bounded_square(), g4.zeros()) == 0.0


def test_phi_grad_examples():
    g = build_grid([(0, 1)], 0.125)
    u = GridFunction(g, np.random.default_rng(0).standard_normal(g.N))
    np.testing.assert_array_equal(phi_grad(square(), u).values, 2 * u.values)
    np.testing.assert_array_equal(phi_grad(positive_square(), u).values, 2 * np.maximum(u.values, 0))


def test_phi_hess_examples():
    g = build_grid([(0, 1)], 0.125)
    rng = np.random.default_rng(1)
    u, xi = (GridFunction(g, x) for x in rng.standard_normal((2, g.N)))
    assert phi_hess_dir(square(), u, xi) == pytest.approx(2 * g.h * xi.values @ xi.values, rel=1e-14)
    neg = GridFunction(g, -np.abs(u.values))
    assert phi_hess_dir(positive_square(), neg, xi) == 0.0
    assert positive_square().d2r(np.zeros(1))[0] == 0.0
    for r in SMOOTH + [positive_square()]:
        assert abs(phi_hess_dir(r, u, xi)) <= r.N * g.h * xi.values @ xi.values * (1 + 1e-12)


@pytest.mark.parametrize("r", SMOOTH, ids=lambda r: r.name)
def test_gradient_consistency_linear_in_eps(r):
    g = build_grid([(0, 1), (0, 1)], 0.2)
    rng = np.random.default_rng(2)
    u, xi = (GridFunction(g, x) for x in rng.standard_normal((2, g.N)))
    d1 = float(g.h**2 * phi_grad(r, u).values @ xi.values)
    d2 = phi_hess_dir(r, u, xi)
    e1, e2 = [], []
    for eps in (1e-2, 5e-3, 2.5e-3):
        e1.append(abs((phi_value(r, u + eps * xi) - phi_value(r, u)) / eps - d1))
        second = (phi_value(r, u + eps * xi) - 2 * phi_value(r, u) + phi_value(r, u - eps * xi)) / eps**2
        e2.append(abs(second - d2))
    # first-order errors halve with eps (or vanish for the quadratic)
    for e in (e1,):
        assert e[-1] <= 1e-9 or (0.35 < e[1] / e[0] < 0.65 and 0.35 < e[2] / e[1] < 0.65)
    assert max(e2) <= 1e-2 * (1 + abs(d2))


def test_functional_validation():
    with pytest.raises(ValueError):
        FunctionalR("bad", lambda x: x * x + 1.0, lambda x: 2 * x, lambda x: 2 + 0 * x, N=2.0)
    with pytest.raises(ValueError):
        FunctionalR("steep", lambda x: 3 * x * x, lambda x: 6 * x, lambda x: 6 + 0 * x, N=2.0)


def test_mollified_family_bounds_and_limit():
    g = build_grid([(0, 1)], 1 / 32)
    u = GridFunction(g, np.sin(3 * np.pi * g.coords[:, 0]))
    target = phi_value(positive_square(), u)
    errs = []
    for eps in (1e-1, 1e-2, 1e-3):
        r = mollified_positive_square(eps)
        assert r.N == 2.0
        x = np.array([-1.0, 0.0, eps / 2, eps, 2.0])
        assert r.d2r(x)[0] == 0 and r.d2r(x)[1] == 0 and r.d2r(x)[3] == 2
        np.testing.assert_allclose(r.dr(np.array([2.0])), 2 * (2 - eps / 2), rtol=1e-8)
        errs.append(abs(phi_value(r, u) - target))
    # r_eps(x) = x^2 - eps x + O(eps^2) for x >= eps: first order in eps
    assert errs[0] > errs[1] > errs[2]
    assert 5 < errs[0] / errs[1] < 20 and 5 < errs[1] / errs[2] < 20


def test_grad_v_ratio_measured():
    g = build_grid([(0, 1)], 1 / 32)
    u = np.sin(5 * g.coords[:, 0]) - 0.3
    assert grad_v_ratio(square(), u, 1, g) == pytest.approx(1.0, rel=1e-12)
    # the positive part is 1-Lipschitz, so differences cannot grow
    assert grad_v_ratio(positive_square(), u, 1, g) <= 1.0


def _heat_noise(g, nu=0.5, sigma=None):
    return SPDECoefficients.from_functions(g, 1, a=1.0, nu=nu, sigma=sigma)


def test_ledgers_zero_problem():
    g = build_grid([(0, 1)], 0.1)
    c = SPDECoefficients.from_functions(g, 1)
    tr = simulate(SPDEProblem(c, np.sin(np.pi * g.coords[:, 0])), 0.1, NoiseDriver(1, 0, 0.01), range(3))
    for led in (energy_identity_ledger(tr, c), general_ito_ledger(tr, c, positive_square())):
        assert np.all(led.residual == 0)


def test_explicit_pure_noise_residual_is_quadratic_variation_defect():
    g = build_grid([(0, 1)], 0.1)
    c = SPDECoefficients.from_functions(g, 1, sigma=0.5)
    tr = simulate(SPDEProblem(c, np.sin(np.pi * g.coords[:, 0])), 0.05, NoiseDriver(1, 3, 0.01), range(4),
                  scheme="explicit")
    led = energy_identity_ledger(tr, c)
    du = np.diff(tr.states, axis=0)
    dW = tr.dW[..., 0]
    G2 = led.correction / tr.dt
    np.testing.assert_allclose(led.step_residual, g.h * np.sum(du * du, axis=-1) - led.correction,
                               rtol=1e-10, atol=1e-14)
    np.testing.assert_allclose(led.step_residual, G2 * (dW**2 - tr.dt), rtol=1e-9, atol=1e-14)


def test_square_ledger_equals_energy_ledger():
    g = build_grid([(0, 1), (0, 1)], 0.2)
    c = SPDECoefficients.from_functions(g, 2, a=1.0, sigma=[[0.5, 0.2], [0.1, 0.4]], nu=[0.3, 0.1],
                                        c=-0.2, f=lambda x: -x[..., 0])
    tr = simulate(SPDEProblem(c, np.random.default_rng(0).standard_normal(g.N)), 0.1, NoiseDriver(2, 1, 0.01),
                  range(5))
    e, s = energy_identity_ledger(tr, c), general_ito_ledger(tr, c, square())
    for term in ("lhs", "drift", "correction", "stochastic"):
        a, b = getattr(e, term), getattr(s, term)
        assert np.all(np.abs(a - b) <= 1e-12 * np.maximum(np.abs(a), 1e-300))
    assert np.all(e.residual[0] == 0) and np.all(s.residual[0] == 0)
    assert s.qv_bound_ok


def test_positive_square_ledger_refines():
    g = build_grid([(0, 1)], 0.1)
    c = _heat_noise(g)
    p = SPDEProblem(c, g.coords[:, 0] - 0.5, K_bound=0.5)
    d = NoiseDriver(1, 4, 1e-2)
    means = []
    for lvl in range(3):
        tr = simulate(p, 0.5, d.refined(lvl), range(200))
        led = general_ito_ledger(tr, c, positive_square())
        assert led.qv_bound_ok
        means.append(np.mean(led.terminal_abs()))
    assert means[0] > means[1] > means[2]


def test_lifting_zero_and_single_node():
    g = build_grid([(0, 1)], 0.5)
    c = SPDECoefficients.from_functions(g, 1)
    tr = simulate(SPDEProblem(c, np.zeros(1)), 0.02, NoiseDriver(1, 0, 0.01), 0)
    assert all(r.sup_error == 0 for r in lifting_convergence(tr, [4, 16]))
    tr = simulate(SPDEProblem(c, np.ones(1)), 0.02, NoiseDriver(1, 0, 0.01), 0)
    rows = lifting_convergence(tr, [9, 81])
    assert rows[0].sup_error == pytest.approx(0.5 * math.sqrt(0.5), rel=1e-10)
    assert rows[1].sup_error == pytest.approx(0.1 * math.sqrt(0.5), rel=1e-10)


def test_lifting_nine_nodes_against_dense_spectrum():
    g = build_grid([(0, 1)], 0.1)
    c = _heat_noise(g)
    tr = simulate(SPDEProblem(c, np.sin(np.pi * g.coords[:, 0])), 0.5, NoiseDriver(1, 5, 1e-2), 0)
    rows = lifting_convergence(tr, [4, 16, 64, 256])
    sup_V = float(np.max(tr.norm_V(1)))
    errs = [r.sup_error for r in rows]
    assert all(b < a for a, b in zip(errs, errs[1:]))
    for r in rows:
        assert r.sup_error <= oracles.lift_spectral_factor((9,), 1, 0.1, r.n) * sup_V
        assert r.bound == pytest.approx(oracles.lift_spectral_factor((9,), 1, 0.1, r.n) * sup_V, rel=1e-10)


def _maxprin_problem(g, f=0.0, u0=None, K_bound=0.0):
    x = g.coords[:, 0]
    c = SPDECoefficients.from_functions(g, 1, a=1.0, sigma=1.0, f=f)
    return SPDEProblem(c, -x * (1 - x) if u0 is None else u0, K_bound=K_bound)


def test_max_principle_zero_problem_exact():
    g = build_grid([(0, 1)], 0.1)
    x = g.coords[:, 0]
    p = SPDEProblem(SPDECoefficients.from_functions(g, 1), -x * (1 - x))
    rep = max_principle_experiment(p, 0.1, NoiseDriver(1, 0, 0.02), 100, 2)
    assert all(r.mean_plus2 == 0 and r.max_u < 0 for r in rep.rows)
    assert rep.passed


def test_max_principle_preconditions():
    g = build_grid([(0, 1)], 0.1)
    with pytest.raises(AssumptionViolated):
        max_principle_experiment(_maxprin_problem(g, u0=np.ones(g.N)), 0.1, NoiseDriver(1, 0, 0.02), 100, 1)
    with pytest.raises(AssumptionViolated):
        max_principle_experiment(_maxprin_problem(g, f=1.0), 0.1, NoiseDriver(1, 0, 0.02), 100, 1)
    bad = SPDEProblem(SPDECoefficients.from_functions(g, 1, a=0.2, sigma=1.0), -np.ones(g.N))
    with pytest.raises(AssumptionViolated):
        max_principle_experiment(bad, 0.1, NoiseDriver(1, 0, 0.02), 100, 1)
    max_principle_experiment(bad, 0.1, NoiseDriver(1, 0, 0.02), 100, 1, override=True)


def test_gronwall_constant_without_dynamics():
    g = build_grid([(0, 1)], 0.1)
    p = SPDEProblem(SPDECoefficients.from_functions(g, 1), np.sin(np.pi * g.coords[:, 0]))
    tr = simulate(p, 0.1, NoiseDriver(1, 0, 0.01), range(3))
    rep = gronwall_check(tr)
    assert np.all(rep.weighted == rep.weighted[0]) and rep.passed


def test_gronwall_deterministic_heat_stays_nonpositive():
    g = build_grid([(0, 1)], 0.1)
    x = g.coords[:, 0]
    p = SPDEProblem(SPDECoefficients.from_functions(g, 1, a=1.0), -x * (1 - x))
    tr = simulate(p, 1.0, NoiseDriver(1, 0, 0.01), 0)
    rep = gronwall_check(tr, 0.0)
    assert np.max(rep.weighted) <= 1e-10 and rep.passed


def test_gronwall_detects_growth():
    # positive source makes u+ grow: the sequence must be flagged
    g = build_grid([(0, 1)], 0.1)
    p = _maxprin_problem(g, f=1.0)
    tr = simulate(p, 0.5, NoiseDriver(1, 0, 0.01), range(100))
    assert not gronwall_check(tr, 0.0).passed


def test_chain_rule_single_signed_exact():
    assert positive_part_chain_rule_check(lambda x: 1 + x[..., 0] ** 2).mismatch == [0.0, 0.0, 0.0]
    rep = positive_part_chain_rule_check(lambda x: -1 - x[..., 0])
    assert rep.passed and all(m == 0 for m in rep.mismatch)


def test_chain_rule_linear_crossing_matches_oracle():
    hs = (1 / 16, 1 / 32, 1 / 64)
    rep = positive_part_chain_rule_check(lambda x: x[..., 0] - 0.5, hs)
    for h, m in zip(hs, rep.mismatch):
        assert m == pytest.approx(oracles.positive_part_mismatch_linear(h), rel=1e-12)
    assert rep.rate == pytest.approx(0.5, abs=1e-12) and rep.passed


def test_chain_rule_smooth_samples():
    rep = positive_part_chain_rule_check(lambda x: np.sin(3 * np.pi * x[..., 0]))
    assert rep.rate >= 0.4 and rep.passed
    circle = lambda x: (x[..., 0] - 0.3) ** 2 + (x[..., 1] - 0.45) ** 2 - 0.09
    rep = positive_part_chain_rule_check(circle, [1 / 16, 1 / 32, 1 / 64, 1 / 128], bounds=((0, 1), (0, 1)))
    assert rep.rate >= 0.4
