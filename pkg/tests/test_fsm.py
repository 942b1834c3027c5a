import math

import numpy as np
import pytest

from reuse_vr import framework as fw
from reuse_vr import fsm


def ridge(n, d, seed, noise=0.5):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((n, d))
    b = A @ rng.standard_normal(d) + noise * rng.standard_normal(n)
    return fsm.FsmProblem(A, b)


def closed_form(p, y, lam):
    # independent of FsmProblem.sub_minimizer: normal equations of the prox problem
    H = p.A.T @ p.A / p.n + lam * np.eye(p.dim)
    return np.linalg.solve(H, p.A.T @ p.b / p.n + lam * y)


@pytest.mark.parametrize("link", ["squared", "logistic"])
def test_component_gradient_matches_finite_differences(link):
    rng = np.random.default_rng(0)
    a, x = rng.standard_normal(4), rng.standard_normal(4)
    b = 1.0 if link == "logistic" else 0.7
    if link == "squared":
        f = lambda z: 0.5 * (a @ z - b) ** 2
    else:
        f = lambda z: math.log1p(math.exp(-b * (a @ z)))
    h = 1e-6
    fd = np.array([(f(x + h * e) - f(x - h * e)) / (2 * h) for e in np.eye(4)])
    assert np.allclose(fsm.glm_gradient(a, b, x, link), fd, atol=1e-7)


def test_mean_of_components_is_full_gradient():
    p = ridge(15, 3, 1)
    x = np.random.default_rng(2).standard_normal(3)
    mean = np.mean([p.component_grad(i, x) for i in range(p.n)], axis=0)
    assert np.allclose(mean, p.full_grad(x), atol=1e-12)


def test_strong_convexity_is_checked():
    with pytest.raises(ValueError):
        fsm.FsmProblem(np.ones((3, 2)), np.zeros(3))


def test_anchor_formula():
    u = np.array([1.0, 2.0, 0.0, -1.0])
    r = (1.0 + 2 * 1.0) ** -0.5
    y = fsm.app_anchor(u, 1.0, 1.0)
    assert np.allclose(y, u[:2] / (1 + r) + r / (1 + r) * u[2:])


def test_post_process_hand_value():
    # mu = lam = 1: rho = 3, iota = 3
    out = fsm.fsm_post_process(np.array([1.0, 0.0]), np.array([0.0]), 1.0, 1.0)
    r = 3 ** -0.5
    y = 1.0 / (1 + r)
    assert round(y, 3) == 0.634
    assert out[0] == 0.0
    assert out[1] == pytest.approx(r * (y - 3 * (y - 0.0)), abs=1e-15)


def test_post_process_at_anchor_keeps_plain_average():
    rng = np.random.default_rng(3)
    u = rng.standard_normal(6)
    mu, lam = 0.5, 2.0
    y = fsm.app_anchor(u, mu, lam)
    r = fsm.app_rho(mu, lam) ** -0.5
    out = fsm.fsm_post_process(u, y, mu, lam)
    assert np.allclose(out[3:], (1 - r) * u[3:] + r * y, atol=1e-14)


def test_post_process_is_homogeneous():
    rng = np.random.default_rng(4)
    u, xh = rng.standard_normal(4), rng.standard_normal(2)
    a = fsm.fsm_post_process(3.0 * u, 3.0 * xh, 1.0, 2.0)
    assert np.allclose(a, 3.0 * fsm.fsm_post_process(u, xh, 1.0, 2.0), atol=1e-13)


def test_post_process_needs_lambda_at_least_mu():
    with pytest.raises(ValueError):
        fsm.fsm_post_process(np.zeros(2), np.zeros(1), 1.0, 0.5)


def test_svrg_single_quadratic_origin():
    p = fsm.FsmProblem(np.ones((1, 1)), np.zeros(1))
    bundle = p.bundle()
    seed = fw.IndexSeedSpec(1, 50, bundle=bundle).draw(np.random.default_rng(0))
    x = fsm.svrg_subsolve(bundle, np.zeros(1), 1.0, seed, p.sample_smoothness)
    assert abs(x[0]) <= 1e-12


def _hp_trials(p, lam, c, delta, n_trials, seed0=0):
    bundle = p.bundle()
    c_gap = fsm.hp_gap_factor(c, p.mu, lam)
    T = fsm.svrg_seed_length(p, lam, c_gap, delta, 1)
    spec = fw.IndexSeedSpec(p.n, T, bundle=bundle)
    rng = np.random.default_rng(seed0)
    y = rng.standard_normal(p.dim)
    u = np.concatenate([y, y])  # anchor of (y, y) is y
    exact = closed_form(p, y, lam)
    gap_y = p.reg_gap(y, y, lam)
    out = []
    for _ in range(n_trials):
        x = fsm.svrg_hp_subsolve(bundle, p, u, lam, spec.draw(rng))
        out.append((x, exact, gap_y))
    return out, bundle, spec


def test_svrg_relative_gap_contract():
    p = ridge(20, 5, 5)
    lam, c = p.mu, 100.0
    bundle = p.bundle()
    T = fsm.svrg_seed_length(p, lam, c, 0.05, 1)
    spec = fw.IndexSeedSpec(p.n, T, bundle=bundle)
    rng = np.random.default_rng(7)
    y = rng.standard_normal(5)
    ok = 0
    for _ in range(100):
        x = fsm.svrg_subsolve(bundle, y, lam, spec.draw(rng), p.sample_smoothness)
        ok += p.reg_gap(x, y, lam) <= p.reg_gap(y, y, lam) / c
    assert ok >= 95


def test_svrg_hp_linf_contract_and_norms():
    p = ridge(20, 5, 5)
    c = 100.0
    trials, _, _ = _hp_trials(p, p.mu, c, 0.05, 100)
    ok = 0
    for x, exact, gap_y in trials:
        d = x - exact
        assert np.abs(d).max() <= np.linalg.norm(d) + 1e-15
        ok += np.abs(d).max() ** 2 <= gap_y / c
    assert ok >= 95


@pytest.mark.parametrize("c", [10.0, 100.0, 1000.0])
def test_doubling_c_does_not_hurt_median(c):
    p = ridge(20, 5, 6)
    lam = p.mu
    y = np.random.default_rng(11).standard_normal(5)
    exact = closed_form(p, y, lam)
    meds = []
    for cc in (c, 2 * c):
        T = fsm.svrg_seed_length(p, lam, fsm.hp_gap_factor(cc, p.mu, lam), 0.05, 1)
        errs = []
        for k in range(50):
            # paired: the same stream, so the shorter seed is a prefix of the longer one
            bundle = p.bundle()
            seed = fw.IndexSeedSpec(p.n, T, bundle=bundle).draw(np.random.default_rng(k))
            x = fsm.svrg_subsolve(bundle, y, lam, seed, p.sample_smoothness)
            errs.append(np.abs(x - exact).max())
        meds.append(np.median(errs))
    assert meds[1] <= meds[0]


def test_app_scalar_quadratic():
    p = fsm.FsmProblem(np.ones((1, 1)), np.array([3.0]))
    x, rec = fsm.app_solve(p, np.zeros(1), 100.0, 1.0, fw.REUSE, delta=0.01)
    assert (x[0] - 3.0) ** 2 <= 9.0 / 100.0


def test_reuse_ledger_ratio_exact():
    p = ridge(50, 10, 1)
    lam = 4 * p.mu
    led = {}
    for mode in (fw.STANDARD, fw.REUSE):
        _, rec = fsm.app_solve(p, np.zeros(10), 100.0, lam, mode, delta=0.01, master_seed=3)
        led[mode] = rec
    n_outer = led[fw.REUSE].config.n_outer
    assert led[fw.STANDARD].ledger["sample"] == n_outer * led[fw.REUSE].ledger["sample"]
    assert led[fw.STANDARD].ledger["distinct"] == n_outer * led[fw.REUSE].ledger["distinct"]


def test_sub_minimizer_first_order_residual():
    p = ridge(30, 4, 9)
    y = np.random.default_rng(1).standard_normal(4)
    lam = 2 * p.mu
    x = p.sub_minimizer(y, lam)
    assert np.linalg.norm(p.full_grad(x) + lam * (x - y)) <= 1e-8 * (1 + np.linalg.norm(y))
    assert np.allclose(x, closed_form(p, y, lam), atol=1e-10)


def test_logistic_newton_oracle():
    rng = np.random.default_rng(2)
    A = rng.standard_normal((40, 3))
    b = np.sign(A @ np.ones(3) + 0.3 * rng.standard_normal(40))
    p = fsm.FsmProblem(A, b, "logistic", ridge=0.1)
    y = rng.standard_normal(3)
    x = p.sub_minimizer(y, 0.5)
    assert np.linalg.norm(p.full_grad(x) + 0.5 * (x - y)) <= 1e-10


def test_exact_app_contracts_at_accelerated_rate():
    p = ridge(50, 10, 1)
    xs = p.minimizer()
    e0 = p.objective(np.zeros(10)) - p.objective(xs)
    for ratio in (1, 4, 16):
        lam = ratio * p.mu
        rate = 1 - fsm.app_rho(p.mu, lam) ** -0.5 / 2
        u = np.zeros(20)
        for t in range(1, 60):
            xh = closed_form(p, fsm.app_anchor(u, p.mu, lam), lam)
            u = fsm.fsm_post_process(u, xh, p.mu, lam)
            assert p.objective(u[:10]) - p.objective(xs) <= rate ** t * e0 + 1e-12


def test_noisy_exact_solves_keep_contract():
    # exact sub-solutions perturbed within half the robustness radius
    p = ridge(50, 10, 2)
    c = 100.0
    lam = p.mu
    mu = p.mu
    c_rob = fsm.robust_c(c, p.dim, float(p.L.max()), mu)
    n_outer = fsm.app_outer_count(mu, lam, c)
    xs = p.minimizer()
    e0 = p.objective(np.zeros(10)) - p.objective(xs)
    for k in range(20):
        def radius(u):
            y = fsm.app_anchor(u, mu, lam)
            g = p.full_grad(y) + 0 * y
            return math.sqrt((g @ g) / (2 * (mu + lam)) / c_rob)

        sub = fw.SubSolverContract(fw.IndexSeedSpec(p.n, 1),
                                   lambda u, s, r: closed_form(p, fsm.app_anchor(u, mu, lam), lam),
                                   radius=radius)
        cfg = fw.OuterConfig(fw.NOISY, n_outer, noise=fw.NoiseConfig("continuous", 0.5), master_seed=k)
        rec = fw.run_outer(np.zeros(20), sub, lambda u, xh: fsm.fsm_post_process(u, xh, mu, lam), cfg)
        assert p.objective(rec.output[:10]) - p.objective(xs) <= e0 / c


def test_nonuniform_spec():
    spec = fsm.nonuniform_seed_spec(np.full(4, 2.0), T=5)
    assert np.allclose(spec.table.probs, 0.25)
    spec = fsm.nonuniform_seed_spec(np.array([1.0, 4.0]), T=10 ** 5)
    assert np.allclose(spec.table.probs, [1 / 3, 2 / 3])
    draws = spec.draw(np.random.default_rng(0)).records
    assert abs(np.mean(draws == 1) - 2 / 3) <= 0.01
    with pytest.raises(ValueError):
        fsm.nonuniform_seed_spec(np.array([1.0, 0.0]), T=3)
