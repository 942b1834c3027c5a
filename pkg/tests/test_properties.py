import math

import numpy as np
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from reuse_vr import diagnostics as dg
from reuse_vr import framework as fw
from reuse_vr import games as G
from reuse_vr import mdp
from reuse_vr.oracles import QueryLedger

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)
seeds = st.integers(0, 2 ** 32 - 1)


def vec(n):
    return arrays(np.float64, n, elements=finite)


@given(seeds, st.floats(0.1, 0.99))
def test_bellman_contraction_and_monotonicity(seed, gamma):
    rng = np.random.default_rng(seed)
    m = mdp.random_dmdp(5, 2, gamma, rng)
    v, w = rng.uniform(-5, 5, 5), rng.uniform(-5, 5, 5)
    Tv, Tw = mdp.bellman_apply(m, v)[0], mdp.bellman_apply(m, w)[0]
    assert np.abs(Tv - Tw).max() <= gamma * np.abs(v - w).max() + 1e-12
    hi = np.maximum(v, w)
    assert np.all(mdp.bellman_apply(m, hi)[0] >= Tv - 1e-12)


@given(st.lists(st.tuples(st.integers(0, 9), st.booleans()), max_size=60), st.integers(0, 5),
       st.integers(0, 30))
def test_ledger_counts(calls, batches, draws):
    led = QueryLedger()
    for key, cached in calls:
        led.charge_sample(key, cached)
    led.charge_batch(batches)
    led.charge_draws(draws)
    d = led.to_dict()
    keys = {k for k, _ in calls}
    assert d["distinct"] == len(keys) + draws
    assert d["distinct"] <= d["sample"] <= len(calls) + draws
    assert d["batch"] == batches
    both = led.merge(led)
    assert both.to_dict()["sample"] == 2 * d["sample"]
    assert both.to_dict()["distinct"] == len(keys) + 2 * draws


@given(vec(4))
def test_ball_projection(v):
    p = G.project_ball(v)
    assert np.linalg.norm(p) <= 1 + 1e-12
    assert np.allclose(G.project_ball(p), p)
    u = G.project_ball(np.ones(4) * 0.1)
    assert np.linalg.norm(p - u) <= np.linalg.norm(v - np.ones(4) * 0.1) + 1e-12


@given(vec(5))
def test_simplex_projection(v):
    p = G.project_simplex(v)
    assert np.all(p >= 0) and abs(p.sum() - 1) <= 1e-12
    assert np.allclose(G.project_simplex(p), p, atol=1e-12)
    # optimality: v - p is maximal exactly on the support
    r = v - p
    supp = p > 1e-12
    assert np.all(r[~supp] <= r[supp].min() + 1e-9)


def _bregman(setup, a, b):
    ax, ay = setup.split(a)
    bx, by = setup.split(b)
    out = 0.5 * np.sum((ax - bx) ** 2)
    if setup.y_factor == "ball":
        return out + 0.5 * np.sum((ay - by) ** 2)
    ay, by = np.maximum(ay, 1e-300), np.maximum(by, 1e-300)
    return out + float(np.sum(ay * np.log(ay / by)))


def _point(setup, rng):
    z = G.project(setup, rng.uniform(-1, 1, setup.n + setup.m))
    if setup.y_factor == "simplex":
        y = rng.dirichlet(np.ones(setup.m))
        z = setup.join(setup.split(z)[0], y)
    return z


@given(seeds, st.sampled_from([G.BALL_BALL, G.BALL_SIMPLEX]), st.floats(0.1, 10))
def test_prox_three_point_inequality(seed, domain, alpha):
    rng = np.random.default_rng(seed)
    setup = G.GameSetup(domain, 3, 4)
    anchor, u = _point(setup, rng), _point(setup, rng)
    g = rng.uniform(-3, 3, 7)
    w = G.prox_step(setup, anchor, g, alpha, anchor)
    lhs = g @ (w - u)
    rhs = alpha * (_bregman(setup, u, anchor) - _bregman(setup, u, w) - _bregman(setup, w, anchor))
    assert lhs <= rhs + 1e-8


@given(seeds, st.sampled_from([G.BALL_BALL, G.BALL_SIMPLEX]))
def test_duality_gap_bounds_sampled_differences(seed, domain):
    rng = np.random.default_rng(seed)
    setup = G.GameSetup(domain, 3, 4)
    A = rng.standard_normal((4, 3))
    if domain == G.BALL_SIMPLEX:
        A = np.abs(A)
    game = G.CompositeGame(A, G.Term("linear", rng.uniform(-1, 1, 3)), G.Term("linear", rng.uniform(-1, 1, 4)))
    z = _point(setup, rng)
    x, y = setup.split(z)
    gap = G.duality_gap(game, setup, z)
    for _ in range(20):
        xp, yp = setup.split(_point(setup, rng))
        assert game.value(x, yp) - game.value(xp, y) <= gap + 1e-9


@given(vec(6), st.floats(1e-3, 5), st.floats(0.1, 3), seeds)
def test_continuous_noise_stays_in_box(v, tau, scale, seed):
    out = fw.add_noise(v, fw.NoiseConfig("continuous", tau), np.random.default_rng(seed), scale)
    assert np.all(np.abs(out - v) <= tau * scale * (1 + 1e-12))


@given(vec(6), st.floats(1e-2, 5), st.floats(0.05, 1), seeds)
def test_grid_noise_on_grid_and_bounded(v, tau, ratio, seed):
    beta = ratio * tau
    out = fw.add_noise(v, fw.NoiseConfig("grid", tau, beta), np.random.default_rng(seed))
    k = out / beta
    assert np.allclose(k, np.round(k), atol=1e-6)
    # rounding down costs at most one grid step on top of tau
    assert np.all(np.abs(out - v) <= tau + beta + 1e-9)


@given(st.floats(1e-6, 10), st.floats(1e-4, 1))
def test_reuse_noise_formulas(eta, eps):
    eta_p, tau = fw.reuse_noise(eta, eps)
    assert eta_p <= eta / 2 * (1 + 1e-15) and eta_p <= eta * eps * (1 + 1e-15)
    assert math.isclose(tau, eta_p / (2 * eps))


@given(st.integers(1, 200), st.data())
def test_clopper_pearson_properties(n, data):
    k = data.draw(st.integers(0, n))
    lcb = dg.clopper_pearson_lcb(k, n)
    assert 0 <= lcb <= k / n
    if k < n:
        assert dg.clopper_pearson_lcb(k + 1, n) >= lcb
    assert dg.clopper_pearson_lcb(k, n, 0.99) <= lcb + 1e-15


@given(st.floats(1, 1e4), st.floats(1, 1e4))
def test_tilde_count_monotone(a, b):
    lo, hi = sorted((a, b))
    assert fw.tilde_count(lo, 3, 0.01) <= fw.tilde_count(hi, 3, 0.01)
    assert fw.tilde_count(hi, 3, 0.01) >= 4 * hi


@given(seeds, st.sampled_from([G.BALL_BALL, G.BALL_SIMPLEX]))
def test_bregman_dominates_half_squared_distance(seed, domain):
    rng = np.random.default_rng(seed)
    setup = G.GameSetup(domain, 3, 4)
    a, b = _point(setup, rng), _point(setup, rng)
    d2 = 0.5 * np.sum((a - b) ** 2)
    assert _bregman(setup, a, b) >= d2 - 1e-12
    assert d2 >= 0.5 * np.abs(a - b).max() ** 2
