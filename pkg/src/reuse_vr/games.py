"""Composite matrix games on ball x ball and ball x simplex: CPP outer loop, VRMD sub-solvers."""
import math

import numpy as np
from scipy.special import logsumexp

from . import framework as fw
from .oracles import AliasTable, MatrixBundle

BALL_BALL = "ball_ball"
BALL_SIMPLEX = "ball_simplex"
DOMAINS = (BALL_BALL, BALL_SIMPLEX)
TERM_KINDS = ("zero", "linear", "quadratic", "entropy")

# simplex anchors are clamped here before the exponential-weights step
SIMPLEX_FLOOR = 1e-12


def project_ball(v, radius=1.0):
    norm = np.linalg.norm(v)
    if norm <= radius:
        return v.copy()
    return v * (radius / norm)


def project_simplex(v):
    """Euclidean projection onto the probability simplex by sort and threshold."""
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    k = np.arange(1, v.size + 1)
    rho = np.nonzero(u - css / k > 0)[0][-1]
    theta = css[rho] / (rho + 1.0)
    return np.maximum(v - theta, 0.0)


class Term(object):
    """Explicit composite term: zero, linear <b, z>, quadratic mu/2 |z|^2 or entropy s sum z log z."""

    def __init__(self, kind="zero", coef=0.0):
        if kind not in TERM_KINDS:
            raise ValueError("term kind must be one of %s" % (TERM_KINDS,))
        self.kind = kind
        self.coef = np.asarray(coef, dtype=float) if kind == "linear" else float(coef)
        if kind in ("quadratic", "entropy") and self.coef < 0:
            raise ValueError("%s term needs a nonnegative weight" % kind)

    def value(self, z):
        if self.kind == "zero":
            return 0.0
        if self.kind == "linear":
            return float(self.coef @ z)
        if self.kind == "quadratic":
            return 0.5 * self.coef * float(z @ z)
        pos = z[z > 0]
        return self.coef * float(pos @ np.log(pos))

    def grad(self, z):
        if self.kind == "zero":
            return np.zeros_like(z)
        if self.kind == "linear":
            return self.coef.copy()
        if self.kind == "quadratic":
            return self.coef * z
        return self.coef * (1.0 + np.log(np.maximum(z, SIMPLEX_FLOOR)))

    def grad_diff(self, z, w):
        """grad(z) - grad(w); None when it vanishes identically."""
        if self.kind in ("zero", "linear") or self.coef == 0:
            return None
        if self.kind == "quadratic":
            return self.coef * (z - w)
        return self.coef * (np.log(np.maximum(z, SIMPLEX_FLOOR)) - np.log(np.maximum(w, SIMPLEX_FLOOR)))

    def lipschitz(self):
        return self.coef if self.kind == "quadratic" else 0.0

    def support(self, c, factor):
        """max over the factor of <c, z> - term(z)."""
        if self.kind == "linear":
            return Term().support(c - self.coef, factor)
        if self.kind == "zero" or self.coef == 0:
            return float(np.linalg.norm(c)) if factor == "ball" else float(c.max())
        if self.kind == "quadratic":
            mu = self.coef
            if factor == "ball":
                nc = np.linalg.norm(c)
                return nc * nc / (2 * mu) if nc <= mu else nc - mu / 2
            z = project_simplex(c / mu)
            return float(c @ z) - 0.5 * mu * float(z @ z)
        if factor != "simplex":
            raise ValueError("the entropy term needs a simplex factor")
        return self.coef * float(logsumexp(c / self.coef))


class CompositeGame(object):
    """f(x, y) = y^T A x + phi(x) - psi(y) with A of shape (m, n)."""

    def __init__(self, A, phi=None, psi=None):
        self.A = np.asarray(A, dtype=float)
        if self.A.ndim != 2 or not np.isfinite(self.A).all():
            raise ValueError("A must be a finite 2-d matrix")
        self.m, self.n = self.A.shape
        self.phi = phi if phi is not None else Term()
        self.psi = psi if psi is not None else Term()

    def value(self, x, y):
        return float(y @ self.A @ x) + self.phi.value(x) - self.psi.value(y)

    def bundle(self):
        return MatrixBundle(self.A)


class GameSetup(object):
    """Domain Z = X x Y with X the unit ball in R^n and Y a ball or simplex in R^m."""

    def __init__(self, domain, n, m):
        if domain not in DOMAINS:
            raise ValueError("domain must be one of %s" % (DOMAINS,))
        self.domain = domain
        self.n, self.m = int(n), int(m)
        self.dim = self.n + self.m
        self.y_factor = "ball" if domain == BALL_BALL else "simplex"

    def split(self, z):
        return z[:self.n], z[self.n:]

    def join(self, x, y):
        return np.concatenate([x, y])

    def center(self):
        """argmin of the distance-generating function."""
        y = np.zeros(self.m) if self.y_factor == "ball" else np.full(self.m, 1.0 / self.m)
        return self.join(np.zeros(self.n), y)

    def theta(self):
        """Range of the distance-generating function over Z."""
        return 1.0 if self.y_factor == "ball" else 0.5 + math.log(self.m)

    def constants(self, game):
        """L, G, D, Theta, c, C for this setup and game."""
        A = game.A
        extra = max(game.phi.lipschitz(), game.psi.lipschitz())
        if self.domain == BALL_BALL:
            L = G = float(np.linalg.norm(A, 2)) + extra
            C = float(self.dim)
        else:
            L = float(np.sqrt((A * A).sum(axis=1)).max()) + extra
            G = float(np.abs(A).max()) + extra
            C = float(self.dim) ** 2
        return {"L": L, "G": G, "D": 1.0, "Theta": self.theta(), "c": 1.0, "C": C}

    def check(self, game):
        if (game.m, game.n) != (self.m, self.n):
            raise ValueError("game is %dx%d but the setup is %dx%d" % (game.m, game.n, self.m, self.n))
        if self.y_factor == "ball" and game.psi.kind == "entropy":
            raise ValueError("the entropy term needs a simplex factor")
        if game.phi.kind == "entropy":
            raise ValueError("the x factor is a ball; the entropy term is not allowed there")


def project(setup, z):
    """Projection onto Z: radial clipping on balls, sort-and-threshold on the simplex."""
    z = np.asarray(z, dtype=float)
    if not np.isfinite(z).all():
        raise ValueError("cannot project a non-finite vector")
    x, y = setup.split(z)
    y = project_ball(y) if setup.y_factor == "ball" else project_simplex(y)
    return setup.join(project_ball(x), y)


def _simplex_anchor(y):
    if np.any(y < 0) or not np.isfinite(y).all():
        raise ValueError("simplex anchor must be nonnegative")
    return np.maximum(y, SIMPLEX_FLOOR)


def _normalize_log(logy):
    logy = logy - logy.max()
    y = np.exp(logy)
    return y / y.sum()


def prox_step(setup, z, g, alpha, anchor):
    """argmin over Z of <g, w> + alpha V_anchor(w), in closed form.

    The ball factor takes a projected gradient step from the anchor; the simplex
    factor uses exponential weights y ~ anchor exp(-g/alpha).
    """
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    ax, ay = setup.split(np.asarray(anchor, dtype=float))
    gx, gy = setup.split(np.asarray(g, dtype=float))
    x = project_ball(ax - gx / alpha)
    if setup.y_factor == "ball":
        y = project_ball(ay - gy / alpha)
    else:
        y = _normalize_log(np.log(_simplex_anchor(ay)) - gy / alpha)
    return setup.join(x, y)


def combined_prox(setup, g, z0, zk, alpha, step):
    """argmin over Z of <g, w> + alpha V_z0(w) + V_zk(w)/step."""
    x0, y0 = setup.split(z0)
    xk, yk = setup.split(zk)
    gx, gy = setup.split(g)
    inv = 1.0 / step
    x = project_ball((alpha * x0 + inv * xk - gx) / (alpha + inv))
    if setup.y_factor == "ball":
        y = project_ball((alpha * y0 + inv * yk - gy) / (alpha + inv))
    else:
        logy = (alpha * np.log(_simplex_anchor(y0)) + inv * np.log(_simplex_anchor(yk)) - gy) / (alpha + inv)
        y = _normalize_log(logy)
    return setup.join(x, y)


def gradient_mapping(game, setup, z, bundle=None):
    """g(z) = (A^T y + grad phi(x), -A x + grad psi(y)); one batch query if a bundle is given."""
    x, y = setup.split(np.asarray(z, dtype=float))
    if bundle is not None:
        Ax, Aty = bundle.batch_query(x, y)
    else:
        Ax, Aty = game.A @ x, game.A.T @ y
    return setup.join(Aty + game.phi.grad(x), -Ax + game.psi.grad(y))


def duality_gap(game, setup, z):
    """max_y' f(x, y') - min_x' f(x', y), exact for the supported composite terms."""
    x, y = setup.split(np.asarray(z, dtype=float))
    best_y = game.phi.value(x) + game.psi.support(game.A @ x, setup.y_factor)
    best_x = -game.psi.value(y) - game.phi.support(-(game.A.T @ y), "ball")
    return max(best_y - best_x, 0.0)


def sample_dists(game):
    """D_row, D_col and the per-row D_entry(i) as alias samplers.

    Zero rows get probability 0 in D_row and no entry sampler. An all-zero matrix
    gets uniform row and column samplers; every estimate it feeds is zero anyway.
    """
    A2 = game.A ** 2
    rows = A2.sum(axis=1)
    cols = A2.sum(axis=0)
    entry = [AliasTable(A2[i]) if rows[i] > 0 else None for i in range(game.m)]
    if rows.sum() == 0:
        row_p, col_p = np.full(game.m, 1.0 / game.m), np.full(game.n, 1.0 / game.n)
    else:
        row_p, col_p = rows / rows.sum(), cols / cols.sum()
    return {"row": AliasTable(row_p), "col": AliasTable(col_p), "entry": entry,
            "row_sq": rows, "col_sq": cols, "row_p": row_p, "col_p": col_p}


def sub_solution(game, setup, z0, alpha, tol=1e-14, max_iter=10 ** 6):
    """Reference solution z_alpha of the alpha-regularized sub-problem at z0.

    Deterministic forward-backward iteration with the regularizer handled in the prox.
    """
    c = setup.constants(game)
    step = alpha / (c["L"] ** 2 + alpha ** 2)
    z = np.array(z0, dtype=float)
    for _ in range(max_iter):
        new = combined_prox(setup, gradient_mapping(game, setup, z), z0, z, alpha, step)
        if np.abs(new - z).max() <= tol:
            return new
        z = new
    return z


class GameSeedSpec(fw.SeedSpec):
    """Oblivious seeds for the two setups.

    ball_ball: T rows i ~ D_row and T columns j ~ D_col, records of shape (T, 2).
    ball_simplex: for every row q, T columns j ~ D_entry(q), records of shape (T, m).
    """

    def __init__(self, game, setup, bundle, T, dists=None):
        super().__init__(T)
        self.game, self.setup, self.bundle = game, setup, bundle
        self.dists = dists if dists is not None else sample_dists(game)
        self.dist_id = "rowcol" if setup.domain == BALL_BALL else "entry"

    def _records(self, rng):
        if self.setup.domain == BALL_BALL:
            return np.stack([self.dists["row"].draw(rng, self.T),
                             self.dists["col"].draw(rng, self.T)], axis=1)
        out = np.zeros((self.T, self.game.m), dtype=np.int64)
        for q, table in enumerate(self.dists["entry"]):
            if table is not None:
                out[:, q] = table.draw(rng, self.T)
        return out

    def _charge(self, records):
        if self.setup.domain == BALL_BALL:
            self.bundle.grant("row", records[:, 0].tolist())
            return self.bundle.grant("col", records[:, 1].tolist())
        live = [q for q, t in enumerate(self.dists["entry"]) if t is not None]
        keys = [(q, int(j)) for q in live for j in records[:, q]]
        return self.bundle.grant("entry", keys)


def vrmd_steps(lbar, alpha, C=4.0):
    """Inner steps per epoch, O(lbar^2 / alpha^2)."""
    return max(1, int(math.ceil(C * lbar ** 2 / alpha ** 2)))


def vrmd_epochs(eps, C=1.0):
    """Epochs that shrink an O(1) initial distance below eps, one per halving."""
    return max(1, int(math.ceil(C * math.log2(max(2.0 / eps, 2.0)))))


def vrmd_seed_length(game, setup, alpha, eps, delta, n_outer=1, C=4.0):
    """Seed length T = epochs * steps, with a log(n_outer/delta) safety margin in the epochs."""
    lbar = _estimator_scale(game, setup)
    steps = vrmd_steps(lbar, alpha, C)
    epochs = vrmd_epochs(eps) + int(math.ceil(math.log2(max(n_outer / delta, 2.0)) / 4))
    return epochs, steps


def _estimator_scale(game, setup):
    A = game.A
    extra = max(game.phi.lipschitz(), game.psi.lipschitz())
    if setup.domain == BALL_BALL:
        return math.sqrt(float((A * A).sum())) + extra
    return float(np.sqrt((A * A).sum(axis=1)).max()) + extra


def _add_term_diffs(game, g, n, x, y, wx, wy):
    d = game.phi.grad_diff(x, wx)
    if d is not None:
        g[:n] += d
    d = game.psi.grad_diff(y, wy)
    if d is not None:
        g[n:] += d


def _prox_operator(setup, z0, alpha, step):
    """zk, g -> combined_prox(setup, g, z0, zk, alpha, step) with the z0 parts precomputed."""
    n = setup.n
    inv = 1.0 / step
    scale = 1.0 / (alpha + inv)
    bx = alpha * z0[:n]
    if setup.y_factor == "ball":
        by = alpha * z0[n:]

        def prox(g, zk):
            out = (np.concatenate([bx, by]) + inv * zk - g) * scale
            for part in (out[:n], out[n:]):
                norm = math.sqrt(part @ part)
                if norm > 1.0:
                    part /= norm
            return out
        return prox
    by = alpha * np.log(_simplex_anchor(z0[n:]))

    def prox(g, zk):
        x = (bx + inv * zk[:n] - g[:n]) * scale
        norm = math.sqrt(x @ x)
        if norm > 1.0:
            x /= norm
        logy = (by + inv * np.log(np.maximum(zk[n:], SIMPLEX_FLOOR)) - g[n:]) * scale
        return np.concatenate([x, _normalize_log(logy)])
    return prox


def vrmd2_subsolve(game, setup, z, alpha, eps, delta, seed, bundle=None, epochs=None,
                   steps=None, dists=None):
    """Variance-reduced forward-backward on the ball x ball sub-problem at z.

    Each epoch anchors at w with one batch query and estimates g(z_k) - g(w) from one
    seeded row (i ~ D_row) and column (j ~ D_col) per step. Makes no entry queries.
    """
    if bundle is None:
        bundle = game.bundle()
    if dists is None:
        dists = sample_dists(game)
    records = np.asarray(seed.records)
    lbar = _estimator_scale(game, setup)
    if steps is None:
        steps = vrmd_steps(lbar, alpha)
    if epochs is None:
        epochs = max(1, len(records) // steps)
    if len(records) < epochs * steps:
        raise ValueError("seed too short: %d records for %d epochs of %d steps" % (len(records), epochs, steps))
    pr, pc = dists["row_p"], dists["col_p"]
    rows = {i: bundle.row_query(i) / pr[i] for i in np.unique(records[:epochs * steps, 0]).tolist()}
    cols = {j: bundle.col_query(j) / pc[j] for j in np.unique(records[:epochs * steps, 1]).tolist()}
    # with nothing to estimate a single exact prox step solves the sub-problem
    step = alpha / (4.0 * lbar ** 2) if lbar > 0 else math.inf
    n = setup.n
    z0 = np.asarray(z, dtype=float)
    prox = _prox_operator(setup, z0, alpha, step)
    zk = z0.copy()
    for e in range(epochs):
        w = zk.copy()
        wx, wy = w[:n], w[n:]
        gw = gradient_mapping(game, setup, w, bundle)
        for i, j in records[e * steps:(e + 1) * steps].tolist():
            x, y = zk[:n], zk[n:]
            g = gw.copy()
            g[:n] += rows[i] * (y[i] - wy[i])
            g[n:] -= cols[j] * (x[j] - wx[j])
            _add_term_diffs(game, g, n, x, y, wx, wy)
            zk = prox(g, zk)
    return zk


def vrmd1_subsolve(game, setup, z, alpha, eps, delta, seed, adaptive_rng, bundle=None,
                   epochs=None, steps=None, dists=None):
    """Variance-reduced mirror descent on the ball x simplex sub-problem at z.

    The y-part of g(z_k) - g(w) comes from the seeded entries, one per row and step;
    the x-part from one row drawn adaptively with probability proportional to |y - w_y|.
    """
    if bundle is None:
        bundle = game.bundle()
    if dists is None:
        dists = sample_dists(game)
    records = np.asarray(seed.records)
    lbar = _estimator_scale(game, setup)
    if steps is None:
        steps = vrmd_steps(lbar, alpha)
    if epochs is None:
        epochs = max(1, len(records) // steps)
    if len(records) < epochs * steps:
        raise ValueError("seed too short: %d records for %d epochs of %d steps" % (len(records), epochs, steps))
    m, n = game.m, setup.n
    live = [q for q, t in enumerate(dists["entry"]) if t is not None]
    # per-row importance weights |a_q|^2 / A_qj of the seeded entries
    weight = np.zeros((m, n))
    for q in live:
        for j in np.unique(records[:epochs * steps, q]).tolist():
            weight[q, j] = dists["row_sq"][q] / bundle.entry_query(q, j)
    # zero rows have zero weight, so their estimate vanishes
    qs = np.arange(m)
    step = alpha / (4.0 * lbar ** 2) if lbar > 0 else math.inf
    z0 = np.asarray(z, dtype=float)
    prox = _prox_operator(setup, z0, alpha, step)
    zk = z0.copy()
    for e in range(epochs):
        w = zk.copy()
        wx, wy = w[:n], w[n:]
        gw = gradient_mapping(game, setup, w, bundle)
        for cols in records[e * steps:(e + 1) * steps]:
            x, y = zk[:n], zk[n:]
            g = gw.copy()
            diff = y - wy
            mass = np.abs(diff).sum()
            if mass > 0:
                i = int(adaptive_rng.choice(m, p=np.abs(diff) / mass))
                g[:n] += bundle.row_query(i, cached=False) * (np.sign(diff[i]) * mass)
            g[n:] -= weight[qs, cols] * (x - wx)[cols]
            _add_term_diffs(game, g, n, x, y, wx, wy)
            zk = prox(g, zk)
    return zk


def default_alpha(game, eps):
    return float(np.linalg.norm(game.A)) ** (2.0 / 3.0) * eps ** (1.0 / 3.0)


def cpp_counts(game, setup, eps, alpha, delta, eps_pi=None, n_outer=None, C=4.0, C_outer=1.0):
    """Outer count, sub-problem accuracy and seed size used by cpp_solve."""
    k = setup.constants(game)
    eps_pi = delta if eps_pi is None else eps_pi
    if n_outer is None:
        n_outer = max(1, int(math.ceil(C_outer * alpha * k["Theta"] / eps)))
    eps_sub = eps * k["c"] / (4.0 * k["C"] * (k["G"] + k["D"] * k["L"]) * setup.dim)
    eta_prime, tau = fw.reuse_noise(eps_sub, eps_pi)
    delta_sub = delta / (5.0 * n_outer ** 2)
    # seeds are sized for the Reuse accuracy in every mode
    epochs, steps = vrmd_seed_length(game, setup, alpha, eta_prime, delta_sub, n_outer, C)
    return {"n_outer": n_outer, "eps_sub": eps_sub, "eta_prime": eta_prime, "tau": tau,
            "epochs": epochs, "steps": steps, "T": epochs * steps}


def cpp_solve(game, setup, eps, mode, alpha=None, delta=0.01, eps_pi=None, n_outer=None,
              C=4.0, C_outer=1.0, master_seed=0, noise_mode="continuous", grid_ratio=0.5):
    """Conceptual proximal point with VRMD sub-solves and an extragradient post-process.

    Args:
        game: CompositeGame.
        setup: GameSetup matching the game.
        eps: target duality gap.
        mode: 'Standard', 'Noisy' or 'Reuse'.
        alpha: regularization, defaults to |A|_F^(2/3) eps^(1/3).
        delta: failure probability.
        eps_pi: pseudo-independence level, defaults to delta.

    Returns:
        (z_out, RunRecord), z_out the uniform average of the post-processed iterates.
    """
    fw.check_mode(mode)
    setup.check(game)
    if alpha is None:
        alpha = default_alpha(game, eps)
    if not alpha > 0 or not eps > 0:
        raise ValueError("alpha and eps must be positive")
    cnt = cpp_counts(game, setup, eps, alpha, delta, eps_pi, n_outer, C, C_outer)
    bundle = game.bundle()
    dists = sample_dists(game)
    spec = GameSeedSpec(game, setup, bundle, cnt["T"], dists)
    acc = cnt["eta_prime"] if mode != fw.STANDARD else cnt["eps_sub"]

    def solve(u, seed, rng):
        if setup.domain == BALL_BALL:
            return vrmd2_subsolve(game, setup, u, alpha, acc, delta, seed, bundle,
                                  cnt["epochs"], cnt["steps"], dists)
        return vrmd1_subsolve(game, setup, u, alpha, acc, delta, seed, rng, bundle,
                              cnt["epochs"], cnt["steps"], dists)

    def post(u, u_half):
        z2 = project(setup, u_half)
        return prox_step(setup, z2, gradient_mapping(game, setup, z2, bundle), alpha, u)

    def target(u):
        return sub_solution(game, setup, u, alpha)

    sub = fw.SubSolverContract(spec, solve, target=target)
    tau = cnt["tau"]
    if noise_mode == "grid":
        noise = fw.NoiseConfig("grid", tau, grid_ratio * tau)
    else:
        noise = fw.NoiseConfig("continuous", tau)
    n = cnt["n_outer"]
    cfg = fw.OuterConfig(mode, n, weights=np.full(n, 1.0 / n), noise=noise, master_seed=master_seed)
    rec = fw.run_outer(setup.center(), sub, post, cfg, bundle)
    rec.extra.update(cnt)
    rec.extra["alpha"] = alpha
    return rec.output, rec
