"""Finite-sum minimization: APP outer loop with an SVRG sub-solver."""
import math

import numpy as np
from scipy.special import expit

from . import framework as fw
from .oracles import FiniteSumBundle

LINKS = ("squared", "logistic")


def glm_gradient(a, b, x, link):
    """Gradient of one GLM component phi(a^T x) at x."""
    z = a @ x
    if link == "squared":
        return a * (z - b)
    if link == "logistic":
        return -b * a * expit(-b * z)
    raise ValueError("unknown link %r" % (link,))


class FsmProblem(object):
    """F(x) = mean_i f_i(x) with f_i(x) = phi(a_i^T x; b_i) + ridge/2 |x|^2.

    Args:
        A: (n, d) data matrix, rows are a_i.
        b: labels of length n (+-1 for the logistic link).
        link: 'squared' or 'logistic'.
        ridge: l2 weight added to every component.
        mu: strong convexity of F; computed when omitted.
    """

    def __init__(self, A, b, link="squared", ridge=0.0, mu=None):
        self.A = np.asarray(A, dtype=float)
        self.b = np.asarray(b, dtype=float)
        if self.A.ndim != 2 or self.b.shape != (self.A.shape[0],):
            raise ValueError("A must be (n, d) and b of length n")
        if link not in LINKS:
            raise ValueError("link must be one of %s" % (LINKS,))
        self.n, self.dim = self.A.shape
        self.link = link
        self.ridge = float(ridge)
        row_sq = np.einsum("ij,ij->i", self.A, self.A)
        curv = 1.0 if link == "squared" else 0.25
        self.L = curv * row_sq + self.ridge
        if mu is None:
            if link == "squared":
                H = self.A.T @ self.A / self.n
                mu = np.linalg.eigvalsh(H)[0] + self.ridge
            else:
                mu = self.ridge
        if not mu > 0:
            raise ValueError("F must be strongly convex (mu > 0)")
        self.mu = float(mu)
        # uniform sampling: the estimator's smoothness is the largest L_i
        self.sample_probs = None
        self.sample_smoothness = float(self.L.max())

    def objective(self, x):
        z = self.A @ x
        if self.link == "squared":
            loss = 0.5 * np.mean((z - self.b) ** 2)
        else:
            loss = np.mean(np.logaddexp(0.0, -self.b * z))
        return loss + 0.5 * self.ridge * (x @ x)

    def full_grad(self, x):
        z = self.A @ x
        if self.link == "squared":
            r = z - self.b
        else:
            r = -self.b * expit(-self.b * z)
        return self.A.T @ r / self.n + self.ridge * x

    def component_grad(self, i, x):
        return glm_gradient(self.A[i], self.b[i], x, self.link) + self.ridge * x

    def sub_minimizer(self, y, lam):
        """argmin_x F(x) + lam/2 |x - y|^2, by linear solve or Newton's method."""
        y = np.asarray(y, dtype=float)
        d = self.dim
        if self.link == "squared":
            H = self.A.T @ self.A / self.n + (self.ridge + lam) * np.eye(d)
            return np.linalg.solve(H, self.A.T @ self.b / self.n + lam * y)
        x = y.copy()
        for _ in range(100):
            z = self.A @ x
            s = expit(-self.b * z)
            g = self.A.T @ (-self.b * s) / self.n + self.ridge * x + lam * (x - y)
            w = s * (1 - s)
            H = (self.A.T * w) @ self.A / self.n + (self.ridge + lam) * np.eye(d)
            step = np.linalg.solve(H, g)
            x = x - step
            if np.abs(step).max() < 1e-15 * (1 + np.abs(x).max()):
                break
        return x

    def minimizer(self):
        return self.sub_minimizer(np.zeros(self.dim), 0.0)

    def reg_objective(self, x, y, lam):
        diff = x - y
        return self.objective(x) + 0.5 * lam * (diff @ diff)

    def reg_gap(self, x, y, lam):
        """F(x) + lam/2|x-y|^2 minus its minimum over x."""
        return self.reg_objective(x, y, lam) - self.reg_objective(self.sub_minimizer(y, lam), y, lam)

    def bundle(self):
        return FiniteSumBundle(self.full_grad, self.component_grad, self.n, self.dim)


def app_rho(mu, lam):
    return (mu + 2.0 * lam) / mu


def app_anchor(u, mu, lam):
    """The prox center y_u of the state u = (x, v)."""
    d = len(u) // 2
    x, v = u[:d], u[d:]
    r = app_rho(mu, lam) ** -0.5
    return x / (1.0 + r) + (r / (1.0 + r)) * v


def fsm_post_process(u, x_half, mu, lam):
    """Momentum step: new state (x', v') from the state (x, v) and sub-solution x'."""
    if lam < mu:
        raise ValueError("lambda must be at least mu")
    d = len(u) // 2
    v = u[d:]
    r = app_rho(mu, lam) ** -0.5
    iota = 2.0 / mu + 1.0 / lam
    y = app_anchor(u, mu, lam)
    v_new = (1.0 - r) * v + r * (y - iota * lam * (y - x_half))
    return np.concatenate([x_half, v_new])


def svrg_subsolve(bundle, y, lam, seed, smoothness, probs=None, n_chains=1,
                  step_const=8.0, epoch_const=16.0):
    """Minimize F(x) + lam/2 |x - y|^2 by SVRG, touching only the indices in seed.

    Each epoch takes one batch gradient at its snapshot and then one step per seed
    record; the seed is split into n_chains independent runs whose coordinate-wise
    median is returned.

    Args:
        bundle: oracle bundle of the finite sum.
        y: prox center.
        lam: regularization weight.
        seed: ObliviousSeed of component indices.
        smoothness: smoothness of the (importance weighted) component estimator.
        probs: sampling probabilities of the seed distribution, None for uniform.

    Returns:
        The approximate minimizer.
    """
    y = np.asarray(y, dtype=float)
    step = 1.0 / (step_const * (smoothness + lam))
    m = svrg_epoch_length(smoothness, lam, epoch_const)
    n = bundle.n
    weights = None if probs is None else 1.0 / (n * np.asarray(probs))
    outs = []
    for chunk in np.array_split(np.asarray(seed.records), n_chains):
        x = y.copy()
        for start in range(0, len(chunk), m):
            w = x.copy()
            gw = bundle.batch_query(w)
            for i in chunk[start:start + m]:
                gi = bundle.sample_query(i)
                corr = gi(x) - gi(w)
                if weights is not None:
                    corr = corr * weights[i]
                x = x - step * (corr + gw + lam * (x - y))
        outs.append(x)
    return np.median(np.array(outs), axis=0)


def svrg_epoch_length(smoothness, lam, epoch_const=16.0):
    return int(math.ceil(epoch_const * (smoothness + lam) / lam))


def hp_gap_factor(c, mu, lam):
    """Relative gap reduction that yields |x' - x*|_inf^2 <= gap(y)/c.

    Strong convexity (mu + lam) turns a gap reduction c' into the distance bound
    |x' - x*|^2 <= 2 gap(y)/((mu + lam) c'); the max also keeps c mu/2.
    """
    return max(c * mu / 2.0, 2.0 * c / (mu + lam))


def svrg_hp_subsolve(bundle, problem, u, lam, seed, n_chains=1):
    """SVRG on the prox sub-problem at y_u; accuracy is set by the seed length."""
    y = app_anchor(u, problem.mu, lam)
    return svrg_subsolve(bundle, y, lam, seed, problem.sample_smoothness,
                         problem.sample_probs, n_chains=n_chains)


def robust_c(c, d, L, mu, safety=4.0):
    """l_inf contract constant that keeps APP's c-guarantee under perturbation."""
    return safety * max(2.0 * d * c / L, c * mu / 2.0)


def app_outer_count(mu, lam, c, C=1.0):
    return fw.tilde_count(math.sqrt(lam / mu), 1, 1.0, C, extra=c)


def svrg_seed_length(problem, lam, c_gap, delta, n_outer, C=4.0):
    """O~((L + lam)/lam) records, rounded up to whole SVRG epochs."""
    base = (problem.sample_smoothness + lam) / lam
    T = fw.tilde_count(base, n_outer, delta, C, extra=c_gap)
    m = svrg_epoch_length(problem.sample_smoothness, lam)
    return m * int(math.ceil(T / m))


def nonuniform_seed_spec(L, T=None, mu=None, C=4.0, delta=0.05, n_outer=1, bundle=None):
    """Importance sampling spec with P(j) proportional to sqrt(L_j).

    T defaults to the explicit O~(sum_i sqrt(L_i/(n mu))) count.
    """
    L = np.asarray(L, dtype=float)
    if np.any(L <= 0):
        raise ValueError("every L_i must be positive")
    root = np.sqrt(L)
    probs = root / root.sum()
    if T is None:
        if mu is None:
            raise ValueError("need mu to size the seed")
        T = fw.tilde_count(root.sum() / math.sqrt(L.size * mu), n_outer, delta, C)
    return fw.IndexSeedSpec(L.size, T, probs=probs, bundle=bundle, dist_id="sqrtL")


def app_solve(problem, x0, c, lam, mode, delta=0.01, eps=None, n_outer=None, T=None,
              C=4.0, C_outer=1.0, master_seed=0, n_chains=1, safety=4.0,
              noise_mode="continuous", grid_ratio=0.5):
    """Accelerated approximate proximal point with SVRG-HP inner solves.

    Args:
        problem: FsmProblem (or any finite sum exposing the same interface).
        x0: starting point.
        c: error factor; the target is F(x) - F* <= (F(x0) - F*)/c.
        lam: proximal weight, at least mu.
        mode: 'Standard', 'Noisy' or 'Reuse'.
        delta: failure probability; Reuse solves sub-problems at delta/(5 n_outer^2).
        eps: pseudo-independence level, defaults to delta.

    Returns:
        (x_hat, RunRecord)
    """
    fw.check_mode(mode)
    mu = problem.mu
    if lam < mu:
        raise ValueError("lambda must be at least mu")
    eps = delta if eps is None else eps
    d = problem.dim
    if n_outer is None:
        n_outer = app_outer_count(mu, lam, c, C_outer)
    c_rob = robust_c(c, d, float(problem.L.max()), mu, safety)
    # sub-solver accuracy in units of the robustness radius
    acc = min(0.5, eps)
    c_sub = c_rob / acc ** 2
    delta_sub = delta / (5.0 * n_outer ** 2)
    if T is None:
        # the same seed length is used in every mode so ledgers are comparable
        T = svrg_seed_length(problem, lam, hp_gap_factor(c_sub, mu, lam), delta_sub, n_outer, C)
    bundle = problem.bundle()
    spec = fw.IndexSeedSpec(problem.n, T, probs=problem.sample_probs, bundle=bundle,
                            dist_id="uniform" if problem.sample_probs is None else "weighted")

    def solve(u, seed, rng):
        return svrg_hp_subsolve(bundle, problem, u, lam, seed, n_chains)

    def radius(u):
        # eta(u)^2 = G(u)/c_rob with G(u) >= gap(y_u) by strong convexity
        g = bundle.batch_query(app_anchor(u, mu, lam))
        return math.sqrt((g @ g) / (2.0 * (mu + lam)) / c_rob)

    def target(u):
        return problem.sub_minimizer(app_anchor(u, mu, lam), lam)

    sub = fw.SubSolverContract(spec, solve, target=target, radius=radius)
    tau = acc / (2.0 * eps)
    if noise_mode == "grid":
        noise = fw.NoiseConfig("grid", tau, grid_ratio * tau)
    else:
        noise = fw.NoiseConfig("continuous", tau)
    cfg = fw.OuterConfig(mode, n_outer, noise=noise, master_seed=master_seed)
    u0 = np.concatenate([np.asarray(x0, dtype=float), np.zeros(d)])
    rec = fw.run_outer(u0, sub, lambda u, xh: fsm_post_process(u, xh, mu, lam), cfg, bundle)
    return rec.output[:d], rec
