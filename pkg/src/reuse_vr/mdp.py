"""Discounted and average-reward MDPs: Bellman machinery, PRM outer loop, VRVI sub-solver."""
import math

import numpy as np
import scipy.sparse as sp

from . import framework as fw
from .oracles import SimulatorBundle

MAX_EXACT_PAIRS = 10 ** 4


class Dmdp(object):
    """Finite discounted MDP with state-major state-action pairs.

    Args:
        P: (A_tot, S) row-stochastic matrix, dense or sparse; row k is p(s, a).
        r: rewards of length A_tot.
        gamma: discount in (0, 1).
        actions: per-state action counts or per-state label lists.
        top_level: also require r <= 1.
    """

    def __init__(self, P, r, gamma, actions, top_level=True):
        self.P = sp.csr_matrix(P, dtype=float)
        self.r = np.asarray(r, dtype=float)
        self.gamma = float(gamma)
        counts = [a if isinstance(a, (int, np.integer)) else len(a) for a in actions]
        self.labels = [list(range(a)) if isinstance(a, (int, np.integer)) else list(a)
                       for a in actions]
        self.counts = np.asarray(counts, dtype=np.int64)
        self.n_states = len(counts)
        self.n_pairs = int(self.counts.sum())
        self.starts = np.concatenate([[0], np.cumsum(self.counts)[:-1]]).astype(np.int64)
        self.state_of = np.repeat(np.arange(self.n_states), self.counts)
        self.top_level = top_level
        self.validate()

    def validate(self):
        if np.any(self.counts < 1):
            raise ValueError("every state needs at least one action")
        if self.P.shape != (self.n_pairs, self.n_states):
            raise ValueError("P must be (%d, %d), got %s" % (self.n_pairs, self.n_states, self.P.shape))
        if self.r.shape != (self.n_pairs,):
            raise ValueError("need one reward per state-action pair")
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")
        if self.P.nnz and self.P.data.min() < 0:
            raise ValueError("transition probabilities must be nonnegative")
        sums = np.asarray(self.P.sum(axis=1)).ravel()
        bad = np.flatnonzero(np.abs(sums - 1.0) > 1e-12)
        if bad.size:
            k = bad[0]
            raise ValueError("row (s=%d, a=%d) sums to %r" % (self.state_of[k], k - self.starts[self.state_of[k]], sums[k]))
        if not np.isfinite(self.r).all() or np.any(self.r < 0):
            raise ValueError("rewards must be finite and nonnegative")
        if self.top_level and np.any(self.r > 1):
            raise ValueError("top-level rewards must lie in [0, 1]")

    @property
    def nnz(self):
        return int(self.P.nnz)

    def with_gamma(self, gamma):
        return Dmdp(self.P, self.r, gamma, self.labels, self.top_level)

    def pairs(self, policy):
        """Pair indices chosen by a policy of per-state action positions."""
        policy = np.asarray(policy, dtype=np.int64)
        if policy.shape != (self.n_states,) or np.any(policy < 0) or np.any(policy >= self.counts):
            raise ValueError("policy must pick a valid action in every state")
        return self.starts + policy

    def bundle(self, rng=None):
        return SimulatorBundle(self.P, rng)


def random_dmdp(n_states, n_actions, gamma, rng, support=None, deterministic=False):
    """Random DMDP with Unif[0,1] rewards; `support` successors per pair (all if None)."""
    A = n_states * n_actions
    P = np.zeros((A, n_states))
    for k in range(A):
        if deterministic:
            P[k, rng.integers(n_states)] = 1.0
            continue
        size = n_states if support is None else support
        succ = rng.choice(n_states, size=size, replace=False)
        w = rng.random(size) + 1e-3
        P[k, succ] = w / w.sum()
    # renormalize in the same order as the validator sums
    P = P / P.sum(axis=1, keepdims=True)
    return Dmdp(P, rng.random(A), gamma, [n_actions] * n_states)


def state_max(m, q, tol=0.0):
    """Per-state maximum of q and its argmax position.

    Ties, up to tol, go to the lowest action index.
    """
    vals = np.maximum.reduceat(q, m.starts)
    idx = np.arange(m.n_pairs)
    best = np.where(q >= vals[m.state_of] - tol, idx, m.n_pairs)
    first = np.minimum.reduceat(best, m.starts)
    return vals, first - m.starts


def bellman_apply(m, v, bundle=None, gamma=None, r=None):
    """T[v](s) = max_a r(s,a) + gamma p(s,a)^T v, plus the greedy policy.

    P v comes from one batch query when a bundle is given.
    """
    v = np.asarray(v, dtype=float)
    if v.shape != (m.n_states,):
        raise ValueError("value vector must have length %d" % m.n_states)
    gamma = m.gamma if gamma is None else gamma
    r = m.r if r is None else r
    pv = bundle.batch_query(v) if bundle is not None else m.P @ v
    return state_max(m, r + gamma * pv)


def policy_value(m, policy, gamma=None, r=None):
    """Value of a deterministic policy by solving (I - gamma P_pi) v = r_pi."""
    gamma = m.gamma if gamma is None else gamma
    r = m.r if r is None else r
    rows = m.pairs(policy)
    P_pi = m.P[rows].toarray()
    return np.linalg.solve(np.eye(m.n_states) - gamma * P_pi, r[rows])


def exact_solve(m, gamma=None, r=None, max_iter=1000):
    """Optimal value and policy by policy iteration (reference solver for small MDPs)."""
    if m.n_pairs > MAX_EXACT_PAIRS:
        raise ValueError("exact_solve is limited to %d state-action pairs" % MAX_EXACT_PAIRS)
    gamma = m.gamma if gamma is None else gamma
    r = m.r if r is None else r
    P = m.P.toarray()
    pi = state_max(m, r)[1]
    for _ in range(max_iter):
        v = policy_value(m, pi, gamma, r)
        q = r + gamma * (P @ v)
        vals, greedy = state_max(m, q)
        # switch only on a real improvement so policy iteration cannot cycle on ties
        cur = q[m.pairs(pi)]
        tol = 1e-12 * max(1.0, np.abs(vals).max())
        new = np.where(vals > cur + tol, greedy, pi)
        if np.array_equal(new, pi):
            break
        pi = new
    # report the lowest-index optimal action
    pi = state_max(m, r + gamma * (P @ v), 1e-12 * max(1.0, np.abs(v).max()))[1]
    v = policy_value(m, pi, gamma, r)
    resid = np.abs(v - bellman_apply(m, v, gamma=gamma, r=r)[0]).max()
    if resid > 1e-10:
        raise RuntimeError("policy iteration residual %.3g above 1e-10" % resid)
    return v, pi


def sub_reward(m, gamma_prime, v, bundle=None):
    """r' = r - (gamma' - gamma) P v, using one batch query when a bundle is given."""
    if gamma_prime > m.gamma:
        raise ValueError("gamma' must not exceed gamma")
    v = np.asarray(v, dtype=float)
    pv = bundle.batch_query(v) if bundle is not None else m.P @ v
    return m.r - (gamma_prime - m.gamma) * pv


def vrvi_epochs(value_bound, eps):
    """Halving epochs needed to bring an error of value_bound below eps/2."""
    return max(1, int(math.ceil(math.log2(max(2.0 * value_bound / eps, 1.0)))))


def vrvi_inner_steps(gamma_prime):
    """Exact-anchor iterations per epoch so that gamma'^K <= 1/8."""
    return max(1, int(math.ceil(math.log(8.0) / math.log(1.0 / gamma_prime))))


def vrvi_epoch_length(n_pairs, gamma_prime, epochs, delta, n_outer=1, C=4.0):
    """Successor draws per pair and epoch, O~((1 - gamma')^-2)."""
    return fw.tilde_count((1.0 - gamma_prime) ** -2, n_outer, delta, C, extra=n_pairs * epochs)


def empirical_transitions(m, records, epochs):
    """Per-epoch empirical transition matrices built from seed records of shape (T, A_tot)."""
    records = np.asarray(records)
    T = records.shape[0]
    if T < epochs:
        raise ValueError("seed too short: %d draws per pair for %d epochs" % (T, epochs))
    block = T // epochs
    offs = np.arange(m.n_pairs) * m.n_states
    out = []
    for e in range(epochs):
        chunk = records[e * block:(e + 1) * block]
        counts = np.bincount((chunk + offs).ravel(), minlength=m.n_pairs * m.n_states)
        out.append(counts.reshape(m.n_pairs, m.n_states) / float(block))
    return out


def _vrvi(m, bundle, gamma_prime, r_prime, v_start, empirical, inner, upper):
    v = np.clip(v_start, 0.0, upper)
    for P_hat in empirical:
        anchor = v
        pa = bundle.batch_query(anchor)
        for _ in range(inner):
            q = r_prime + gamma_prime * (pa + P_hat @ (v - anchor))
            v = np.clip(state_max(m, q)[0], 0.0, upper)
    return v


def vrvi_subsolve(m, gamma_prime, v_anchor, eps, delta, seed, bundle=None, epochs=None,
                  inner=None, r_prime=None, empirical=None):
    """Variance-reduced value iteration on the sub-problem (gamma', r').

    Each epoch fixes an anchor, takes its exact P-product with one batch query and
    corrects the iterates with the empirical transitions of one block of seed records.
    Iterates are truncated into [0, max(r')/(1 - gamma')].

    Args:
        m: Dmdp with discount gamma.
        gamma_prime: sub-problem discount.
        v_anchor: value defining r' = sub_reward(m, gamma', v_anchor); also the warm start.
        eps: target, |v - v*_{gamma', r'}|_inf <= eps/2 with probability 1 - delta.
        delta: failure probability (enters only through the seed length).
        seed: ObliviousSeed with records of shape (T, A_tot).
        bundle: SimulatorBundle used for batch queries.
        epochs: number of epochs; derived from eps and the value bound when None.

    Returns:
        The value estimate.
    """
    if bundle is None:
        bundle = m.bundle()
    if r_prime is None:
        r_prime = sub_reward(m, gamma_prime, v_anchor, bundle)
    upper = r_prime.max() / (1.0 - gamma_prime)
    if epochs is None:
        epochs = vrvi_epochs(upper, eps)
    if inner is None:
        inner = vrvi_inner_steps(gamma_prime)
    if empirical is None:
        empirical = empirical_transitions(m, seed.records, epochs)
    return _vrvi(m, bundle, gamma_prime, r_prime, np.asarray(v_anchor, dtype=float),
                 empirical, inner, upper)


def certify_policy(m, bundle, gamma_prime, r_prime, v):
    """Greedy policy for v and a lowered value that provably lies below its value.

    With delta = max(v - T_pi v)^+, the vector v - delta/(1 - gamma') satisfies
    w <= T_pi w and hence w <= v_pi by monotonicity. One batch query.
    """
    vals, pi = bellman_apply(m, v, bundle, gamma_prime, r_prime)
    gap = max(float(np.max(v - vals)), 0.0)
    return v - gap / (1.0 - gamma_prime), pi


def vrvi_policy_subsolve(m, gamma_prime, v_anchor, eps, delta, seed, bundle=None,
                         epochs=None, inner=None, r_prime=None, empirical=None):
    """Policy sub-problem: 0 <= v* - v <= eps and v <= v_pi, both for (gamma', r').

    Solves to eps (1 - gamma')/2 with vrvi_subsolve, shifts down below v*, and
    certifies the greedy policy, which costs one extra batch query.
    """
    if bundle is None:
        bundle = m.bundle()
    if r_prime is None:
        r_prime = sub_reward(m, gamma_prime, v_anchor, bundle)
    acc = eps * (1.0 - gamma_prime) / 2.0
    v = vrvi_subsolve(m, gamma_prime, v_anchor, 2.0 * acc, delta, seed, bundle, epochs,
                      inner, r_prime, empirical)
    return certify_policy(m, bundle, gamma_prime, r_prime, v - acc)


def prm_counts(m, eps, gamma_prime, delta, eps_pi=None, n_outer=None, C=4.0, C_outer=1.0):
    """Outer count, sub-problem accuracy and seed sizes used by prm_solve."""
    gamma = m.gamma
    eps_pi = delta if eps_pi is None else eps_pi
    if n_outer is None:
        base = (1.0 - gamma_prime) / (1.0 - gamma)
        n_outer = fw.tilde_count(base, 1, 1.0, C_outer, extra=1.0 / (eps * (1.0 - gamma)))
    eps_sub = eps / 4.0 * (1.0 - gamma) / (1.0 - gamma_prime)
    eta_prime, tau = fw.reuse_noise(eps_sub, eps_pi)
    delta_sub = delta / (5.0 * n_outer ** 2)
    bound = 1.0 / (1.0 - gamma)
    # loop seeds are sized for the Reuse accuracy in every mode
    epochs = vrvi_epochs(bound, 2.0 * eta_prime)
    length = vrvi_epoch_length(m.n_pairs, gamma_prime, epochs, delta_sub, n_outer, C)
    final_epochs = vrvi_epochs(bound, eps_sub * (1.0 - gamma_prime))
    final_length = vrvi_epoch_length(m.n_pairs, gamma_prime, final_epochs, delta, 1, C)
    return {"n_outer": n_outer, "eps_sub": eps_sub, "eta_prime": eta_prime, "tau": tau,
            "epochs": epochs, "T": epochs * length, "final_epochs": final_epochs,
            "final_T": final_epochs * final_length, "inner": vrvi_inner_steps(gamma_prime)}


class SuccessorSeedSpec(fw.SeedSpec):
    """T successor draws for every state-action pair, charged to the simulator."""

    def __init__(self, bundle, T, dist_id="successors"):
        super().__init__(T)
        self.bundle = bundle
        self.dist_id = dist_id

    def draw(self, rng):
        records, serial = self.bundle.draw_successors(rng, self.T)
        return fw.ObliviousSeed(records, self.dist_id, serial)


def prm_solve(m, eps, gamma_prime, mode, delta=0.01, eps_pi=None, n_outer=None, C=4.0,
              C_outer=1.0, master_seed=0, inner_solver="sampled", noise_mode="continuous",
              grid_ratio=0.5):
    """Proximal reward method: solve a gamma-DMDP through gamma'-sub-problems.

    Each outer step solves the sub-problem with reward r - (gamma' - gamma) P v to
    accuracy eps'/2 and shifts the result down by eps' = eps/4 (1-gamma)/(1-gamma').
    A final policy sub-solve on a fresh seed returns the policy.

    Args:
        m: Dmdp.
        eps: target accuracy, at most 1/(1 - gamma).
        gamma_prime: sub-problem discount, 0 < gamma' < gamma.
        mode: 'Standard', 'Noisy' or 'Reuse'.
        delta: failure probability.
        eps_pi: pseudo-independence level, defaults to delta.
        inner_solver: 'sampled' or 'exact' (exact sub-problem solutions, no oracle use).

    Returns:
        (v, policy, RunRecord). The record's ledger covers the outer loop only; the
        ledger including the final policy call is in record.extra["final_ledger"].
    """
    fw.check_mode(mode)
    gamma = m.gamma
    if not 0 < gamma_prime < gamma:
        raise ValueError("need 0 < gamma' < gamma")
    if not 0 < eps <= 1.0 / (1.0 - gamma):
        raise ValueError("eps must lie in (0, 1/(1 - gamma)]")
    cnt = prm_counts(m, eps, gamma_prime, delta, eps_pi, n_outer, C, C_outer)
    eps_sub = cnt["eps_sub"]
    bundle = m.bundle()
    spec = SuccessorSeedSpec(bundle, cnt["T"])
    cache = {}

    def solve(v, seed, rng):
        r_prime = sub_reward(m, gamma_prime, v, bundle)
        if inner_solver == "exact":
            return exact_solve(m, gamma_prime, r_prime)[0]
        if seed.ident not in cache:
            cache.clear()
            cache[seed.ident] = empirical_transitions(m, seed.records, cnt["epochs"])
        return vrvi_subsolve(m, gamma_prime, v, eps_sub, delta, seed, bundle, cnt["epochs"],
                             cnt["inner"], r_prime, cache[seed.ident])

    def target(v):
        return exact_solve(m, gamma_prime, sub_reward(m, gamma_prime, v))[0]

    sub = fw.SubSolverContract(spec, solve, target=target)
    tau = cnt["tau"]
    if noise_mode == "grid":
        noise = fw.NoiseConfig("grid", tau, grid_ratio * tau)
    else:
        noise = fw.NoiseConfig("continuous", tau)
    cfg = fw.OuterConfig(mode, cnt["n_outer"], noise=noise, master_seed=master_seed)
    streams = fw.split_streams(master_seed)
    rec = fw.run_outer(np.zeros(m.n_states), sub, lambda v, vh: vh - eps_sub, cfg, bundle, streams)
    v_last = rec.iterates[-1]
    r_prime = sub_reward(m, gamma_prime, v_last, bundle)
    if inner_solver == "exact":
        v_star, _ = exact_solve(m, gamma_prime, r_prime)
        v, pi = certify_policy(m, bundle, gamma_prime, r_prime, v_star)
    else:
        final_spec = SuccessorSeedSpec(bundle, cnt["final_T"], dist_id="final")
        seed = final_spec.draw(streams.oblivious)
        rec.seeds_used.append(seed.ident)
        v, pi = vrvi_policy_subsolve(m, gamma_prime, v_last, eps_sub, delta, seed, bundle,
                                     cnt["final_epochs"], cnt["inner"], r_prime)
    rec.extra.update(cnt)
    rec.extra["final_ledger"] = bundle.snapshot()
    return v, pi, rec


def prm_error_bound(m, gamma_prime, t, v_star, v0, eta):
    """Guaranteed max(v* - v_t) after t exact PRM steps with robustness radius eta."""
    gamma = m.gamma
    rate = (gamma - gamma_prime) / (1.0 - gamma_prime)
    return rate ** t * float(np.max(v_star - v0)) + (1.0 - gamma_prime) / (1.0 - gamma) * eta


def reward_stability_check(m, r, r_low, gamma):
    """Check 0 <= v*_r - v*_{r_low} <= max(r - r_low)/(1 - gamma) with exact solves."""
    r = np.asarray(r, dtype=float)
    r_low = np.asarray(r_low, dtype=float)
    if np.any(r_low > r):
        raise ValueError("r_low must not exceed r")
    v_hi = exact_solve(m, gamma, r)[0]
    v_lo = exact_solve(m, gamma, r_low)[0]
    diff = v_hi - v_lo
    bound = float(np.max(r - r_low)) / (1.0 - gamma)
    tol = 1e-9 * max(1.0, np.abs(v_hi).max())
    return {"diff_min": float(diff.min()), "diff_max": float(diff.max()), "bound": bound,
            "holds": bool(diff.min() >= -tol and diff.max() <= bound + tol)}


def amdp_gamma(eps, t_mix_bound):
    if t_mix_bound <= 0:
        raise ValueError("mixing time bound must be positive")
    return 1.0 - eps / (9.0 * t_mix_bound)


def amdp_solve(m, eps, t_mix_bound, gamma_prime, mode, with_record=False, **kwargs):
    """eps-optimal AMDP policy from a discounted problem with gamma = 1 - eps/(9 t_mix).

    Returns the policy, or (policy, RunRecord) when with_record is set.
    """
    gamma = amdp_gamma(eps, t_mix_bound)
    if not 0 < gamma_prime <= gamma:
        raise ValueError("need 0 < gamma' <= gamma")
    md = m.with_gamma(gamma)
    gamma_prime = min(gamma_prime, gamma - 1e-12)
    eps_d = min(eps / (3.0 * (1.0 - gamma)), 1.0 / (1.0 - gamma))
    _, pi, rec = prm_solve(md, eps_d, gamma_prime, mode, **kwargs)
    return (pi, rec) if with_record else pi


def average_reward(m, policy):
    """Long-run average reward of a policy from the stationary distribution of P_pi."""
    rows = m.pairs(policy)
    P_pi = m.P[rows].toarray()
    S = m.n_states
    # pi^T (I - P) = 0 with sum(pi) = 1, solved in least squares
    M = np.vstack([(np.eye(S) - P_pi).T, np.ones(S)])
    rhs = np.zeros(S + 1)
    rhs[-1] = 1.0
    stat = np.linalg.lstsq(M, rhs, rcond=None)[0]
    return float(stat @ m.r[rows])


def runtime_profile(m, eps, delta=0.01, eps_pi=None, C=4.0, C_outer=1.0):
    """Sparsity-driven choice of gamma' and the predicted PRM oracle counts."""
    gamma = m.gamma
    gap = max(math.sqrt(m.n_pairs / max(m.nnz, 1)), 1.0 - gamma)
    gap = min(max(gap, 1.0 - gamma), 1.0 - 1e-6)
    gamma_prime = 1.0 - gap
    if gamma_prime >= gamma:
        gamma_prime = gamma - 1e-12
    cnt = prm_counts(m, eps, gamma_prime, delta, eps_pi, None, C, C_outer)
    n, A = cnt["n_outer"], m.n_pairs
    loop_batch = n * (1 + cnt["epochs"])
    final_batch = 1 + cnt["final_epochs"] + 1
    return {"gamma_prime": gamma_prime, "one_minus_gamma_prime": gap, "n_outer": n,
            "T": cnt["T"], "final_T": cnt["final_T"],
            "batch": loop_batch + final_batch,
            "sample_standard": n * cnt["T"] * A + cnt["final_T"] * A,
            "sample_reuse": cnt["T"] * A + cnt["final_T"] * A}
