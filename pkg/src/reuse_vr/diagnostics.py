"""Monte Carlo checks of the probabilistic guarantees: binned TV, reuse probes, success rates."""
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import beta as beta_dist

from . import framework as fw
from . import fsm

MAX_DIM = 2
DIRECTION = ("binned TV is a lower bound on the true TV; the plug-in estimate is biased "
             "upward by sampling noise, which half_width covers")


@dataclass
class TvEstimate:
    point_estimate: float
    half_width: float
    n_samples: int
    bins: int
    box: list
    noise_floor: float
    bootstrap_half_width: float
    direction: str = DIRECTION

    def to_dict(self):
        return asdict(self)


@dataclass
class TrialReport:
    n_trials: int
    n_success: int
    criterion: str
    lcb: float
    outcomes: list = field(default_factory=list)

    def __post_init__(self):
        if not 0 <= self.n_success <= self.n_trials:
            raise ValueError("need 0 <= n_success <= n_trials")

    def to_dict(self):
        return asdict(self)


def clopper_pearson_lcb(k, n, level=0.95):
    """Exact one-sided lower confidence bound on a binomial success probability."""
    if n < 1 or not 0 <= k <= n:
        raise ValueError("need n >= 1 and 0 <= k <= n")
    if k == 0:
        return 0.0
    return float(beta_dist.ppf(1.0 - level, k, n - k + 1))


def binomial_slack(p, n):
    """Three-sigma one-sided slack for an empirical rate of a Bernoulli(p) over n draws."""
    return 3.0 * math.sqrt(p * (1.0 - p) / n)


def _as_samples(x):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2:
        raise ValueError("samples must be scalars or vectors")
    if x.shape[1] > MAX_DIM:
        raise ValueError("refusing to bin %d-dimensional samples (at most %d)" % (x.shape[1], MAX_DIM))
    if not np.isfinite(x).all():
        raise ValueError("samples must be finite")
    return x


def _bin_ids(x, box, bins):
    lo, hi = box[:, 0], box[:, 1]
    if np.any(x < lo) or np.any(x > hi):
        raise ValueError("samples fall outside the box")
    width = np.where(hi > lo, hi - lo, 1.0)
    idx = np.clip(np.floor((x - lo) / width * bins).astype(np.int64), 0, bins - 1)
    return np.ravel_multi_index(tuple(idx.T), (bins,) * x.shape[1])


def _tv(cp, cq, n_p, n_q):
    return 0.5 * np.abs(cp / n_p - cq / n_q).sum(axis=-1)


def tv_from_samples(xp, xq, bins=100, box=None, rng=None, n_boot=200, level=0.99):
    """Plug-in TV between two samples on a regular grid of bins per axis.

    The box defaults to the bounding box of the pooled samples. half_width adds a
    percentile bootstrap half-width to the level-quantile of the statistic under
    random relabelling of the pooled sample (the noise floor).
    """
    xp, xq = _as_samples(xp), _as_samples(xq)
    if xp.shape[1] != xq.shape[1]:
        raise ValueError("samples have different dimensions")
    rng = np.random.default_rng(0) if rng is None else rng
    if box is None:
        pooled = np.vstack([xp, xq])
        box = np.stack([pooled.min(axis=0), pooled.max(axis=0)], axis=1)
    box = np.asarray(box, dtype=float).reshape(xp.shape[1], 2)
    cells = bins ** xp.shape[1]
    cp = np.bincount(_bin_ids(xp, box, bins), minlength=cells).astype(float)
    cq = np.bincount(_bin_ids(xq, box, bins), minlength=cells).astype(float)
    n_p, n_q = len(xp), len(xq)
    est = float(_tv(cp, cq, n_p, n_q))
    bp = rng.multinomial(n_p, cp / n_p, size=n_boot)
    bq = rng.multinomial(n_q, cq / n_q, size=n_boot)
    lo_q, hi_q = np.quantile(_tv(bp, bq, n_p, n_q), [(1 - level) / 2, (1 + level) / 2])
    boot = float(hi_q - lo_q) / 2.0
    pooled_counts = (cp + cq).astype(np.int64)
    perm_p = rng.multivariate_hypergeometric(pooled_counts, n_p, size=n_boot)
    floor = float(np.quantile(_tv(perm_p, pooled_counts - perm_p, n_p, n_q), level))
    return TvEstimate(est, boot + floor, min(n_p, n_q), bins, box.tolist(), floor, boot)


def tv_estimate(sampler_p, sampler_q, n, bins=100, box=None, rng=None, n_boot=200, level=0.99):
    """Draw n values from each sampler(rng, n) and estimate their TV distance."""
    rng = np.random.default_rng(0) if rng is None else rng
    return tv_from_samples(sampler_p(rng, n), sampler_q(rng, n), bins, box, rng, n_boot, level)


def uniform_shift_tv(a, b, tau):
    """Exact TV between a + Unif[-tau, tau]^p and b + Unif[-tau, tau]^p."""
    d = np.abs(np.atleast_1d(a) - np.atleast_1d(b))
    if tau == 0:
        return 0.0 if np.all(d == 0) else 1.0
    return float(1.0 - np.prod(np.clip(1.0 - d / (2.0 * tau), 0.0, 1.0)))


def _noisy(points, noise, rng, scale):
    return fw.add_noise(points, noise, rng, scale)


def pseudoindependence_probe(sub, u, n_seeds, n_inner, noise, eps, delta, bins=100,
                             accuracy=None, seed_determined=False, master_seed=0, n_boot=200):
    """Per-seed TV between the noisy sub-solver and target(u) plus the same noise.

    Args:
        sub: SubSolverContract with a target (the exact sub-problem solution).
        u: input point.
        noise: NoiseConfig of the noisy sub-solver.
        eps, delta: the pseudo-independence pair under test.
        accuracy: l_inf accuracy defining compliant seeds; all seeds count when None.
        seed_determined: the solver ignores its adaptive stream, so one solve per seed
            is reused for every inner draw.

    Returns:
        JSON-ready dict; delta_hat is the fraction of seeds whose estimate exceeds
        eps + half_width, eps_hat the largest estimate over compliant seeds.
    """
    if sub.target is None:
        raise ValueError("pseudo-independence probe needs a reference target")
    streams = fw.split_streams(master_seed)
    u = np.asarray(u, dtype=float)
    f = np.atleast_1d(np.asarray(sub.target(u), dtype=float))
    if f.size > MAX_DIM:
        raise ValueError("refusing to bin %d-dimensional outputs (at most %d)" % (f.size, MAX_DIM))
    scale = sub.radius(u) if sub.radius is not None else 1.0
    tau = noise.tau * scale
    rows = []
    for _ in range(n_seeds):
        seed = sub.seed_spec.draw(streams.oblivious)
        base = np.atleast_1d(np.asarray(sub.solve(u, seed, streams.adaptive), dtype=float))
        if seed_determined:
            xp = _noisy(np.tile(base, (n_inner, 1)), noise, streams.noise, scale)
        else:
            xp = np.array([_noisy(np.atleast_1d(sub.solve(u, seed, streams.adaptive)), noise,
                                  streams.noise, scale) for _ in range(n_inner)])
        xq = _noisy(np.tile(f, (n_inner, 1)), noise, streams.noise, scale)
        est = tv_from_samples(xp, xq, bins, rng=streams.noise, n_boot=n_boot)
        err = float(np.abs(base - f).max())
        exact = None
        if seed_determined and noise.mode == "continuous":
            exact = uniform_shift_tv(base, f, tau)
        rows.append({"seed": seed.ident, "tv": est.point_estimate, "half_width": est.half_width,
                     "exact_tv": exact, "error": err,
                     "compliant": accuracy is None or err <= accuracy})
    exceed = sum(r["tv"] > eps + r["half_width"] for r in rows)
    compliant = [r for r in rows if r["compliant"]]
    delta_hat = exceed / n_seeds
    slack = binomial_slack(delta, n_seeds)
    comp_ok = all(r["tv"] <= eps + r["half_width"] for r in compliant)
    return {"eps": eps, "delta": delta, "tau": tau, "accuracy": accuracy, "bins": bins,
            "n_seeds": n_seeds, "n_inner": n_inner,
            "delta_hat": delta_hat, "delta_slack": slack,
            "eps_hat": max((r["tv"] for r in compliant), default=0.0),
            "n_compliant": len(compliant), "holds": bool(delta_hat <= delta + slack and comp_ok),
            "per_seed": rows}


def composition_probe(sub, post, u0, T, n_runs, eps, delta, noise=None, bins=100,
                      master_seed=0, n_boot=200, exact=None):
    """TV between T-fold compositions with one reused seed and with fresh seeds.

    The reused-seed side draws a new seed for every run, so it samples the mixture over
    seeds. Checks the estimate against 2T(delta + eps) + half_width.
    """
    if T < 1:
        raise ValueError("T must be at least 1")
    fixed_streams = fw.split_streams(master_seed)
    fresh_streams = fw.split_streams(fw.trial_seed(master_seed, 1))
    first = np.atleast_1d(fw.simulate_composition(u0, sub, post, T, fresh_streams, noise=noise))
    if first.size > MAX_DIM:
        raise ValueError("refusing to bin %d-dimensional outputs (at most %d)" % (first.size, MAX_DIM))
    fresh = [first]
    fresh += [fw.simulate_composition(u0, sub, post, T, fresh_streams, noise=noise)
              for _ in range(n_runs - 1)]
    fixed = []
    for _ in range(n_runs):
        s = sub.seed_spec.draw(fixed_streams.oblivious)
        fixed.append(fw.simulate_composition(u0, sub, post, T, fixed_streams, seed=s, noise=noise))
    est = tv_from_samples(np.array(fixed), np.array(fresh), bins, rng=fixed_streams.noise,
                          n_boot=n_boot)
    bound = 2.0 * T * (delta + eps)
    out = {"T": T, "n_runs": n_runs, "eps": eps, "delta": delta, "bound": bound,
           "estimate": est.to_dict(),
           "holds": bool(est.point_estimate <= bound + est.half_width)}
    if exact is not None:
        out["exact_tv"] = exact
    return out


def success_harness(runner, criterion, n_trials, master_seed=0, criterion_id="", level=0.95):
    """Run runner(trial_seed) n_trials times and bound the success rate of criterion."""
    outcomes = [bool(criterion(runner(fw.trial_seed(master_seed, k)))) for k in range(n_trials)]
    k = sum(outcomes)
    return TrialReport(n_trials, k, criterion_id, clopper_pearson_lcb(k, n_trials, level), outcomes)


class _FirstRecordMax(object):
    """Sub-solver returning max(u, first seed record) on a uniform two-point seed."""

    def __init__(self):
        self.seed_spec = fw.IndexSeedSpec(2, 1, dist_id="coin")
        self.target = None
        self.radius = None

    def solve(self, u, seed, rng):
        return np.maximum(np.asarray(u, dtype=float), float(seed.records[0]))


def discrete_toy():
    """(sub, post, u0) of a toy whose reused-vs-fresh TV after T steps is 1/2 - 2^-T."""
    return _FirstRecordMax(), (lambda u, u_half: u_half), np.zeros(1)


def toy_exact_tv(T):
    """Enumerated TV: fresh seeds give max of T fair bits, a reused seed gives one bit."""
    p_fresh = 1.0 - 0.5 ** T
    return 0.5 * (abs(p_fresh - 0.5) + abs((1.0 - p_fresh) - 0.5))


def toy_certificate():
    """(eps, delta) of the toy against the seed-averaged output, by enumeration.

    For each input u in {0, 1} and seed s, TV between the point mass at max(u, s) and
    the mixture over s; eps is the worst case and no seed is excluded.
    """
    worst = 0.0
    for u in (0, 1):
        mix = {}
        for s in (0, 1):
            mix[max(u, s)] = mix.get(max(u, s), 0.0) + 0.5
        for s in (0, 1):
            out = max(u, s)
            tv = 0.5 * (abs(1.0 - mix[out]) + sum(p for k, p in mix.items() if k != out))
            worst = max(worst, tv)
    return worst, 0.0


def scalar_ridge_probe(eta_prime=0.01, eps=0.05, delta=0.05, n=20, C=4.0, data_seed=0):
    """Noisy SVRG on a one-dimensional ridge prox problem, ready for the probe.

    The seed length is sized so that one SVRG solve is eta_prime-accurate with
    probability 1 - delta. Returns (sub, u, noise) with tau = eta_prime / (2 eps).
    """
    rng = np.random.default_rng(data_seed)
    a = rng.standard_normal((n, 1))
    b = 2.0 * a[:, 0] + 0.5 * rng.standard_normal(n)
    problem = fsm.FsmProblem(a, b, "squared")
    lam = problem.mu
    bundle = problem.bundle()
    u = np.zeros(1)
    g = problem.full_grad(u)
    # gap(u) <= |g|^2 / (2(mu + lam)) and |x - x*|^2 <= 2 gap / (mu + lam)
    c_gap = max((g @ g) / ((problem.mu + lam) ** 2 * eta_prime ** 2), 1.0)
    T = fsm.svrg_seed_length(problem, lam, c_gap, delta, 1, C)
    spec = fw.IndexSeedSpec(n, T, bundle=bundle, dist_id="uniform")

    def solve(y, seed, rng_):
        return fsm.svrg_subsolve(bundle, y, lam, seed, problem.sample_smoothness)

    def target(y):
        return problem.sub_minimizer(y, lam)

    sub = fw.SubSolverContract(spec, solve, target=target)
    return sub, u, fw.NoiseConfig("continuous", eta_prime / (2.0 * eps))
