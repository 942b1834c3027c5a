"""Outer-solver / sub-solver meta-algorithm with Standard, Noisy and Reuse loops."""
import math
import time
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

STANDARD = "Standard"
NOISY = "Noisy"
REUSE = "Reuse"
LOOP_TYPES = (STANDARD, NOISY, REUSE)

# labels for the independent streams split off a master seed
_STREAM_LABELS = {"oblivious": 0, "adaptive": 1, "noise": 2, "trial": 3}


@dataclass(frozen=True)
class Streams:
    oblivious: np.random.Generator
    adaptive: np.random.Generator
    noise: np.random.Generator


def _generator(master_seed, *path):
    seq = np.random.SeedSequence(int(master_seed) % 2**64, spawn_key=tuple(path))
    return np.random.Generator(np.random.Philox(seq))


def split_streams(master_seed):
    """Independent, replayable oblivious / adaptive / noise streams."""
    return Streams(*(_generator(master_seed, _STREAM_LABELS[k])
                     for k in ("oblivious", "adaptive", "noise")))


def trial_seed(master_seed, k):
    """64-bit seed for the k-th trial derived from a master seed."""
    seq = np.random.SeedSequence(int(master_seed) % 2**64, spawn_key=(_STREAM_LABELS["trial"], int(k)))
    return int(seq.generate_state(1, np.uint64)[0])


def check_mode(mode):
    if mode not in LOOP_TYPES:
        raise ValueError("loop type must be one of %s, got %r" % (LOOP_TYPES, mode))
    return mode


def tilde_count(base, n_outer=1, delta=0.5, C=4.0, extra=1.0):
    """Explicit stand-in for a sufficiently large O~(base) count.

    Returns ceil(C * base * log(base * n_outer * extra / delta)), at least 1.
    `extra` carries any accuracy ratio hidden in the logarithm.
    """
    if base <= 0 or delta <= 0:
        raise ValueError("base and delta must be positive")
    arg = max(base * n_outer * extra / delta, math.e)
    return max(1, int(math.ceil(C * base * math.log(arg))))


def reuse_noise(eta, eps, delta=None):
    """Sub-solver accuracy and noise half-width that make a solver pseudo-independent.

    eta is the robustness radius of the outer-solver. Returns (eta_prime, tau) with
    eta_prime = min(eta/2, eta*eps) and tau = eta_prime/(2*eps). The failure
    probability delta plays no role in the formulas; it is accepted for symmetry.
    """
    if eta <= 0 or eps <= 0:
        raise ValueError("eta and eps must be positive")
    eta_prime = min(eta / 2.0, eta * eps)
    return eta_prime, eta_prime / (2.0 * eps)


@dataclass
class NoiseConfig:
    mode: str = "continuous"
    tau: float = 0.0
    beta: Optional[float] = None

    def __post_init__(self):
        if self.mode not in ("continuous", "grid"):
            raise ValueError("noise mode must be 'continuous' or 'grid'")
        if not self.tau >= 0:
            raise ValueError("tau must be nonnegative")
        if self.mode == "grid":
            if self.beta is None or not self.beta > 0:
                raise ValueError("grid mode needs beta > 0")
            if self.beta > self.tau:
                raise ValueError("grid mode needs beta <= tau")


@dataclass
class OuterConfig:
    loop_type: str
    n_outer: int
    weights: Optional[np.ndarray] = None
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    master_seed: int = 0
    allow_zero_noise: bool = False

    def __post_init__(self):
        check_mode(self.loop_type)
        if int(self.n_outer) != self.n_outer or self.n_outer < 1:
            raise ValueError("n_outer must be a positive integer")
        self.n_outer = int(self.n_outer)
        if self.weights is None:
            w = np.zeros(self.n_outer)
            w[-1] = 1.0
        else:
            w = np.asarray(self.weights, dtype=float)
        if w.shape != (self.n_outer,) or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be nonnegative, of length n_outer, and sum to 1")
        self.weights = w


@dataclass
class ObliviousSeed:
    records: np.ndarray
    dist_id: str
    serial: int = 0

    @property
    def ident(self):
        return "%s#%d" % (self.dist_id, self.serial)


class SeedSpec(object):
    """A distribution over oblivious seeds with T records per draw.

    Subclasses implement _records(rng). Draws are charged to the oracle at draw time
    through _charge, which returns a serial number for the draw.
    """

    dist_id = "seed"

    def __init__(self, T):
        if int(T) < 1:
            raise ValueError("T must be positive")
        self.T = int(T)
        self._count = 0

    def _records(self, rng):
        raise NotImplementedError

    def _charge(self, records):
        self._count += 1
        return self._count

    def draw(self, rng):
        records = self._records(rng)
        return ObliviousSeed(records, self.dist_id, self._charge(records))


class IndexSeedSpec(SeedSpec):
    """T i.i.d. indices from a fixed discrete distribution (uniform if probs is None)."""

    def __init__(self, n, T, probs=None, bundle=None, dist_id="index"):
        super().__init__(T)
        self.n = int(n)
        self.dist_id = dist_id
        self.bundle = bundle
        self.table = None
        if probs is not None:
            from .oracles import AliasTable
            self.table = AliasTable(probs)

    def _records(self, rng):
        if self.table is None:
            return rng.integers(self.n, size=self.T)
        return self.table.draw(rng, self.T)

    def _charge(self, records):
        if self.bundle is None:
            return super()._charge(records)
        return self.bundle.grant(records)


@dataclass
class SubSolverContract:
    """A sub-solver: seed distribution, solving routine and (optional) reference target.

    solve(u, seed, rng) returns u_half; rng is the adaptive stream.
    radius(u), if given, scales the noise half-width at input u.
    target(u), if given, is the exact sub-problem solution used by diagnostics.
    """
    seed_spec: SeedSpec
    solve: Callable
    target: Optional[Callable] = None
    radius: Optional[Callable] = None


@dataclass
class RunRecord:
    config: OuterConfig
    iterates: list
    output: np.ndarray
    ledger: Optional[dict]
    seeds_used: list
    wall_time: float
    noise_draws: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)


def add_noise(v, cfg, rng, scale=1.0):
    """Perturb v by uniform noise of half-width cfg.tau * scale.

    Grid mode first rounds each coordinate down onto the beta-grid, then moves it to a
    uniformly random grid point within the half-width.
    """
    v = np.asarray(v, dtype=float)
    if not np.isfinite(v).all():
        raise ValueError("cannot add noise to a non-finite vector")
    tau = cfg.tau * scale
    if cfg.mode == "continuous":
        if tau == 0:
            return v.copy()
        return v + rng.uniform(-tau, tau, size=v.shape)
    beta = cfg.beta * scale
    base = np.floor(v / beta)
    # tolerance guards tau/beta landing just below an integer
    reach = int(math.floor(tau / beta + 1e-9))
    offset = rng.integers(-reach, reach + 1, size=v.shape)
    return (base + offset) * beta


def _combine(weights, iterates):
    out = np.zeros_like(iterates[0], dtype=float)
    for w, u in zip(weights, iterates):
        if w:
            out = out + w * u
    return out


def run_outer(u0, sub, post, cfg, bundle=None, streams=None):
    """Run the meta-algorithm: u_{t-1/2} = A(u_{t-1}; s_t), u_t = post(u_{t-1}, u_{t-1/2}).

    Standard draws a fresh seed per iteration and adds no noise. Noisy draws fresh
    seeds and perturbs every u_{t-1/2}. Reuse draws one seed and perturbs. Returns a
    RunRecord whose output is sum_t w(t) u_t.
    """
    if cfg.loop_type != STANDARD and cfg.noise.tau == 0 and not cfg.allow_zero_noise:
        raise ValueError("%s loop with zero noise voids the reuse guarantee; "
                         "set allow_zero_noise to run it anyway" % cfg.loop_type)
    if streams is None:
        streams = split_streams(cfg.master_seed)
    start = time.perf_counter()
    u = np.array(u0, dtype=float)
    iterates, seeds_used, noise_draws = [], [], []
    fixed = sub.seed_spec.draw(streams.oblivious) if cfg.loop_type == REUSE else None
    if fixed is not None:
        seeds_used.append(fixed.ident)
    for _ in range(cfg.n_outer):
        if fixed is None:
            seed = sub.seed_spec.draw(streams.oblivious)
            seeds_used.append(seed.ident)
        else:
            seed = fixed
        u_half = np.asarray(sub.solve(u, seed, streams.adaptive), dtype=float)
        if cfg.loop_type != STANDARD:
            scale = sub.radius(u) if sub.radius is not None else 1.0
            noisy = add_noise(u_half, cfg.noise, streams.noise, scale)
            noise_draws.append(noisy - u_half)
            u_half = noisy
        u = np.asarray(post(u, u_half), dtype=float)
        iterates.append(u)
    output = _combine(cfg.weights, iterates)
    ledger = bundle.snapshot() if bundle is not None else None
    return RunRecord(cfg, iterates, output, ledger, seeds_used,
                     time.perf_counter() - start, noise_draws)


def simulate_composition(u0, sub, post, T, streams, seed=None, noise=None):
    """One sample of the T-fold composition of post and the (noisy) sub-solver.

    With seed=None every step draws a fresh oblivious seed; otherwise the given seed
    is used at every step. Adaptive and noise randomness is fresh at every step.
    """
    if T < 1:
        raise ValueError("T must be at least 1")
    u = np.array(u0, dtype=float)
    for _ in range(T):
        s = sub.seed_spec.draw(streams.oblivious) if seed is None else seed
        u_half = np.asarray(sub.solve(u, s, streams.adaptive), dtype=float)
        if noise is not None:
            scale = sub.radius(u) if sub.radius is not None else 1.0
            u_half = add_noise(u_half, noise, streams.noise, scale)
        u = np.asarray(post(u, u_half), dtype=float)
    return u


def warn_if_vacuous(n_outer, delta):
    """Warn when the reuse success bound 1 - 5 n_outer^2 delta is vacuous."""
    bound = 1.0 - 5.0 * n_outer ** 2 * delta
    if bound <= 0:
        warnings.warn("reuse success bound 1 - 5 n_outer^2 delta = %.3g is vacuous" % bound)
    return max(bound, 0.0)
