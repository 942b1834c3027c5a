"""Top eigenvector of A^T A by shift-and-invert power iterations with APP/SVRG linear solves."""
import math

import numpy as np

from . import fsm
from .oracles import FiniteSumBundle


class ShiftedSum(object):
    """F(x) = 1/2 x^T (lambda' I - A^T A) x - b^T x as the mean of n components

        f_i(x) = 1/2 x^T (w_i I - n a_i a_i^T) x - b^T x,  w_i = n lambda' |a_i|^2 / |A|_F^2.

    The components need not be convex, but F is (lambda' - lambda_1)-strongly convex.
    Exposes the interface fsm.app_solve expects from a finite sum.
    """

    def __init__(self, A, lambda_prime, b, mu=None):
        self.A = np.asarray(A, dtype=float)
        self.n, self.dim = self.A.shape
        self.row_sq = np.einsum("ij,ij->i", self.A, self.A)
        self.fro_sq = float(self.row_sq.sum())
        if self.fro_sq == 0:
            raise ValueError("A must be nonzero")
        self.lambda_prime = float(lambda_prime)
        self.b = np.asarray(b, dtype=float)
        if self.b.shape != (self.dim,):
            raise ValueError("b must have length %d" % self.dim)
        self.weights = self.n * self.lambda_prime * self.row_sq / self.fro_sq
        # rows are sampled proportionally to their squared norms
        self.sample_probs = self.row_sq / self.fro_sq
        self.sample_smoothness = self.fro_sq + self.lambda_prime
        self.L = np.full(self.n, self.sample_smoothness)
        if mu is None:
            mu = self.lambda_prime - np.linalg.eigvalsh(self.A.T @ self.A)[-1]
        if not mu > 0:
            raise ValueError("lambda' must exceed the top eigenvalue")
        self.mu = float(mu)

    def objective(self, x):
        Ax = self.A @ x
        return 0.5 * (self.lambda_prime * (x @ x) - Ax @ Ax) - self.b @ x

    def full_grad(self, x):
        return self.lambda_prime * x - self.A.T @ (self.A @ x) - self.b

    def component_grad(self, i, x):
        a = self.A[i]
        return self.weights[i] * x - self.n * a * (a @ x) - self.b

    def sub_minimizer(self, y, lam):
        M = (self.lambda_prime + lam) * np.eye(self.dim) - self.A.T @ self.A
        return np.linalg.solve(M, self.b + lam * np.asarray(y, dtype=float))

    def minimizer(self):
        return self.sub_minimizer(np.zeros(self.dim), 0.0)

    def bundle(self):
        return FiniteSumBundle(self.full_grad, self.component_grad, self.n, self.dim)


def build_shifted_sum(A, lambda_prime, b, mu=None):
    return ShiftedSum(A, lambda_prime, b, mu)


def svrg_topev_subsolve(spec, bundle, u, rho, seed, n_chains=1):
    """SVRG on min F(x) + rho/2 |x - y_u|^2 with rows drawn proportionally to |a_i|^2."""
    return fsm.svrg_hp_subsolve(bundle, spec, u, rho, seed, n_chains)


def power_estimate(A, rng, iters=30):
    """Rayleigh quotient after plain power iterations; a lower bound on lambda_1."""
    x = rng.standard_normal(A.shape[1])
    x /= np.linalg.norm(x)
    for _ in range(iters):
        x = A.T @ (A @ x)
        x /= np.linalg.norm(x)
    Ax = A @ x
    return float(Ax @ Ax)


def shift_estimate(A, gap_hint, rng, iters=30):
    """(lambda', lambda_1 estimate) with lambda' = (1 + gap_hint/2) lambda_1 estimate."""
    if not gap_hint > 0:
        raise ValueError("gap hint must be positive")
    lam1 = power_estimate(A, rng, iters)
    return (1.0 + gap_hint / 2.0) * lam1, lam1


def iteration_cap(dim, eps, C=1.0):
    return max(1, int(math.ceil(C * math.log(dim / eps))))


def shift_invert_solve(A, eps, mode, gap_hint=0.3, lambda_prime=None, alpha=None, c=10.0,
                       delta=1e-3, C=4.0, C_iter=1.0, master_seed=0, n_chains=1):
    """Approximate shift-and-invert power method.

    Each iteration solves (lambda' I - A^T A) x = x_k with the APP outer loop over SVRG
    sub-solves, warm started at x_k/(lambda' - x_k^T A^T A x_k), and normalizes.

    Args:
        A: (n, d) matrix.
        eps: target, x^T A^T A x >= (1 - eps) lambda_1.
        mode: 'Standard', 'Noisy' or 'Reuse' for the linear solves.
        gap_hint: relative eigengap guess used for the shift.
        lambda_prime: shift, estimated from gap_hint when None.
        alpha: prox weight in units of the lambda_1 estimate, rho = alpha lambda_1;
            defaults to 4 (lambda' - lambda_1).

    Returns:
        dict with keys x, rayleigh, eps, iterations, ledger, shift, solves.
    """
    A = np.asarray(A, dtype=float)
    d = A.shape[1]
    seq = np.random.SeedSequence(int(master_seed) % 2 ** 64, spawn_key=(7,))
    rng = np.random.default_rng(seq)
    shift, lam1_est = shift_estimate(A, gap_hint, rng)
    if lambda_prime is None:
        lambda_prime = shift
    mu = lambda_prime - lam1_est
    if not mu > 0:
        raise ValueError("shift must exceed the top eigenvalue estimate")
    rho = 4.0 * mu if alpha is None else alpha * lam1_est
    rho = max(rho, mu)
    x = rng.standard_normal(d)
    x /= np.linalg.norm(x)
    iters = iteration_cap(d, eps, C_iter)
    totals = {"batch": 0, "sample": 0, "distinct": 0}
    solves = []
    for k in range(iters):
        spec = ShiftedSum(A, lambda_prime, x, mu=mu)
        Ax = A @ x
        x0 = x / max(lambda_prime - Ax @ Ax, mu)
        sol, rec = fsm.app_solve(spec, x0, c, rho, mode, delta=delta, C=C,
                                 master_seed=(int(master_seed) * 1000003 + k) % 2 ** 63,
                                 n_chains=n_chains)
        for key in totals:
            totals[key] += rec.ledger[key]
        solves.append({"n_outer": rec.config.n_outer, "ledger": rec.ledger})
        norm = np.linalg.norm(sol)
        if not norm > 0 or not np.isfinite(norm):
            raise RuntimeError("linear solve returned a degenerate iterate")
        x = sol / norm
    Ax = A @ x
    return {"x": x, "rayleigh": float(Ax @ Ax), "eps": eps, "iterations": iters,
            "ledger": totals, "shift": lambda_prime, "solves": solves}


def planted_instance(n, d, gap, rng, top=1.0):
    """n x d matrix whose A^T A has top eigenvalue `top` and relative gap `gap`."""
    if n < d:
        raise ValueError("need n >= d")
    U, _ = np.linalg.qr(rng.standard_normal((n, d)))
    V, _ = np.linalg.qr(rng.standard_normal((d, d)))
    second = top * (1.0 - gap)
    rest = rng.uniform(0.0, second, size=d - 2)
    spectrum = np.concatenate([[top, second], np.sort(rest)[::-1]])
    return (U * np.sqrt(spectrum)) @ V.T
