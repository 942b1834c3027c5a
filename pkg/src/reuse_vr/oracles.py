"""Counting oracles: every access to problem data goes through a bundle here."""
import numpy as np


class QueryLedger(object):
    """Monotone counters of batch queries, sample queries and distinct sample keys."""

    def __init__(self):
        self.batch_count = 0
        self.sample_count = 0
        self._keys = set()
        self._fresh = 0

    @property
    def distinct_samples(self):
        return len(self._keys) + self._fresh

    def charge_batch(self, k=1):
        self.batch_count += k

    def charge_sample(self, key, cached=True):
        """Charge one sample query. Returns True if the key had not been seen.

        With cached=True a repeated key is free, otherwise every call counts.
        """
        new = key not in self._keys
        if new or not cached:
            self.sample_count += 1
        self._keys.add(key)
        return new

    def charge_draws(self, count):
        """Charge `count` oblivious draw records, each a new query.

        Draw records are unique by construction, so they are counted rather
        than stored.
        """
        self.sample_count += count
        self._fresh += count

    def merge(self, other):
        out = QueryLedger()
        out.batch_count = self.batch_count + other.batch_count
        out.sample_count = self.sample_count + other.sample_count
        out._keys = self._keys | other._keys
        out._fresh = self._fresh + other._fresh
        return out

    def to_dict(self):
        return {"batch": int(self.batch_count), "sample": int(self.sample_count),
                "distinct": int(self.distinct_samples)}


class AliasTable(object):
    """Vose alias table for O(1) draws from a fixed discrete distribution."""

    def __init__(self, probs):
        p = np.asarray(probs, dtype=float)
        if p.ndim != 1 or p.size == 0 or np.any(p < 0) or not np.isfinite(p).all():
            raise ValueError("probabilities must be a finite nonnegative vector")
        total = p.sum()
        if total <= 0:
            raise ValueError("probabilities sum to zero")
        self.probs = p / total
        n = p.size
        scaled = self.probs * n
        self.accept = np.ones(n)
        self.alias = np.arange(n)
        small = [i for i in range(n) if scaled[i] < 1.0]
        large = [i for i in range(n) if scaled[i] >= 1.0]
        while small and large:
            s = small.pop()
            g = large.pop()
            self.accept[s] = scaled[s]
            self.alias[s] = g
            scaled[g] = scaled[g] + scaled[s] - 1.0
            if scaled[g] < 1.0:
                small.append(g)
            else:
                large.append(g)
        # leftovers are 1 up to rounding
        for i in small + large:
            self.accept[i] = 1.0
            self.alias[i] = i
        # zero-probability outcomes must never be returned
        self.accept[self.probs == 0] = 0.0

    def draw(self, rng, size):
        n = self.probs.size
        col = rng.integers(n, size=size)
        coin = rng.random(size)
        return np.where(coin < self.accept[col], col, self.alias[col])


class FiniteSumBundle(object):
    """Gradient oracle for F = mean(f_i) plus a caching component oracle.

    A component returned once may be re-evaluated at any point for free.
    Indices granted by an oblivious seed draw were already charged at draw time.
    """

    def __init__(self, full_grad, component_grad, n, dim):
        self._full_grad = full_grad
        self._component_grad = component_grad
        self.n = n
        self.dim = dim
        self.ledger = QueryLedger()
        self.touched = set()
        self._granted = set()
        self._serial = 0

    def batch_query(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape != (self.dim,):
            raise ValueError("expected a vector of length %d, got shape %s" % (self.dim, x.shape))
        self.ledger.charge_batch()
        return self._full_grad(x)

    def sample_query(self, i):
        i = int(i)
        if not 0 <= i < self.n:
            raise IndexError("component %d out of range [0, %d)" % (i, self.n))
        if i not in self._granted:
            self.ledger.charge_sample(("component", i))
            self._granted.add(i)
        self.touched.add(i)
        component_grad = self._component_grad
        return lambda x: component_grad(i, x)

    def grant(self, indices):
        """Charge an oblivious draw of component indices; returns its serial."""
        self._serial += 1
        serial = self._serial
        self.ledger.charge_draws(len(indices))
        self._granted.update(int(i) for i in indices)
        return serial

    def snapshot(self):
        return self.ledger.to_dict()


class SimulatorBundle(object):
    """Matrix-vector oracle for P and a generative model for p(s, a).

    Every simulator draw counts, whether made directly or inside a seed.
    """

    def __init__(self, P, rng=None):
        self._P = P
        self.n_pairs, self.n_states = P.shape
        dense = P.toarray() if hasattr(P, "toarray") else np.asarray(P)
        self._cdf = np.cumsum(dense, axis=1)
        self._cdf[:, -1] = 1.0
        self._rng = rng if rng is not None else np.random.default_rng(0)
        self.ledger = QueryLedger()
        self._serial = 0

    def batch_query(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape != (self.n_states,):
            raise ValueError("expected a vector of length %d, got shape %s" % (self.n_states, x.shape))
        self.ledger.charge_batch()
        return np.asarray(self._P @ x).ravel()

    def sample_query(self, pair):
        pair = int(pair)
        if not 0 <= pair < self.n_pairs:
            raise IndexError("state-action pair %d out of range [0, %d)" % (pair, self.n_pairs))
        self.ledger.charge_draws(1)
        u = self._rng.random()
        return int(np.searchsorted(self._cdf[pair], u, side="right"))

    def draw_successors(self, rng, T):
        """T successor draws for every pair, shape (T, n_pairs); charges T * n_pairs."""
        self._serial += 1
        serial = self._serial
        u = rng.random((T, self.n_pairs))
        out = np.empty((T, self.n_pairs), dtype=np.int64)
        for k in range(self.n_pairs):
            out[:, k] = np.searchsorted(self._cdf[k], u[:, k], side="right")
        np.minimum(out, self.n_states - 1, out=out)
        self.ledger.charge_draws(T * self.n_pairs)
        return out, serial

    def snapshot(self):
        return self.ledger.to_dict()


class MatrixBundle(object):
    """Matrix-vector, row, column and entry oracles for a matrix A.

    Ledgers are kept per oracle kind: matvec (batch), row, col and entry.
    """

    KINDS = ("matvec", "row", "col", "entry")

    def __init__(self, A):
        self._A = np.asarray(A, dtype=float)
        self.shape = self._A.shape
        self.ledgers = {k: QueryLedger() for k in self.KINDS}
        self._granted = {k: set() for k in self.KINDS}
        self._serial = 0

    def batch_query(self, x, y):
        """Returns (A x, A^T y)."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        m, n = self.shape
        if x.shape != (n,) or y.shape != (m,):
            raise ValueError("expected x of length %d and y of length %d" % (n, m))
        self.ledgers["matvec"].charge_batch()
        return self._A @ x, self._A.T @ y

    def _check(self, i, size, what):
        if not 0 <= i < size:
            raise IndexError("%s %d out of range [0, %d)" % (what, i, size))

    def row_query(self, i, cached=True):
        i = int(i)
        self._check(i, self.shape[0], "row")
        self._charge("row", i, cached)
        return self._A[i].copy()

    def col_query(self, j, cached=True):
        j = int(j)
        self._check(j, self.shape[1], "column")
        self._charge("col", j, cached)
        return self._A[:, j].copy()

    def entry_query(self, i, j, cached=True):
        i, j = int(i), int(j)
        self._check(i, self.shape[0], "row")
        self._check(j, self.shape[1], "column")
        self._charge("entry", (i, j), cached)
        return float(self._A[i, j])

    def sample_query(self, key):
        kind, idx = key
        if kind == "row":
            return self.row_query(idx)
        if kind == "col":
            return self.col_query(idx)
        if kind == "entry":
            return self.entry_query(*idx)
        raise KeyError("unknown oracle kind %r" % (kind,))

    def _charge(self, kind, key, cached):
        if key in self._granted[kind]:
            return
        if cached:
            self.ledgers[kind].charge_sample(key)
        else:
            self.ledgers[kind].charge_draws(1)

    def grant(self, kind, keys):
        """Charge an oblivious draw of len(keys) records on one oracle kind.

        The drawn keys can then be fetched without further charge.
        """
        keys = list(keys)
        self._serial += 1
        self.ledgers[kind].charge_draws(len(keys))
        self._granted[kind].update(keys)
        return self._serial

    def snapshot(self):
        return {k: self.ledgers[k].to_dict() for k in self.KINDS}


def batch_query(bundle, *args):
    return bundle.batch_query(*args)


def sample_query(bundle, key):
    return bundle.sample_query(key)
