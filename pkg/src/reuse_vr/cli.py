"""reuse-vr: run instantiations over a knob grid and write query-count tables."""
import argparse
import csv
import io
import json
import math
import os
import sys
import time

import numpy as np

from . import diagnostics as dg
from . import framework as fw
from . import fsm, games, mdp, topev

HEADER = ["knob", "mode", "batch", "sample", "distinct", "success_lcb", "mean_err", "secs"]
KINDS = ("fsm", "dmdp", "amdp", "game22", "game21", "topev")
ROW_TOL = 1e-9


class ProblemError(ValueError):
    """Input file violations, one message per problem found."""

    def __init__(self, path, errors):
        self.path = path
        self.errors = list(errors)
        super().__init__("%s:\n  %s" % (path, "\n  ".join(self.errors)))


def _read_json(path, errors):
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        errors.append("line %d: invalid JSON (%s)" % (exc.lineno, exc.msg))
    except OSError as exc:
        errors.append("cannot read file (%s)" % exc.strerror)
    return None


def _read_csv_matrix(path, errors, label="matrix"):
    """Dense numeric CSV; every bad line is reported."""
    rows = []
    try:
        with open(path, newline="") as fh:
            for lineno, fields in enumerate(csv.reader(fh), 1):
                if not fields or all(not f.strip() for f in fields):
                    continue
                try:
                    vals = [float(f) for f in fields]
                except ValueError:
                    errors.append("%s line %d: non-numeric field" % (label, lineno))
                    continue
                if not all(math.isfinite(v) for v in vals):
                    errors.append("%s line %d: non-finite value" % (label, lineno))
                    continue
                if rows and len(vals) != len(rows[0][1]):
                    errors.append("%s line %d: expected %d fields, got %d"
                                  % (label, lineno, len(rows[0][1]), len(vals)))
                    continue
                rows.append((lineno, vals))
    except OSError as exc:
        errors.append("cannot read %s (%s)" % (label, exc.strerror))
        return None
    if not rows:
        errors.append("%s is empty" % label)
        return None
    return np.array([v for _, v in rows], dtype=float)


def _rel(base, name):
    return name if os.path.isabs(name) else os.path.join(os.path.dirname(os.path.abspath(base)), name)


def _load_fsm(path, errors):
    meta = _read_json(path, errors)
    if meta is None:
        return None
    for key in ("matrix", "labels"):
        if key not in meta:
            errors.append("metadata is missing %r" % key)
    if errors:
        return None
    A = _read_csv_matrix(_rel(path, meta["matrix"]), errors, "matrix")
    b = _read_csv_matrix(_rel(path, meta["labels"]), errors, "labels")
    if A is None or b is None:
        return None
    if b.shape[1] != 1 or b.shape[0] != A.shape[0]:
        errors.append("labels must be one value per matrix row (%d rows)" % A.shape[0])
        return None
    link = meta.get("link", "squared")
    b = b[:, 0]
    if link == "logistic" and not np.all(np.abs(b) == 1):
        errors.append("logistic labels must be +1 or -1")
    try:
        problem = fsm.FsmProblem(A, b, link, meta.get("ridge", 0.0), meta.get("mu_hint"))
    except ValueError as exc:
        errors.append(str(exc))
        return None
    if errors:
        return None
    return {"problem": problem, "lambda": meta.get("lambda"), "n": A.shape[0], "d": A.shape[1]}


def _load_mdp(path, errors, top_level=True):
    data = _read_json(path, errors)
    if data is None:
        return None
    for key in ("states", "actions", "transitions", "rewards", "gamma"):
        if key not in data:
            errors.append("missing key %r" % key)
    if errors:
        return None
    S = data["states"]
    actions = data["actions"]
    if not isinstance(S, int) or S < 1 or len(actions) != S:
        errors.append("'actions' must list the actions of each of the %r states" % S)
        return None
    counts = [len(a) for a in actions]
    for s, c in enumerate(counts):
        if c < 1:
            errors.append("state %d has no actions" % s)
    if errors:
        return None
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    n_pairs = int(sum(counts))
    P = np.zeros((n_pairs, S))
    seen = np.zeros(n_pairs, dtype=bool)
    for k, tr in enumerate(data["transitions"]):
        s, a = tr.get("s"), tr.get("a")
        where = "transitions[%d] (s=%r, a=%r)" % (k, s, a)
        if not isinstance(s, int) or not 0 <= s < S or not isinstance(a, int) or not 0 <= a < counts[s]:
            errors.append("%s: no such state-action pair" % where)
            continue
        row = starts[s] + a
        if seen[row]:
            errors.append("%s: duplicate row" % where)
            continue
        seen[row] = True
        for nxt, p in tr.get("probs", []):
            if not isinstance(nxt, int) or not 0 <= nxt < S:
                errors.append("%s: successor %r out of range" % (where, nxt))
            elif not (math.isfinite(p) and p >= 0):
                errors.append("%s: probability %r is not a nonnegative number" % (where, p))
            else:
                P[row, nxt] += p
        total = P[row].sum()
        if abs(total - 1.0) > ROW_TOL:
            errors.append("%s: row sums to %.12g" % (where, total))
    for row in np.flatnonzero(~seen):
        s = int(np.searchsorted(starts, row, side="right") - 1)
        errors.append("row (s=%d, a=%d): no transitions given" % (s, row - starts[s]))
    r = data["rewards"]
    if r and isinstance(r[0], list):
        r = [x for per_state in r for x in per_state]
    if len(r) != n_pairs:
        errors.append("rewards: expected %d values, got %d" % (n_pairs, len(r)))
    else:
        for k, x in enumerate(r):
            s = int(np.searchsorted(starts, k, side="right") - 1)
            where = "rewards (s=%d, a=%d)" % (s, k - starts[s])
            if not (isinstance(x, (int, float)) and math.isfinite(x) and x >= 0):
                errors.append("%s: %r is not a finite nonnegative number" % (where, x))
            elif top_level and x > 1:
                errors.append("%s: %r exceeds 1" % (where, x))
    g = data["gamma"]
    if not (isinstance(g, (int, float)) and 0 < g < 1):
        errors.append("gamma must lie in (0, 1), got %r" % (g,))
    if errors:
        return None
    # rows are within ROW_TOL of stochastic; normalize away the rounding
    P = P / P.sum(axis=1, keepdims=True)
    m = mdp.Dmdp(P, r, g, actions, top_level)
    return {"mdp": m, "t_mix": data.get("t_mix"), "states": S, "pairs": n_pairs}


def _parse_term(spec, size, where, errors):
    if spec is None:
        return games.Term()
    kind = spec.get("kind", "zero")
    coef = spec.get("coef", 0.0)
    if kind == "linear" and (not isinstance(coef, list) or len(coef) != size):
        errors.append("%s: linear coefficients must have length %d" % (where, size))
        return None
    try:
        return games.Term(kind, coef)
    except ValueError as exc:
        errors.append("%s: %s" % (where, exc))
        return None


def _load_game(path, errors, domain=None):
    cfg = _read_json(path, errors)
    if cfg is None:
        return None
    if "matrix" not in cfg:
        errors.append("game config is missing 'matrix'")
        return None
    A = _read_csv_matrix(_rel(path, cfg["matrix"]), errors)
    if A is None:
        return None
    dom = cfg.get("domain", domain)
    if domain is not None and dom != domain:
        errors.append("domain %r does not match the command (%s)" % (dom, domain))
    if dom not in games.DOMAINS:
        errors.append("domain must be one of %s" % (games.DOMAINS,))
        return None
    m, n = A.shape
    phi = _parse_term(cfg.get("phi"), n, "phi", errors)
    psi = _parse_term(cfg.get("psi"), m, "psi", errors)
    if errors:
        return None
    game = games.CompositeGame(A, phi, psi)
    setup = games.GameSetup(dom, n, m)
    try:
        setup.check(game)
    except ValueError as exc:
        errors.append(str(exc))
        return None
    return {"game": game, "setup": setup, "alpha": cfg.get("alpha"), "eps": cfg.get("eps"),
            "m": m, "n": n}


def _load_matrix(path, errors):
    A = _read_csv_matrix(path, errors)
    if A is None:
        return None
    if A.shape[0] < A.shape[1]:
        errors.append("need at least as many rows as columns, got %dx%d" % A.shape)
    if not np.any(A):
        errors.append("matrix is zero")
    return None if errors else {"A": A, "n": A.shape[0], "d": A.shape[1]}


_LOADERS = {"fsm": _load_fsm, "mdp": _load_mdp, "game": _load_game, "matrix": _load_matrix}


def validate_problem(path, kind):
    """Check an input file without modifying it; returns a report dict."""
    errors = []
    if kind not in _LOADERS:
        raise ValueError("kind must be one of %s" % (tuple(_LOADERS),))
    loaded = _LOADERS[kind](path, errors)
    info = {}
    if loaded is not None:
        info = {k: v for k, v in loaded.items() if isinstance(v, (int, float, str)) or v is None}
    return {"path": path, "kind": kind, "ok": not errors, "errors": errors, "info": info}


def _load(path, kind, **kw):
    errors = []
    loaded = _LOADERS[kind](path, errors, **kw)
    if errors:
        raise ProblemError(path, errors)
    return loaded


def _parse_knob(token, mu=None):
    token = token.strip()
    if token == "auto":
        return None
    if token.endswith("mu"):
        if mu is None:
            raise ValueError("knob %r is in units of mu, which this problem lacks" % token)
        head = token[:-2]
        return (float(head) if head else 1.0) * mu
    return float(token)


def _ledger_row(d):
    return {k: int(d[k]) for k in ("batch", "sample", "distinct")}


def _game_ledger(snap):
    out = {"batch": snap["matvec"]["batch"], "sample": 0, "distinct": 0}
    for kind in ("row", "col", "entry"):
        out["sample"] += snap[kind]["sample"]
        out["distinct"] += snap[kind]["distinct"]
    return out


def _fmt(x):
    return "" if x is None else repr(float(x))


class Experiment(object):
    """One problem, a knob grid and a list of modes; produces one row per cell."""

    def __init__(self, kind, args):
        self.kind = kind
        self.args = args
        if kind == "fsm":
            self.data = _load(args.problem, "fsm")
            self.mu = self.data["problem"].mu
            p = self.data["problem"]
            self.f_star = p.objective(p.minimizer())
        elif kind in ("dmdp", "amdp"):
            self.data = _load(args.problem, "mdp")
            self.mu = None
            m = self.data["mdp"]
            if kind == "dmdp":
                self.v_star = mdp.exact_solve(m)[0]
            else:
                self.t_mix = args.t_mix if args.t_mix is not None else self.data["t_mix"]
                if self.t_mix is None:
                    raise ValueError("amdp needs --t-mix or a 't_mix' entry in the problem file")
                # a discount this close to 1 picks an average-optimal policy on small instances
                pi = mdp.exact_solve(m.with_gamma(1.0 - 1e-7))[1]
                self.rho_star = mdp.average_reward(m, pi)
        elif kind in ("game22", "game21"):
            dom = games.BALL_BALL if kind == "game22" else games.BALL_SIMPLEX
            self.data = _load(args.problem, "game", domain=dom)
            self.mu = None
        else:
            self.data = _load(args.problem, "matrix")
            self.mu = None
            self.lam1 = float(np.linalg.eigvalsh(self.data["A"].T @ self.data["A"])[-1])

    def eps(self):
        if self.args.eps is not None:
            return self.args.eps
        if self.kind in ("game22", "game21") and self.data["eps"] is not None:
            return float(self.data["eps"])
        return 0.05

    def knobs(self):
        grid = self.args.knob_grid
        if grid is None:
            if self.kind == "fsm" and self.data["lambda"] is not None:
                grid = repr(float(self.data["lambda"]))
            elif self.kind == "fsm":
                grid = "1mu"
            elif self.kind in ("game22", "game21", "topev"):
                grid = "auto"
            else:
                raise ValueError("%s needs --knob-grid (gamma' values)" % self.kind)
        values = [_parse_knob(t, self.mu) for t in grid.split(",")]
        for v in values:
            self.check_knob(v)
        return values

    def check_knob(self, v):
        if self.kind == "fsm":
            if not v >= self.mu * (1 - 1e-12):
                raise ValueError("lambda = %r is below mu = %r" % (v, self.mu))
        elif self.kind == "dmdp":
            if v is None or not 0 < v < self.data["mdp"].gamma:
                raise ValueError("gamma' = %r must lie in (0, gamma = %r)" % (v, self.data["mdp"].gamma))
        elif self.kind == "amdp":
            g = mdp.amdp_gamma(self.eps(), self.t_mix)
            if v is None or not 0 < v <= g:
                raise ValueError("gamma' = %r must lie in (0, %r]" % (v, g))
        elif v is not None and not v > 0:
            raise ValueError("alpha = %r must be positive" % v)

    def trial(self, knob, mode, seed):
        """Returns (ledger dict, error, success, extra)."""
        a = self.args
        eps, delta = self.eps(), a.delta
        if self.kind == "fsm":
            p = self.data["problem"]
            x0 = np.zeros(p.dim)
            x, rec = fsm.app_solve(p, x0, a.c, knob, mode, delta=delta, master_seed=seed)
            err = (p.objective(x) - self.f_star) / (p.objective(x0) - self.f_star)
            return _ledger_row(rec.ledger), err, err <= 1.0 / a.c, {"n_outer": rec.config.n_outer}
        if self.kind == "dmdp":
            m = self.data["mdp"]
            _, pi, rec = mdp.prm_solve(m, eps, knob, mode, delta=delta, master_seed=seed)
            err = float(np.max(self.v_star - mdp.policy_value(m, pi)))
            ok = bool(np.min(self.v_star - mdp.policy_value(m, pi)) >= -1e-9 and err <= eps)
            return (_ledger_row(rec.extra["final_ledger"]), err, ok,
                    {"n_outer": rec.config.n_outer, "loop_ledger": _ledger_row(rec.ledger)})
        if self.kind == "amdp":
            m = self.data["mdp"]
            pi, rec = mdp.amdp_solve(m, eps, self.t_mix, knob, mode, with_record=True,
                                     delta=delta, master_seed=seed)
            err = self.rho_star - mdp.average_reward(m, pi)
            return (_ledger_row(rec.extra["final_ledger"]), err, err <= eps,
                    {"n_outer": rec.config.n_outer})
        if self.kind in ("game22", "game21"):
            g, s = self.data["game"], self.data["setup"]
            alpha = knob if knob is not None else self.data["alpha"]
            z, rec = games.cpp_solve(g, s, eps, mode, alpha=alpha, delta=delta, master_seed=seed)
            err = games.duality_gap(g, s, z)
            return (_game_ledger(rec.ledger), err, err <= eps,
                    {"n_outer": rec.config.n_outer, "alpha": rec.extra["alpha"],
                     "by_kind": rec.ledger})
        out = topev.shift_invert_solve(self.data["A"], eps, mode, alpha=knob, master_seed=seed)
        err = 1.0 - out["rayleigh"] / self.lam1
        return _ledger_row(out["ledger"]), err, err <= eps, {"iterations": out["iterations"]}

    def cell(self, knob, mode):
        a = self.args
        trials = []
        start = time.perf_counter()

        def runner(seed):
            ledger, err, ok, extra = self.trial(knob, mode, seed)
            trials.append({"seed": seed, "ledger": ledger, "err": float(err),
                           "success": bool(ok), "extra": extra})
            return ok

        report = dg.success_harness(runner, bool, a.trials, a.seed, self.kind)
        secs = time.perf_counter() - start
        mean = {k: sum(t["ledger"][k] for t in trials) / len(trials) for k in ("batch", "sample", "distinct")}
        row = {"knob": _fmt(knob) if knob is not None else "auto", "mode": mode,
               "batch": _count(mean["batch"]), "sample": _count(mean["sample"]),
               "distinct": _count(mean["distinct"]), "success_lcb": _fmt(report.lcb),
               "mean_err": _fmt(np.mean([t["err"] for t in trials])),
               "secs": "%.3f" % secs if a.timing else ""}
        return row, {"knob": knob, "mode": mode, "n_success": report.n_success,
                     "lcb": report.lcb, "trials": trials}


def _count(x):
    """Per-trial mean ledger count; integral when every trial agrees."""
    return str(int(x)) if float(x).is_integer() else repr(float(x))


def _monotone(rows, kind):
    """Whether batch rises and sample falls toward the batch-heavy end of the knob."""
    out = {}
    for mode in sorted({r["mode"] for r in rows}):
        sel = [r for r in rows if r["mode"] == mode and r["knob"] != "auto"]
        # batch-heavy end: large lambda, large alpha, small gamma'
        sel.sort(key=lambda r: float(r["knob"]), reverse=kind in ("dmdp", "amdp"))
        b = [float(r["batch"]) for r in sel]
        s = [float(r["sample"]) for r in sel]
        out[mode] = bool(all(x <= y for x, y in zip(b, b[1:])) and all(x >= y for x, y in zip(s, s[1:])))
    return out


def run_experiment(kind, args):
    """Run every knob x mode cell in order; returns (csv text, sidecar dict, all_ok)."""
    exp = Experiment(kind, args)
    knobs = exp.knobs()
    modes = [fw.check_mode(m.strip()) for m in args.mode.split(",")]
    rows, cells, ok = [], [], True
    for knob in knobs:
        for mode in modes:
            try:
                row, cell = exp.cell(knob, mode)
            except Exception as exc:
                ok = False
                row = {k: "" for k in HEADER}
                row.update(knob=_fmt(knob) if knob is not None else "auto", mode=mode)
                cell = {"knob": knob, "mode": mode, "error": "%s: %s" % (type(exc).__name__, exc)}
            rows.append(row)
            cells.append(cell)
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=HEADER, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    config = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    side = {"command": kind, "config": config, "cells": cells}
    if args.command == "sweep":
        side["monotone"] = _monotone([r for r in rows if r["batch"] != ""], kind)
    return buf.getvalue(), side, ok


def _write(path, text):
    if path is None or path == "-":
        sys.stdout.write(text)
        return
    with open(path, "w", newline="") as fh:
        fh.write(text)


def _sidecar_path(out):
    root, ext = os.path.splitext(out)
    return (root if ext.lower() == ".csv" else out) + ".json"


def _dump(obj):
    return json.dumps(obj, indent=1, sort_keys=True, default=_jsonable) + "\n"


def _jsonable(x):
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.floating):
        return float(x)
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError("not serializable: %r" % type(x))


def _cmd_run(args):
    kind = args.kind if args.command == "sweep" else args.command
    text, side, ok = run_experiment(kind, args)
    _write(args.out, text)
    if args.out not in (None, "-"):
        _write(_sidecar_path(args.out), _dump(side))
    return 0 if ok else 1


def _cmd_tvcheck(args):
    sub, u, noise = dg.scalar_ridge_probe(args.eta_prime, args.eps, args.delta)
    report = dg.pseudoindependence_probe(sub, u, args.seeds, args.inner, noise, args.eps,
                                         args.delta, bins=args.bins, accuracy=args.eta_prime,
                                         seed_determined=True, master_seed=args.seed)
    _write(args.out, _dump(report))
    return 0


def _cmd_validate(args):
    report = validate_problem(args.problem, args.kind)
    sys.stdout.write(_dump(report))
    return 0 if report["ok"] else 2


def _common(p, eps_default=None):
    p.add_argument("--problem", required=True, help="problem file")
    p.add_argument("--mode", default="Reuse", help="comma-separated loop types")
    p.add_argument("--knob-grid", dest="knob_grid", default=None,
                   help="comma-separated knob values (lambda, gamma' or alpha); "
                        "'4mu' means 4 mu for fsm, 'auto' the default alpha")
    p.add_argument("--eps", type=float, default=eps_default)
    p.add_argument("--delta", type=float, default=0.01)
    p.add_argument("--c", type=float, default=100.0, help="fsm error factor")
    p.add_argument("--t-mix", dest="t_mix", type=float, default=None, help="amdp mixing time bound")
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="CSV path; a .json sidecar is written next to it")
    p.add_argument("--timing", action="store_true", help="fill the secs column")


def build_parser():
    parser = argparse.ArgumentParser(prog="reuse-vr", allow_abbrev=False,
                                     description="Query-count experiments for seed-reusing solvers.")
    sub = parser.add_subparsers(dest="command", required=True)
    for kind in KINDS:
        p = sub.add_parser(kind, allow_abbrev=False)
        _common(p)
        p.set_defaults(func=_cmd_run)
    p = sub.add_parser("sweep", allow_abbrev=False)
    p.add_argument("--kind", required=True, choices=KINDS)
    _common(p)
    p.set_defaults(func=_cmd_run, mode="Standard,Reuse")
    p = sub.add_parser("tvcheck", allow_abbrev=False)
    p.add_argument("--eps", type=float, default=0.05)
    p.add_argument("--delta", type=float, default=0.05)
    p.add_argument("--eta-prime", dest="eta_prime", type=float, default=0.01)
    p.add_argument("--seeds", type=int, default=50)
    p.add_argument("--inner", type=int, default=2000)
    p.add_argument("--bins", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_tvcheck)
    p = sub.add_parser("validate", allow_abbrev=False)
    p.add_argument("--problem", required=True)
    p.add_argument("--kind", required=True, choices=tuple(_LOADERS))
    p.set_defaults(func=_cmd_validate)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ProblemError as exc:
        sys.stderr.write("invalid problem %s\n" % exc)
        return 2
    except ValueError as exc:
        sys.stderr.write("error: %s\n" % exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
