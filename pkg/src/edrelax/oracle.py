"""Brute-force MPEC oracle: enumerate charge/discharge fixings and keep the best convex solve.

Pattern bit ``k = i*T + t`` describes storage ``i`` at step ``t``: a set bit
means discharge-allowed (``p_ch`` fixed to zero), a clear bit means
charge-allowed (``p_dc`` fixed to zero). Every pattern QP is solved by the dense
interior point method in :mod:`edrelax.ipm`, independent of the solver behind
the relaxed model.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np
from scipy.optimize import linprog

from . import ipm
from .model import NetworkCase, net_charge_weights
from .qp import DispatchSolution, RelaxedQP, assemble_relaxed
from .relaxation import DEFAULT_EXACTNESS_TOL, verify_exactness

log = logging.getLogger(__name__)

DEFAULT_LIMIT = 2 ** 20
DEFAULT_GAP_TOL = 1e-6  # relative


class PatternBudgetExceeded(ValueError):
    pass


class AllPatternsInfeasible(RuntimeError):
    pass


class CaseMismatchError(ValueError):
    pass


class OracleNumericalError(RuntimeError):
    pass


@dataclass
class PatternResult:
    pattern: int
    status: str  # "optimal" | "infeasible" | "pruned"
    objective: float = float("nan")
    x: Optional[np.ndarray] = None


@dataclass
class OracleResult:
    best_objective: float
    best_pattern: int
    p_ch: np.ndarray
    p_dc: np.ndarray
    p_g: np.ndarray
    n_patterns: int
    n_feasible: int
    n_pruned: int
    fingerprint: str
    table: Optional[dict[int, float]] = None  # pattern -> objective (nan when infeasible or pruned)

    def to_dict(self) -> dict:
        d = {"best_objective": self.best_objective, "best_pattern": self.best_pattern,
             "n_patterns": self.n_patterns, "n_feasible": self.n_feasible, "n_pruned": self.n_pruned,
             "fingerprint": self.fingerprint, "p_ch": self.p_ch.tolist(), "p_dc": self.p_dc.tolist(),
             "p_g": self.p_g.tolist()}
        if self.table is not None:
            d["table"] = {str(k): (None if np.isnan(v) else v) for k, v in self.table.items()}
        return d


class _DenseQP:
    """Dense copy of a relaxed QP, ready for column elimination."""

    def __init__(self, qp: RelaxedQP):
        self.qp = qp
        self.P = qp.P.toarray()
        self.q = np.asarray(qp.q, dtype=float)
        self.A = qp.A_eq.toarray()
        self.b = np.asarray(qp.b_eq, dtype=float)
        self.G = qp.G.toarray()
        self.h = np.asarray(qp.h, dtype=float)
        S, T = qp.S, qp.T
        self.S, self.T = S, T
        case = qp.case
        # largest achievable discounted net charge per (storage, step), for the interval prune
        self.req = np.array([st.e_req for st in case.storages])
        self.charge_room = np.zeros((S, T))
        for i, st in enumerate(case.storages):
            w_ch, _ = net_charge_weights(st, T, case.horizon.dt)
            # discharging only lowers the sum
            self.charge_room[i] = w_ch * st.ch_max

    def fixed_columns(self, pattern: int) -> np.ndarray:
        S, T = self.S, self.T
        bits = (pattern >> np.arange(S * T)) & 1
        k = np.arange(S * T)
        # set bit: p_ch fixed; clear bit: p_dc fixed
        return np.where(bits == 1, k, S * T + k)

    def prune(self, pattern: int) -> bool:
        """True if the net-charge requirement cannot be met under this pattern."""
        if not self.S:
            return False
        bits = ((pattern >> np.arange(self.S * self.T)) & 1).reshape(self.S, self.T)
        best = np.where(bits == 0, self.charge_room, 0.0).sum(axis=1)
        return bool(np.any(best < self.req - 1e-9 * (1.0 + np.abs(self.req))))

    def restricted(self, pattern: int):
        n = self.q.size
        keep = np.ones(n, dtype=bool)
        keep[self.fixed_columns(pattern)] = False
        G = self.G[:, keep]
        empty = ~np.any(G != 0.0, axis=1)
        if np.any(self.h[empty] < -1e-12):
            return None
        rows = ~empty
        return keep, self.P[np.ix_(keep, keep)], self.q[keep], self.A[:, keep], self.b, G[rows], self.h[rows]


def _feasible(A, b, G, h) -> bool:
    n = A.shape[1] if A.size else G.shape[1]
    res = linprog(np.zeros(n), A_ub=G if G.size else None, b_ub=h if G.size else None,
                  A_eq=A if A.size else None, b_eq=b if A.size else None, bounds=(None, None), method="highs")
    return res.status == 0


def solve_pattern(case_or_qp, pattern: int, *, tol: float = 1e-10) -> PatternResult:
    dense = case_or_qp if isinstance(case_or_qp, _DenseQP) else _DenseQP(
        case_or_qp if isinstance(case_or_qp, RelaxedQP) else assemble_relaxed(case_or_qp))
    if dense.prune(pattern):
        return PatternResult(pattern, "pruned")
    parts = dense.restricted(pattern)
    if parts is None:
        return PatternResult(pattern, "infeasible")
    keep, P, q, A, b, G, h = parts
    res = ipm.solve_qp(P, q, A, b, G, h, tol=tol, max_iter=80)
    if res.status != "optimal":
        if not _feasible(A, b, G, h):
            return PatternResult(pattern, "infeasible")
        # retry looser before declaring the oracle untrustworthy
        res = ipm.solve_qp(P, q, A, b, G, h, tol=1e-8, max_iter=200)
        if res.status != "optimal":
            raise OracleNumericalError(f"pattern {pattern}: interior point {res.status} on a feasible QP")
    x = np.zeros(dense.q.size)
    x[keep] = res.x
    return PatternResult(pattern, "optimal", float(dense.qp.objective(x)), x)


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("EDRELAX_THREADS", "1")))
    except ValueError:
        return 1


def enumerate_patterns(case: NetworkCase, limit: int = DEFAULT_LIMIT, patterns: Optional[Iterable[int]] = None,
                       keep_table: bool = False, threads: Optional[int] = None) -> OracleResult:
    """Solve every complementarity pattern and return the best MPEC-feasible schedule.

    ``patterns`` restricts the enumeration to a subset (used for refinement
    checks); ``limit`` bounds the full pattern count ``2**(S*T)``.
    """
    qp = assemble_relaxed(case)
    S, T = qp.S, qp.T
    if patterns is None:
        if S * T > 62 or 2 ** (S * T) > limit:
            raise PatternBudgetExceeded(f"2^{S * T} patterns exceed the limit {limit}")
        patterns = range(2 ** (S * T))
    patterns = list(patterns)
    dense = _DenseQP(qp)
    workers = threads if threads is not None else _threads()
    if workers > 1 and len(patterns) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda p: solve_pattern(dense, p), patterns))
    else:
        results = [solve_pattern(dense, p) for p in patterns]

    feasible = [r for r in results if r.status == "optimal"]
    if not feasible:
        raise AllPatternsInfeasible(f"all {len(patterns)} patterns infeasible")
    # ties broken by the smallest pattern index
    best = min(feasible, key=lambda r: (r.objective, r.pattern))
    scale = 1e-9 * max(1.0, abs(best.objective))
    best = min((r for r in feasible if r.objective <= best.objective + scale), key=lambda r: r.pattern)
    p_ch, p_dc, p_g = qp.split(best.x)
    table = {r.pattern: r.objective for r in results} if keep_table else None
    return OracleResult(best_objective=best.objective, best_pattern=best.pattern, p_ch=p_ch, p_dc=p_dc,
                        p_g=p_g, n_patterns=len(patterns), n_feasible=len(feasible),
                        n_pruned=sum(r.status == "pruned" for r in results), fingerprint=qp.fingerprint,
                        table=table)


def pattern_of(solution: DispatchSolution, tol: float = 1e-9) -> int:
    """Pattern compatible with a complementary schedule: charge-allowed wherever ``p_ch > tol``."""
    p_ch = np.asarray(solution.p_ch)
    bits = (p_ch.ravel() <= tol).astype(np.int64)
    return int(np.sum(bits << np.arange(bits.size, dtype=np.int64)))


@dataclass
class Comparison:
    gap: float
    rel_gap: float
    exact: bool
    max_product: float
    witness: list = field(default_factory=list)  # (storage, step, product) above the product tolerance

    def to_dict(self) -> dict:
        return {"gap": self.gap, "rel_gap": self.rel_gap, "exact": self.exact, "max_product": self.max_product,
                "witness": [list(w) for w in self.witness]}


def compare(relaxed: DispatchSolution, oracle: OracleResult, tol: float = DEFAULT_GAP_TOL,
            product_tol: float = DEFAULT_EXACTNESS_TOL) -> Comparison:
    """Relaxation gap and exactness verdict; ``tol`` is relative to the oracle optimum."""
    if relaxed.fingerprint and oracle.fingerprint and relaxed.fingerprint != oracle.fingerprint:
        raise CaseMismatchError("relaxed solution and oracle result come from different cases")
    gap = oracle.best_objective - relaxed.objective
    rel = gap / max(1.0, abs(oracle.best_objective))
    if rel < -tol:
        log.warning("relaxed objective above the oracle optimum by %.3g (relative)", -rel)
    ex = verify_exactness(relaxed, product_tol)
    return Comparison(gap=gap, rel_gap=rel, exact=bool(rel <= tol and ex.exact), max_product=ex.max_product,
                      witness=ex.violations)

