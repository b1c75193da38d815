"""Relaxed storage-concerned dispatch QP: assembly, solution with duals, Gamma and KKT residuals.

The relaxed model drops the charge/discharge complementarity and keeps every
other constraint. Stored energy is substituted out, so the decision vector is
``[p_ch (S*T), p_dc (S*T), p_g (G*T)]``, storage/generator major.

Every constraint row is written ``a'x <= b`` (or ``a'x = b``) and enters the
Lagrangian as ``+multiplier * (a'x - b)``. Lower bounds are negated rows, which
makes the storage stationarity conditions read::

    -f' - alpha1 + alpha2 - eta_ch*Gamma*dt + LMP = 0
     g' - alpha3 + alpha4 + Gamma*dt/eta_dc - LMP = 0

with ``LMP = lambda + sum_j GSF[j, bus] * (mu1 - mu2)``.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .model import (
    NetworkCase,
    case_fingerprint,
    energy_coefficients,
    energy_trajectory,
    net_charge_weights,
    require_valid,
)

log = logging.getLogger(__name__)

# origin tags
BOX_CH = "box-ch"
BOX_DC = "box-dc"
ENERGY = "energy"
NETCHARGE = "netcharge"
GENBOX = "genbox"
RAMP = "ramp"
BALANCE = "balance"
FLOW = "flow"

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"
MAX_ITER = "max_iter"
INACCURATE = "inaccurate"


class SolverError(RuntimeError):
    pass


@dataclass
class RelaxedQP:
    """Sparse QP ``min 0.5x'Px + q'x  s.t.  A_eq x = b_eq,  G x <= h`` with row provenance.

    ``ineq_mult[k]`` names the multiplier of row k (``alpha1`` ... ``mu2``),
    ``ineq_unit``/``ineq_time`` give its (device-or-line, step) coordinates;
    ``ineq_time`` is -1 for the per-storage net-charge rows.
    """

    case: NetworkCase
    P: sp.csc_matrix
    q: np.ndarray
    A_eq: sp.csr_matrix
    b_eq: np.ndarray
    G: sp.csr_matrix
    h: np.ndarray
    ineq_tag: np.ndarray
    ineq_mult: np.ndarray
    ineq_unit: np.ndarray
    ineq_time: np.ndarray
    eq_tag: np.ndarray
    eq_time: np.ndarray
    fingerprint: str = ""

    @property
    def n_vars(self) -> int:
        return self.q.size

    @property
    def S(self) -> int:
        return self.case.n_storages

    @property
    def T(self) -> int:
        return self.case.T

    def ch(self, i, t):
        return i * self.T + t

    def dc(self, i, t):
        return (self.S + i) * self.T + t

    def g(self, k, t):
        return (2 * self.S + k) * self.T + t

    def split(self, x):
        S, T, Gn = self.S, self.T, self.case.n_generators
        x = np.asarray(x)
        return (x[: S * T].reshape(S, T), x[S * T: 2 * S * T].reshape(S, T),
                x[2 * S * T:].reshape(Gn, T))

    def objective(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return float(0.5 * x @ (self.P @ x) + self.q @ x)

    def row_counts(self) -> dict[str, int]:
        tags, counts = np.unique(np.concatenate([self.ineq_tag, self.eq_tag]), return_counts=True)
        return dict(zip(tags.tolist(), counts.tolist()))


class _Rows:
    def __init__(self):
        self.blocks = []

    def add(self, mat, rhs, tag, mult, unit, t):
        mat = sp.csr_matrix(mat)
        m = mat.shape[0]
        self.blocks.append((mat, np.asarray(rhs, dtype=float).reshape(m), np.full(m, tag, dtype=object),
                            np.full(m, mult, dtype=object) if isinstance(mult, str) else np.asarray(mult, dtype=object),
                            np.broadcast_to(unit, (m,)).astype(int), np.broadcast_to(t, (m,)).astype(int)))

    def build(self, n):
        if not self.blocks:
            e = np.zeros(0)
            return (sp.csr_matrix((0, n)), e, e.astype(object), e.astype(object), e.astype(int), e.astype(int))
        mats, rhs, tag, mult, unit, t = zip(*self.blocks)
        return (sp.vstack(mats, format="csr"), np.concatenate(rhs), np.concatenate(tag),
                np.concatenate(mult), np.concatenate(unit), np.concatenate(t))


def assemble_relaxed(case: NetworkCase) -> RelaxedQP:
    """Build the relaxed QP for ``case``; raises ``InvalidCaseError`` on a bad case."""
    require_valid(case)
    T, dt = case.T, case.horizon.dt
    S, Gn = case.n_storages, case.n_generators
    net = case.network
    n = (2 * S + Gn) * T
    o_ch, o_dc, o_g = 0, S * T, 2 * S * T
    pm = case.prices

    def block(offset, width_units, mat_units, rows_units=None):
        """Place a (rows x units*T) matrix into the full column space."""
        mat = sp.csr_matrix(mat_units)
        return sp.hstack([sp.csr_matrix((mat.shape[0], offset)), mat,
                          sp.csr_matrix((mat.shape[0], n - offset - width_units * T))], format="csr")

    # objective: sum g(p_dc) - f(p_ch) + sum h(p_g)
    diag = np.zeros(n)
    q = np.zeros(n)
    for i in range(S):
        q[o_ch + i * T: o_ch + (i + 1) * T] = -pm.f_slope[i]
        q[o_dc + i * T: o_dc + (i + 1) * T] = pm.g1[i]
        diag[o_dc + i * T: o_dc + (i + 1) * T] = 2.0 * pm.g2[i]
    for k, gen in enumerate(case.generators):
        q[o_g + k * T: o_g + (k + 1) * T] = gen.c1
        diag[o_g + k * T: o_g + (k + 1) * T] = 2.0 * gen.c2
    P = sp.diags(diag, format="csc")

    rows = _Rows()
    eye_t = sp.identity(T, format="csr")
    steps = np.arange(T)
    for i, st in enumerate(case.storages):
        e_i = sp.csr_matrix(([1.0], ([0], [i])), shape=(1, S))
        sel = sp.kron(e_i, eye_t)
        rows.add(-block(o_ch, S, sel), np.zeros(T), BOX_CH, "alpha1", i, steps)
        rows.add(block(o_ch, S, sel), st.ch_max, BOX_CH, "alpha2", i, steps)
        rows.add(-block(o_dc, S, sel), np.zeros(T), BOX_DC, "alpha3", i, steps)
        rows.add(block(o_dc, S, sel), st.dc_max, BOX_DC, "alpha4", i, steps)

    for i, st in enumerate(case.storages):
        c_ch, c_dc, e_free = energy_coefficients(st, T, dt)
        e_i = sp.csr_matrix(([1.0], ([0], [i])), shape=(1, S))
        energy = block(o_ch, S, sp.kron(e_i, c_ch)) - block(o_dc, S, sp.kron(e_i, c_dc))
        rows.add(-energy, e_free - st.e_min, ENERGY, "beta1", i, steps)
        rows.add(energy, st.e_max - e_free, ENERGY, "beta2", i, steps)
        w_ch, w_dc = net_charge_weights(st, T, dt)
        row = block(o_ch, S, sp.kron(e_i, w_ch[None, :])) - block(o_dc, S, sp.kron(e_i, w_dc[None, :]))
        rows.add(-row, [-st.e_req], NETCHARGE, "phi", i, -1)

    if T > 1:
        diff = sp.diags([-np.ones(T - 1), np.ones(T - 1)], [0, 1], shape=(T - 1, T), format="csr")
    for k, gen in enumerate(case.generators):
        e_k = sp.csr_matrix(([1.0], ([0], [k])), shape=(1, Gn))
        sel = block(o_g, Gn, sp.kron(e_k, eye_t))
        rows.add(-sel, np.full(T, -gen.p_min), GENBOX, "nu1", k, steps)
        rows.add(sel, gen.upper(T), GENBOX, "nu2", k, steps)
        if T > 1 and gen.ramp_up is not None:
            rows.add(block(o_g, Gn, sp.kron(e_k, diff)), np.full(T - 1, gen.ramp_up), RAMP, "rho_up", k, steps[:-1])
        if T > 1 and gen.ramp_down is not None:
            rows.add(-block(o_g, Gn, sp.kron(e_k, diff)), np.full(T - 1, -gen.ramp_down), RAMP, "rho_dn", k,
                     steps[:-1])

    demand = case.loads.demand
    if net.n_lines:
        gsf = net.gsf
        bus_s = np.array([st.bus for st in case.storages], dtype=int)
        bus_g = np.array([gen.bus for gen in case.generators], dtype=int)
        # injection = p_g + p_dc - p_ch - D
        flow = sp.hstack([sp.kron(sp.csr_matrix(-gsf[:, bus_s]), eye_t),
                          sp.kron(sp.csr_matrix(gsf[:, bus_s]), eye_t),
                          sp.kron(sp.csr_matrix(gsf[:, bus_g]), eye_t)], format="csr")
        flow_load = (gsf @ demand).reshape(-1)
        line_of_row = np.repeat(np.arange(net.n_lines), T)
        time_of_row = np.tile(steps, net.n_lines)
        fmin = np.repeat(net.flow_min, T)
        fmax = np.repeat(net.flow_max, T)
        lo = np.isfinite(fmin)
        hi = np.isfinite(fmax)
        if lo.any():
            rows.add(-flow[np.flatnonzero(lo)], (-fmin - flow_load)[lo], FLOW, "mu1", line_of_row[lo], time_of_row[lo])
        if hi.any():
            rows.add(flow[np.flatnonzero(hi)], (fmax + flow_load)[hi], FLOW, "mu2", line_of_row[hi], time_of_row[hi])

    G, h, tag, mult, unit, tt = rows.build(n)

    # balance written as demand - supply = 0 so its multiplier is lambda
    ones_s = sp.csr_matrix(np.ones((1, S)))
    ones_g = sp.csr_matrix(np.ones((1, Gn)))
    A_eq = sp.hstack([sp.kron(ones_s, eye_t), -sp.kron(ones_s, eye_t), -sp.kron(ones_g, eye_t)], format="csr")
    b_eq = -demand.sum(axis=0)

    return RelaxedQP(case=case, P=P, q=q, A_eq=A_eq, b_eq=b_eq, G=G, h=h, ineq_tag=tag, ineq_mult=mult,
                     ineq_unit=unit, ineq_time=tt, eq_tag=np.full(T, BALANCE, dtype=object), eq_time=steps.copy(),
                     fingerprint=case_fingerprint(case))


# --------------------------------------------------------------------------- solution types


@dataclass
class DualSolution:
    lam: np.ndarray  # T
    alpha1: np.ndarray  # S x T, p_ch >= 0
    alpha2: np.ndarray  # p_ch <= ch_max
    alpha3: np.ndarray  # p_dc >= 0
    alpha4: np.ndarray  # p_dc <= dc_max
    beta1: np.ndarray  # E >= e_min
    beta2: np.ndarray  # E <= e_max
    phi: np.ndarray  # S
    mu1: np.ndarray  # L x T, flow >= flow_min
    mu2: np.ndarray  # flow <= flow_max
    nu1: np.ndarray  # G x T, p_g >= p_min
    nu2: np.ndarray  # p_g <= p_max(t)
    rho_up: np.ndarray  # G x (T-1)
    rho_dn: np.ndarray

    NAMES = ("lam", "alpha1", "alpha2", "alpha3", "alpha4", "beta1", "beta2", "phi", "mu1", "mu2",
             "nu1", "nu2", "rho_up", "rho_dn")

    @classmethod
    def zeros(cls, S, T, L, G):
        return cls(lam=np.zeros(T), alpha1=np.zeros((S, T)), alpha2=np.zeros((S, T)), alpha3=np.zeros((S, T)),
                   alpha4=np.zeros((S, T)), beta1=np.zeros((S, T)), beta2=np.zeros((S, T)), phi=np.zeros(S),
                   mu1=np.zeros((L, T)), mu2=np.zeros((L, T)), nu1=np.zeros((G, T)), nu2=np.zeros((G, T)),
                   rho_up=np.zeros((G, max(T - 1, 0))), rho_dn=np.zeros((G, max(T - 1, 0))))

    def min_inequality(self) -> float:
        vals = [getattr(self, n).ravel() for n in self.NAMES if n != "lam"]
        return float(np.min(np.concatenate(vals), initial=0.0))


@dataclass
class DispatchSolution:
    p_ch: np.ndarray  # S x T
    p_dc: np.ndarray  # S x T
    p_g: np.ndarray  # G x T
    energy: np.ndarray  # S x T
    duals: DualSolution
    objective: float
    status: str
    residuals: dict = field(default_factory=dict)
    iterations: int = 0
    solve_time: float = 0.0
    fingerprint: str = ""
    message: str = ""

    @property
    def optimal(self) -> bool:
        return self.status == OPTIMAL


@dataclass(frozen=True)
class SolverSettings:
    primal_tol: float = 1e-6
    dual_tol: float = 1e-6
    cs_tol: float = 1e-6
    max_iter: int = 200
    backend: str = "clarabel"  # or "ipm" (dense, small cases only)


def map_duals(qp: RelaxedQP, z: np.ndarray, y: np.ndarray) -> DualSolution:
    case = qp.case
    S, T, L, Gn = case.n_storages, case.T, case.network.n_lines, case.n_generators
    d = DualSolution.zeros(S, T, L, Gn)
    d.lam[qp.eq_time] = y
    for name in set(qp.ineq_mult.tolist()):
        rows = np.flatnonzero(qp.ineq_mult == name)
        target = getattr(d, name)
        if name == "phi":
            target[qp.ineq_unit[rows]] = z[rows]
        else:
            target[qp.ineq_unit[rows], qp.ineq_time[rows]] = z[rows]
    return d


def qp_residuals(qp: RelaxedQP, x, z, y) -> dict:
    """Matrix-form KKT residuals: primal feasibility, dual feasibility, complementary slackness."""
    gx = qp.G @ x
    viol = np.maximum(gx - qp.h, 0.0) / (1.0 + np.abs(qp.h))
    eq = np.abs(qp.A_eq @ x - qp.b_eq) / (1.0 + np.abs(qp.b_eq))
    grad = qp.P @ x + qp.q
    stat = grad + qp.G.T @ z + qp.A_eq.T @ y
    scale = max(1.0, float(np.max(np.abs(grad), initial=0.0)), float(np.max(np.abs(y), initial=0.0)))
    slack = qp.h - gx
    cs = np.abs(z * slack)
    return {
        "primal_feas": float(max(np.max(viol, initial=0.0), np.max(eq, initial=0.0))),
        "dual_feas": float(max(-np.min(z, initial=0.0), np.max(np.abs(stat), initial=0.0) / scale)),
        "stationarity": float(np.max(np.abs(stat), initial=0.0) / scale),
        "complementarity": float(np.max(cs, initial=0.0)),
    }


def solution_from_vectors(qp: RelaxedQP, x, z, y, status, settings: SolverSettings, iterations=0,
                          elapsed=0.0, message="") -> DispatchSolution:
    case = qp.case
    x = np.asarray(x, dtype=float)
    z = np.asarray(z, dtype=float)
    y = np.asarray(y, dtype=float)
    p_ch, p_dc, p_g = qp.split(x)
    energy = np.array([energy_trajectory(st, p_ch[i], p_dc[i], case.horizon.dt)
                       for i, st in enumerate(case.storages)]).reshape(case.n_storages, case.T)
    res = qp_residuals(qp, x, z, y)
    if status == OPTIMAL and not (res["primal_feas"] <= settings.primal_tol and res["dual_feas"] <= settings.dual_tol
                                  and res["complementarity"] <= settings.cs_tol):
        message = (message + " " if message else "") + f"residuals above tolerance: {res}"
        status = INACCURATE
    return DispatchSolution(p_ch=p_ch.copy(), p_dc=p_dc.copy(), p_g=p_g.copy(), energy=energy,
                            duals=map_duals(qp, z, y), objective=qp.objective(x), status=status, residuals=res,
                            iterations=iterations, solve_time=elapsed, fingerprint=qp.fingerprint, message=message)


def _empty_solution(qp: RelaxedQP, status: str, message: str, elapsed: float, iterations: int = 0):
    case = qp.case
    S, T, Gn = case.n_storages, case.T, case.n_generators
    nan = np.full
    return DispatchSolution(p_ch=nan((S, T), np.nan), p_dc=nan((S, T), np.nan), p_g=nan((Gn, T), np.nan),
                            energy=nan((S, T), np.nan),
                            duals=DualSolution.zeros(S, T, case.network.n_lines, Gn), objective=np.nan,
                            status=status, iterations=iterations, solve_time=elapsed, fingerprint=qp.fingerprint,
                            message=message)


def solve(qp: RelaxedQP, settings: Optional[SolverSettings] = None) -> DispatchSolution:
    """Solve the relaxed QP to global optimality and return primal values with named duals."""
    settings = settings or SolverSettings()
    t0 = time.perf_counter()
    if settings.backend == "ipm":
        return _solve_dense(qp, settings, t0)
    if settings.backend != "clarabel":
        raise ValueError(f"unknown backend {settings.backend!r}")
    import clarabel

    lifted = lift(qp)
    m_eq, m_in = lifted.A_eq.shape[0], lifted.G.shape[0]
    A = sp.vstack([lifted.A_eq, lifted.G], format="csc")
    b = np.concatenate([lifted.b_eq, lifted.h])
    opts = clarabel.DefaultSettings()
    opts.verbose = False
    opts.max_iter = settings.max_iter
    opts.tol_gap_abs = 1e-10
    opts.tol_gap_rel = 1e-10
    opts.tol_feas = 1e-10
    opts.tol_ktratio = 1e-8
    opts.presolve_enable = False
    opts.max_threads = 1
    cones = []
    if m_eq:
        cones.append(clarabel.ZeroConeT(m_eq))
    if m_in:
        cones.append(clarabel.NonnegativeConeT(m_in))
    n_x = qp.n_vars
    P = sp.block_diag([sp.triu(qp.P), sp.csc_matrix((lifted.n_states, lifted.n_states))], format="csc")
    q = np.concatenate([qp.q, np.zeros(lifted.n_states)])
    result = clarabel.DefaultSolver(P, q, A, b, cones, opts).solve()
    elapsed = time.perf_counter() - t0
    status_name = str(result.status)
    log.debug("clarabel status %s in %d iterations (%.3fs)", status_name, result.iterations, elapsed)
    if status_name in ("PrimalInfeasible", "AlmostPrimalInfeasible"):
        diag = diagnose_infeasibility(qp)
        return _empty_solution(qp, INFEASIBLE, diag, elapsed, result.iterations)
    if status_name in ("DualInfeasible", "AlmostDualInfeasible"):
        return _empty_solution(qp, UNBOUNDED, "dual infeasible: unbounded relaxed QP (internal error)", elapsed,
                               result.iterations)
    z_all = np.asarray(result.z)
    y, z = z_all[:qp.A_eq.shape[0]], z_all[m_eq:]
    if status_name == "Solved":
        status = OPTIMAL
    elif status_name == "AlmostSolved":
        # accepted only if the residual check in solution_from_vectors passes
        status = OPTIMAL
    elif status_name == "MaxIterations":
        status = MAX_ITER
    else:
        status = INACCURATE
    return solution_from_vectors(qp, np.asarray(result.x)[:n_x], z, y, status, settings, result.iterations,
                                 elapsed, message=f"clarabel: {status_name}")


@dataclass
class LiftedQP:
    """Sparse equivalent of a :class:`RelaxedQP` with stored energy as extra variables.

    Columns are ``[x, E (S*T), u]`` with ``u`` the net injection of each
    device-hosting bus. Inequality rows keep the order and meaning of ``qp.G``:
    energy-band and net-charge rows become plain bounds on ``E`` and flow rows
    act on ``u``, so their multipliers are the same numbers. The equalities are
    the balance rows of ``qp``, then the energy recursion, then the injection
    definitions.
    """

    A_eq: sp.csr_matrix
    b_eq: np.ndarray
    G: sp.csr_matrix
    h: np.ndarray
    n_states: int


def lift(qp: RelaxedQP) -> LiftedQP:
    case = qp.case
    S, T, dt = case.n_storages, case.T, case.horizon.dt
    n, ns = qp.n_vars, S * T
    G = qp.G.tocsr()
    is_energy = (qp.ineq_tag == ENERGY) | (qp.ineq_tag == NETCHARGE)
    is_flow = qp.ineq_tag == FLOW
    keep = sp.diags((~(is_energy | is_flow)).astype(float))
    G_x = keep @ G
    h = qp.h.copy()

    rows, cols, vals = [], [], []
    for r in np.flatnonzero(is_energy):
        i, t, mult = qp.ineq_unit[r], qp.ineq_time[r], qp.ineq_mult[r]
        st = case.storages[i]
        if mult == "beta1":
            rows.append(r), cols.append(i * T + t), vals.append(-1.0)
            h[r] = -st.e_min[t]
        elif mult == "beta2":
            rows.append(r), cols.append(i * T + t), vals.append(1.0)
            h[r] = st.e_max[t]
        else:  # phi: discounted net charge = E(T) - xi^T E0 >= e_req
            rows.append(r), cols.append(i * T + T - 1), vals.append(-1.0)
            h[r] = -(st.e_req + st.xi ** T * st.e0)
    G_e = sp.csr_matrix((vals, (rows, cols)), shape=(G.shape[0], ns))

    # bus injections u(b, t) for buses hosting a device; flow rows act on u only
    buses = sorted({st.bus for st in case.storages} | {g.bus for g in case.generators})
    col_of_bus = {b: k for k, b in enumerate(buses)}
    nu = len(buses) * T
    inj_rows, inj_cols, inj_vals = [], [], []
    for i, st in enumerate(case.storages):
        for t in range(T):
            r = col_of_bus[st.bus] * T + t
            inj_rows += [r, r]
            inj_cols += [qp.ch(i, t), qp.dc(i, t)]
            inj_vals += [1.0, -1.0]
    for k, gen in enumerate(case.generators):
        for t in range(T):
            inj_rows.append(col_of_bus[gen.bus] * T + t)
            inj_cols.append(qp.g(k, t))
            inj_vals.append(-1.0)
    # u - (p_g + p_dc - p_ch) = 0
    inj_x = sp.csr_matrix((inj_vals, (inj_rows, inj_cols)), shape=(nu, n))
    gsf = case.network.gsf
    flow_r = np.flatnonzero(is_flow)
    fr, fc, fv = [], [], []
    for r in flow_r:
        j, t = qp.ineq_unit[r], qp.ineq_time[r]
        sign = -1.0 if qp.ineq_mult[r] == "mu1" else 1.0
        for b in buses:
            if gsf[j, b] != 0.0:
                fr.append(r), fc.append(col_of_bus[b] * T + t), fv.append(sign * gsf[j, b])
    G_u = sp.csr_matrix((fv, (fr, fc)), shape=(G.shape[0], nu))

    # E(t) - xi E(t-1) - eta_ch dt p_ch(t) + dt/eta_dc p_dc(t) = [t == 0] xi E0
    eye_t = sp.identity(T, format="csr")
    shift = sp.diags([np.ones(T - 1)], [-1], shape=(T, T), format="csr") if T > 1 else sp.csr_matrix((T, T))
    b_rec = np.zeros(ns)
    for i, st in enumerate(case.storages):
        b_rec[i * T] = st.xi * st.e0
    blocks = [[qp.A_eq, None, None]]
    if S:
        rec_e = sp.block_diag([eye_t - st.xi * shift for st in case.storages], format="csr")
        rec_ch = sp.block_diag([-st.eta_ch * dt * eye_t for st in case.storages], format="csr")
        rec_dc = sp.block_diag([dt / st.eta_dc * eye_t for st in case.storages], format="csr")
        rec_x = sp.hstack([rec_ch, rec_dc, sp.csr_matrix((ns, n - 2 * ns))], format="csr")
        blocks.append([rec_x, rec_e, None])
    if nu:
        blocks.append([inj_x, None, sp.identity(nu)])
    A_eq = sp.bmat(blocks, format="csr")
    widths = (n, ns, nu)
    A_eq.resize((A_eq.shape[0], sum(widths)))
    b_eq = np.concatenate([qp.b_eq, b_rec, np.zeros(nu)])
    return LiftedQP(A_eq=A_eq, b_eq=b_eq, G=sp.hstack([G_x, G_e, G_u], format="csr"), h=h, n_states=ns + nu)


def _solve_dense(qp: RelaxedQP, settings: SolverSettings, t0: float) -> DispatchSolution:
    from .ipm import solve_qp

    res = solve_qp(qp.P.toarray(), qp.q, qp.A_eq.toarray(), qp.b_eq, qp.G.toarray(), qp.h,
                   max_iter=max(settings.max_iter, 100))
    elapsed = time.perf_counter() - t0
    if res.status != "optimal":
        if not lp_feasible(qp):
            return _empty_solution(qp, INFEASIBLE, diagnose_infeasibility(qp), elapsed, res.iterations)
        return _empty_solution(qp, MAX_ITER, f"dense ipm: {res.status}", elapsed, res.iterations)
    return solution_from_vectors(qp, res.x, res.z, res.y, OPTIMAL, settings, res.iterations, elapsed,
                                 message="dense ipm")


def lp_feasible(qp: RelaxedQP) -> bool:
    """Phase-one feasibility of the constraint set (simplex, independent of both QP backends)."""
    from scipy.optimize import linprog

    res = linprog(np.zeros(qp.n_vars), A_ub=qp.G if qp.G.shape[0] else None, b_ub=qp.h if qp.G.shape[0] else None,
                  A_eq=qp.A_eq if qp.A_eq.shape[0] else None, b_eq=qp.b_eq if qp.A_eq.shape[0] else None,
                  bounds=(None, None), method="highs")
    if res.status == 2:
        return False
    if res.status == 0:
        return True
    raise SolverError(f"feasibility LP failed: {res.message}")


def diagnose_infeasibility(qp: RelaxedQP) -> str:
    """Name the constraint block carrying the largest elastic violation."""
    from scipy.optimize import linprog

    m_in, m_eq = qp.G.shape[0], qp.A_eq.shape[0]
    n = qp.n_vars
    # G x - v <= h,  A x + e_plus - e_minus = b, minimize sum of elastic variables
    c = np.concatenate([np.zeros(n), np.ones(m_in + 2 * m_eq)])
    A_ub = sp.hstack([qp.G, -sp.identity(m_in), sp.csr_matrix((m_in, 2 * m_eq))], format="csr")
    A_eq = sp.hstack([qp.A_eq, sp.csr_matrix((m_eq, m_in)), sp.identity(m_eq), -sp.identity(m_eq)], format="csr")
    bounds = [(None, None)] * n + [(0, None)] * (m_in + 2 * m_eq)
    res = linprog(c, A_ub=A_ub, b_ub=qp.h, A_eq=A_eq, b_eq=qp.b_eq, bounds=bounds, method="highs")
    if res.status != 0:
        return f"infeasible (elastic diagnosis failed: {res.message})"
    v = res.x[n:n + m_in]
    e = res.x[n + m_in:n + m_in + m_eq] + res.x[n + m_in + m_eq:]
    totals: dict[str, float] = {}
    for tag, val in zip(qp.ineq_tag, v):
        totals[tag] = totals.get(tag, 0.0) + val
    for tag, val in zip(qp.eq_tag, e):
        totals[tag] = totals.get(tag, 0.0) + val
    worst = max(totals, key=totals.get)
    if qp.ineq_tag.size and worst != BALANCE:
        k = int(np.argmax(np.where(qp.ineq_tag == worst, v, -1.0)))
        where = f" (unit {qp.ineq_unit[k]}, step {qp.ineq_time[k]})"
    else:
        where = f" (step {int(np.argmax(e))})" if e.size else ""
    return f"infeasible: worst-violated block {worst}{where}, elastic violation {totals[worst]:.6g}"


# --------------------------------------------------------------------------- Gamma and KKT residuals


def gamma_series(beta1, beta2, phi, xi) -> np.ndarray:
    """Discounted energy-multiplier sums by backward recursion, S x T."""
    beta1 = np.atleast_2d(np.asarray(beta1, dtype=float))
    beta2 = np.atleast_2d(np.asarray(beta2, dtype=float))
    phi = np.atleast_1d(np.asarray(phi, dtype=float))
    xi = np.broadcast_to(np.asarray(xi, dtype=float), phi.shape)
    S, T = beta1.shape
    out = np.zeros((S, T))
    if T == 0:
        return out
    out[:, T - 1] = beta1[:, T - 1] - beta2[:, T - 1] + phi
    for t in range(T - 2, -1, -1):
        out[:, t] = beta1[:, t] - beta2[:, t] + xi * out[:, t + 1]
    return out


def compute_gamma(solution: DispatchSolution, case: NetworkCase) -> np.ndarray:
    d = solution.duals
    xi = np.array([st.xi for st in case.storages])
    return gamma_series(d.beta1, d.beta2, d.phi, xi)


def bus_lmp(duals: DualSolution, gsf: np.ndarray) -> np.ndarray:
    """N x T marginal price of demand: ``lambda + GSF' (mu1 - mu2)``."""
    lam = np.asarray(duals.lam, dtype=float)
    cong = gsf.T @ (duals.mu1 - duals.mu2) if gsf.size else np.zeros((gsf.shape[1], lam.size))
    return lam[None, :] + cong


def stationarity_pch(f_prime, alpha1, alpha2, eta_ch, gamma, dt, lmp):
    return -f_prime - alpha1 + alpha2 - eta_ch * gamma * dt + lmp


def stationarity_pdc(g_prime, alpha3, alpha4, eta_dc, gamma, dt, lmp):
    return g_prime - alpha3 + alpha4 + gamma * dt / eta_dc - lmp


@dataclass
class KKTResiduals:
    r_pch: np.ndarray  # S x T
    r_pdc: np.ndarray
    r_pg: np.ndarray  # G x T
    max_abs: float
    rms: float
    normalized: float  # max_abs over the price scale of the instance


def kkt_residuals(solution: DispatchSolution, case: NetworkCase) -> KKTResiduals:
    """Storage and generator stationarity evaluated from the named multipliers."""
    d = solution.duals
    T, dt = case.T, case.horizon.dt
    lmp = bus_lmp(d, case.network.gsf)
    gamma = compute_gamma(solution, case)
    pm = case.prices
    S = case.n_storages
    r_pch = np.zeros((S, T))
    r_pdc = np.zeros((S, T))
    g_prime = pm.g_prime(solution.p_dc) if S else np.zeros((0, T))
    for i, st in enumerate(case.storages):
        r_pch[i] = stationarity_pch(pm.f_slope[i], d.alpha1[i], d.alpha2[i], st.eta_ch, gamma[i], dt, lmp[st.bus])
        r_pdc[i] = stationarity_pdc(g_prime[i], d.alpha3[i], d.alpha4[i], st.eta_dc, gamma[i], dt, lmp[st.bus])
    r_pg = np.zeros((case.n_generators, T))
    for k, gen in enumerate(case.generators):
        ramp = np.zeros(T)
        if T > 1:
            # row t couples p(t+1) - p(t)
            ramp[:-1] += -d.rho_up[k] + d.rho_dn[k]
            ramp[1:] += d.rho_up[k] - d.rho_dn[k]
        r_pg[k] = gen.marginal_cost(solution.p_g[k]) - d.nu1[k] + d.nu2[k] + ramp - lmp[gen.bus]
    allr = np.concatenate([r_pch.ravel(), r_pdc.ravel(), r_pg.ravel()])
    max_abs = float(np.max(np.abs(allr), initial=0.0))
    rms = float(np.sqrt(np.mean(allr ** 2))) if allr.size else 0.0
    scale = max(1.0, float(np.max(np.abs(lmp), initial=0.0)), float(np.max(np.abs(pm.f_slope), initial=0.0)),
                float(np.max(np.abs(g_prime), initial=0.0)))
    return KKTResiduals(r_pch, r_pdc, r_pg, max_abs, rms, max_abs / scale)


def lagrangian_value(qp: RelaxedQP, solution: DispatchSolution, x=None) -> float:
    """Lagrangian at the returned point and multipliers (weak-duality check)."""
    if x is None:
        x = np.concatenate([solution.p_ch.ravel(), solution.p_dc.ravel(), solution.p_g.ravel()])
    d = solution.duals
    z = np.empty(qp.G.shape[0])
    for name in set(qp.ineq_mult.tolist()):
        rows = np.flatnonzero(qp.ineq_mult == name)
        src = getattr(d, name)
        z[rows] = src[qp.ineq_unit[rows]] if name == "phi" else src[qp.ineq_unit[rows], qp.ineq_time[rows]]
    y = d.lam[qp.eq_time]
    return float(qp.objective(x) + z @ (qp.G @ x - qp.h) + y @ (qp.A_eq @ x - qp.b_eq))


def solve_case(case: NetworkCase, settings: Optional[SolverSettings] = None) -> DispatchSolution:
    return solve(assemble_relaxed(case), settings)
