"""Dispatch instance types, validation, the storage energy recursion and DC shift factors.

Bus, line, generator and storage indices are 0-based throughout. Powers are
MW, energies MWh, prices $/MWh, ramps MW per step.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

#: relaxes the net-charging requirement when no requirement is modeled
NO_NET_CHARGE_REQUIREMENT = -100000.0

SCENARIOS = (1, 2, 3)


def _frozen_array(values, shape=None, dtype=float) -> np.ndarray:
    arr = np.array(values, dtype=dtype)
    if shape is not None:
        arr = np.broadcast_to(arr, shape).copy()
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Horizon:
    steps: int
    dt: float = 1.0


@dataclass(frozen=True)
class Line:
    from_bus: int
    to_bus: int
    reactance: float
    flow_min: float = -math.inf
    flow_max: float = math.inf


@dataclass(frozen=True, eq=False)
class Network:
    n_buses: int
    lines: tuple[Line, ...]
    slack_bus: int = 0
    gsf: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "lines", tuple(self.lines))
        if self.gsf is None:
            try:
                with np.errstate(divide="ignore", invalid="ignore"):
                    gsf = compute_gsf(self)
            except (DisconnectedNetworkError, IndexError, np.linalg.LinAlgError):
                # reported by validate_case
                gsf = np.full((len(self.lines), self.n_buses), np.nan)
        else:
            gsf = self.gsf
        object.__setattr__(self, "gsf", _frozen_array(gsf).reshape(len(self.lines), self.n_buses))

    @property
    def n_lines(self) -> int:
        return len(self.lines)

    @property
    def flow_min(self) -> np.ndarray:
        return np.array([ln.flow_min for ln in self.lines], dtype=float)

    @property
    def flow_max(self) -> np.ndarray:
        return np.array([ln.flow_max for ln in self.lines], dtype=float)


@dataclass(frozen=True, eq=False)
class Generator:
    """Dispatchable unit with cost ``h(x) = c2*x**2 + c1*x``.

    ``p_max_t`` (length T) overrides ``p_max`` per step; renewable units use it
    with zero cost and ``ramp_up = ramp_down = None`` (no ramp rows).
    """

    bus: int
    p_min: float
    p_max: float
    ramp_up: Optional[float] = None
    ramp_down: Optional[float] = None
    c2: float = 0.0
    c1: float = 0.0
    p_max_t: Optional[np.ndarray] = None
    kind: str = "thermal"

    def __post_init__(self):
        if self.p_max_t is not None:
            object.__setattr__(self, "p_max_t", _frozen_array(self.p_max_t))

    def upper(self, steps: int) -> np.ndarray:
        if self.p_max_t is not None:
            return np.asarray(self.p_max_t, dtype=float)
        return np.full(steps, float(self.p_max))

    def marginal_cost(self, p):
        return 2.0 * self.c2 * np.asarray(p) + self.c1


@dataclass(frozen=True, eq=False)
class StorageDevice:
    """Storage at ``bus``; per-step limits are T-vectors (scalars broadcast by ``broadcast``)."""

    bus: int
    ch_max: np.ndarray
    dc_max: np.ndarray
    eta_ch: float
    eta_dc: float
    self_discharge: float
    e0: float
    e_min: np.ndarray
    e_max: np.ndarray
    e_req: float = NO_NET_CHARGE_REQUIREMENT

    def __post_init__(self):
        for name in ("ch_max", "dc_max", "e_min", "e_max"):
            object.__setattr__(self, name, _frozen_array(np.atleast_1d(getattr(self, name))))

    @classmethod
    def broadcast(cls, steps: int, **kw) -> "StorageDevice":
        for name in ("ch_max", "dc_max", "e_min", "e_max"):
            kw[name] = np.broadcast_to(np.asarray(kw[name], dtype=float), (steps,))
        return cls(**kw)

    @property
    def xi(self) -> float:
        return 1.0 - self.self_discharge

    @property
    def eta_cycle(self) -> float:
        return self.eta_ch * self.eta_dc


@dataclass(frozen=True, eq=False)
class PriceModel:
    """Per-storage linear charging fee ``f(x) = f_slope*x`` and discharging cost ``g(x) = g2*x**2 + g1*x``."""

    f_slope: np.ndarray
    g2: np.ndarray
    g1: np.ndarray
    scenario: Optional[int] = None

    def __post_init__(self):
        for name in ("f_slope", "g2", "g1"):
            object.__setattr__(self, name, _frozen_array(np.atleast_1d(getattr(self, name))))

    @classmethod
    def uniform(cls, n_storages: int, f_slope=0.0, g2=0.0, g1=0.0, scenario=None) -> "PriceModel":
        shape = (n_storages,)
        return cls(np.full(shape, f_slope, dtype=float), np.full(shape, g2, dtype=float),
                   np.full(shape, g1, dtype=float), scenario)

    def g_prime(self, p_dc) -> np.ndarray:
        """Discharge marginal cost, storages on axis 0."""
        p_dc = np.asarray(p_dc, dtype=float)
        shape = (-1,) + (1,) * (p_dc.ndim - 1)
        return 2.0 * self.g2.reshape(shape) * p_dc + self.g1.reshape(shape)

    @property
    def g_prime_inf(self) -> np.ndarray:
        # g' is non-decreasing on p_dc >= 0, so the infimum sits at zero discharge
        return self.g1.copy()


@dataclass(frozen=True, eq=False)
class LoadProfile:
    demand: np.ndarray  # N x T

    def __post_init__(self):
        object.__setattr__(self, "demand", _frozen_array(np.atleast_2d(self.demand)))

    @property
    def total(self) -> np.ndarray:
        return self.demand.sum(axis=0)


@dataclass(frozen=True, eq=False)
class NetworkCase:
    horizon: Horizon
    network: Network
    generators: tuple[Generator, ...]
    storages: tuple[StorageDevice, ...]
    prices: PriceModel
    loads: LoadProfile
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "generators", tuple(self.generators))
        object.__setattr__(self, "storages", tuple(self.storages))

    @property
    def T(self) -> int:
        return self.horizon.steps

    @property
    def n_storages(self) -> int:
        return len(self.storages)

    @property
    def n_generators(self) -> int:
        return len(self.generators)

    def replace(self, **changes) -> "NetworkCase":
        import dataclasses

        return dataclasses.replace(self, **changes)


# --------------------------------------------------------------------------- validation


@dataclass(frozen=True)
class Violation:
    code: str
    field: str
    message: str
    severity: str = "error"


def validate_case(case: NetworkCase) -> list[Violation]:
    """Check every instance invariant; never raises.

    Warning-severity entries (the capacity screen) do not make a case invalid,
    see :func:`is_valid`.
    """
    out: list[Violation] = []

    def bad(code, where, msg, severity="error"):
        out.append(Violation(code, where, msg, severity))

    T = case.horizon.steps
    N = case.network.n_buses
    if not (isinstance(T, (int, np.integer)) and T >= 1):
        bad("horizon.steps", "horizon.steps", "horizon must have at least one step")
        return out
    if not case.horizon.dt > 0:
        bad("horizon.dt", "horizon.dt", "step length must be positive")

    net = case.network
    if not 0 <= net.slack_bus < N:
        bad("network.slack", "network.slack_bus", "slack bus out of range")
    for j, ln in enumerate(net.lines):
        where = f"lines[{j}]"
        if not (0 <= ln.from_bus < N and 0 <= ln.to_bus < N) or ln.from_bus == ln.to_bus:
            bad("line.endpoint", where, "line endpoints must be two distinct valid buses")
        if not ln.reactance > 0:
            bad("line.reactance", where + ".reactance", "reactance must be positive")
        if ln.flow_min > ln.flow_max:
            bad("line.flow_bounds", where, "flow_min exceeds flow_max")
    if net.gsf.shape != (net.n_lines, N):
        bad("network.gsf_shape", "network.gsf", "shift factor matrix has wrong shape")
    elif not np.all(np.isfinite(net.gsf)):
        bad("network.disconnected", "network.gsf", "shift factors undefined (disconnected network or bad line data)")
    else:
        if 0 <= net.slack_bus < N and np.any(net.gsf[:, net.slack_bus] != 0.0):
            bad("network.gsf_slack", "network.gsf", "slack column of shift factors must be zero")
        if np.any(np.abs(net.gsf) > 1.0 + 1e-9):
            bad("network.gsf_magnitude", "network.gsf", "shift factor magnitude above one")

    if not case.generators:
        bad("case.no_generator", "generators", "at least one generator is required")
    for k, g in enumerate(case.generators):
        where = f"generators[{k}]"
        if not 0 <= g.bus < N:
            bad("generator.bus", where + ".bus", "generator bus out of range")
        if not 0 <= g.p_min <= g.p_max:
            bad("generator.limits", where, "need 0 <= p_min <= p_max")
        if g.c2 < 0:
            bad("generator.cost_not_convex", where + ".c2", "generator cost not convex")
        if g.ramp_up is not None and g.ramp_up < 0:
            bad("generator.ramp_up", where + ".ramp_up", "ramp_up must be >= 0")
        if g.ramp_down is not None and g.ramp_down > 0:
            bad("generator.ramp_down", where + ".ramp_down", "ramp_down must be <= 0")
        if g.p_max_t is not None:
            if g.p_max_t.shape != (T,):
                bad("generator.p_max_t_shape", where + ".p_max_t", "time-varying p_max must have length T")
            elif np.any(g.p_max_t < g.p_min) or np.any(g.p_max_t > g.p_max):
                bad("generator.p_max_t_range", where + ".p_max_t", "time-varying p_max outside [p_min, p_max]")

    S = case.n_storages
    for i, s in enumerate(case.storages):
        where = f"storages[{i}]"
        if not 0 <= s.bus < N:
            bad("storage.bus", where + ".bus", "storage bus out of range")
        for name in ("ch_max", "dc_max", "e_min", "e_max"):
            if getattr(s, name).shape != (T,):
                bad("storage.shape", f"{where}.{name}", f"{name} must have length T")
        if not (0 < s.eta_ch <= 1):
            bad("storage.eta_ch", where + ".eta_ch", "charging efficiency must lie in (0, 1]")
        if not (0 < s.eta_dc <= 1):
            bad("storage.eta_dc", where + ".eta_dc", "discharging efficiency must lie in (0, 1]")
        if not s.eta_ch * s.eta_dc < 1:
            bad("storage.perfect_round_trip", where, "perfect round-trip efficiency (eta_ch*eta_dc must be < 1)")
        if not 0 <= s.self_discharge < 1:
            bad("storage.self_discharge", where + ".self_discharge", "self-discharge must lie in [0, 1)")
        if np.any(s.ch_max < 0) or np.any(s.dc_max < 0):
            bad("storage.power_limits", where, "power limits must be nonnegative")
        if s.e_min.shape == s.e_max.shape:
            if np.any(s.e_min < 0) or np.any(s.e_min > s.e_max):
                bad("storage.energy_limits", where, "need 0 <= e_min <= e_max")
            if s.e_min.size and not (s.e_min[0] <= s.e0 <= s.e_max[0]):
                bad("storage.e0", where + ".e0", "initial energy outside the first-step energy band")

    pm = case.prices
    for name in ("f_slope", "g2", "g1"):
        if getattr(pm, name).shape != (S,):
            bad("price.shape", f"prices.{name}", f"{name} must have one entry per storage")
    if pm.g2.shape == (S,) and pm.g1.shape == (S,) and pm.f_slope.shape == (S,):
        if np.any(pm.g2 < 0):
            bad("price.discharge_cost_not_convex", "prices.g2", "discharging cost not convex")
        if np.any(pm.g1 < 0):
            bad("price.discharge_cost_decreasing", "prices.g1", "discharging cost must be non-decreasing")
        if pm.scenario is not None:
            for msg in _scenario_sign_errors(pm):
                bad("price.scenario_signs", "prices.scenario", msg)

    D = case.loads.demand
    if D.shape != (N, T):
        bad("loads.shape", "loads.demand", "demand must be N x T")
    elif not np.all(np.isfinite(D)):
        bad("loads.finite", "loads.demand", "demand entries must be finite")
    elif case.generators:
        cap = sum(g.upper(T) for g in case.generators)
        if np.any(cap < D.sum(axis=0)):
            bad("case.capacity", "generators", "peak net load exceeds total capacity", "warning")
    return out


def _scenario_sign_errors(pm: PriceModel) -> list[str]:
    f, g1, g2 = pm.f_slope, pm.g1, pm.g2
    if pm.scenario == 1:
        ok = np.all(f < 0) and np.all(g1 > 0)
        return [] if ok else ["scenario 1 requires f' < 0 and g' > 0"]
    if pm.scenario == 2:
        ok = np.all(f == 0) and np.all(g1 == 0) and np.all(g2 == 0)
        return [] if ok else ["scenario 2 requires f' = 0 and g' = 0"]
    if pm.scenario == 3:
        ok = np.all(f > 0) and np.all(g1 > 0)
        return [] if ok else ["scenario 3 requires f' > 0 and g' > 0"]
    return [f"unknown price scenario {pm.scenario!r}"]


def case_fingerprint(case: NetworkCase) -> str:
    """Stable digest of every numeric field, used to pair solutions with their case."""
    h = hashlib.sha256()

    def feed(*values):
        for v in values:
            arr = np.asarray(v if v is not None else np.nan, dtype=float)
            h.update(repr(arr.shape).encode())
            h.update(np.ascontiguousarray(arr).tobytes())

    feed(case.horizon.steps, case.horizon.dt, case.network.n_buses, case.network.slack_bus)
    for ln in case.network.lines:
        feed(ln.from_bus, ln.to_bus, ln.reactance, ln.flow_min, ln.flow_max)
    for g in case.generators:
        feed(g.bus, g.p_min, g.p_max, g.ramp_up, g.ramp_down, g.c2, g.c1, g.p_max_t)
    for s in case.storages:
        feed(s.bus, s.ch_max, s.dc_max, s.eta_ch, s.eta_dc, s.self_discharge, s.e0, s.e_min, s.e_max, s.e_req)
    feed(case.prices.f_slope, case.prices.g2, case.prices.g1, case.loads.demand)
    return h.hexdigest()[:16]


def is_valid(report: Sequence[Violation]) -> bool:
    return not any(v.severity == "error" for v in report)


class InvalidCaseError(ValueError):
    def __init__(self, violations: Sequence[Violation]):
        self.violations = list(violations)
        lines = "; ".join(f"{v.field}: {v.message}" for v in self.violations if v.severity == "error")
        super().__init__(f"invalid case: {lines}")


def require_valid(case: NetworkCase) -> list[Violation]:
    report = validate_case(case)
    if not is_valid(report):
        raise InvalidCaseError(report)
    return report


# --------------------------------------------------------------------------- storage energy


def _check_lengths(storage: StorageDevice, p_ch, p_dc):
    p_ch = np.asarray(p_ch, dtype=float)
    p_dc = np.asarray(p_dc, dtype=float)
    if p_ch.shape != p_dc.shape or p_ch.ndim != 1:
        raise ValueError(f"schedule length mismatch: {p_ch.shape} vs {p_dc.shape}")
    if storage.ch_max.shape != p_ch.shape:
        raise ValueError(f"schedule length {p_ch.size} does not match device horizon {storage.ch_max.size}")
    return p_ch, p_dc


def energy_trajectory(storage: StorageDevice, p_ch, p_dc, dt: float) -> np.ndarray:
    """Stored energy after each step.

    ``E(t) = xi**t * E0 + sum_{tau<=t} xi**(t-tau) * (eta_ch*p_ch(tau) - p_dc(tau)/eta_dc) * dt``
    with ``xi = 1 - self_discharge``, evaluated as the equivalent one-step
    recursion ``E(t) = xi*E(t-1) + net(t)``.
    """
    p_ch, p_dc = _check_lengths(storage, p_ch, p_dc)
    net = (storage.eta_ch * p_ch - p_dc / storage.eta_dc) * dt
    xi = storage.xi
    out = np.empty_like(net)
    e = storage.e0
    for t in range(net.size):
        e = xi * e + net[t]
        out[t] = e
    return out


def energy_coefficients(storage: StorageDevice, steps: int, dt: float):
    """Matrices ``C_ch, C_dc`` (T x T) and offset ``e_free`` with ``E = e_free + C_ch p_ch - C_dc p_dc``."""
    xi = storage.xi
    t = np.arange(1, steps + 1)
    lag = t[:, None] - t[None, :]
    decay = np.where(lag >= 0, xi ** np.maximum(lag, 0), 0.0)
    c_ch = decay * storage.eta_ch * dt
    c_dc = decay * dt / storage.eta_dc
    e_free = xi ** t * storage.e0
    return c_ch, c_dc, e_free


def net_charge_weights(storage: StorageDevice, steps: int, dt: float):
    """Weights ``(w_ch, w_dc)`` with ``net_charge_lhs = w_ch @ p_ch - w_dc @ p_dc``."""
    decay = storage.xi ** (steps - np.arange(1, steps + 1))
    return decay * storage.eta_ch * dt, decay * dt / storage.eta_dc


def net_charge_lhs(storage: StorageDevice, p_ch, p_dc, dt: float) -> float:
    """Discounted net energy charged over the horizon, compared against ``e_req``."""
    p_ch, p_dc = _check_lengths(storage, p_ch, p_dc)
    w_ch, w_dc = net_charge_weights(storage, p_ch.size, dt)
    return float(w_ch @ p_ch - w_dc @ p_dc)


# --------------------------------------------------------------------------- shift factors


class DisconnectedNetworkError(ValueError):
    pass


def compute_gsf(network: Network) -> np.ndarray:
    """DC power transfer distribution factors, L x N, slack column zero.

    The flow on line j (from -> to) for an injection vector p is ``gsf[j] @ p``,
    with the slack bus absorbing any imbalance.
    """
    N = network.n_buses
    lines = network.lines
    L = len(lines)
    if L == 0:
        return np.zeros((0, N))
    f = np.array([ln.from_bus for ln in lines])
    t = np.array([ln.to_bus for ln in lines])
    b = 1.0 / np.array([ln.reactance for ln in lines], dtype=float)
    inc = np.zeros((L, N))
    inc[np.arange(L), f] = 1.0
    inc[np.arange(L), t] = -1.0
    bbus = inc.T @ (b[:, None] * inc)
    keep = np.array([k for k in range(N) if k != network.slack_bus], dtype=int)
    gsf = np.zeros((L, N))
    if keep.size == 0:
        return gsf
    reduced = bbus[np.ix_(keep, keep)]
    try:
        cond = np.linalg.cond(reduced) if np.all(np.isfinite(reduced)) else np.inf
    except np.linalg.LinAlgError:
        cond = np.inf
    if not np.all(np.isfinite(reduced)) or not np.isfinite(cond) or cond > 1e12:
        raise DisconnectedNetworkError("reduced susceptance matrix is singular; network disconnected")
    x_red = np.linalg.inv(reduced)
    gsf[:, keep] = (b[:, None] * inc[:, keep]) @ x_red
    gsf[np.abs(gsf) < 1e-13] = 0.0
    return gsf
