"""Exactness certificates for the relaxed dispatch: LMPs, Conditions A/B/C, proof identities.

Every condition is bus-local: storage ``i`` is compared against the LMP (or the
forecast lower bound) at its own bus. Margins are reported per storage and time
step as ``S x T`` arrays, positive meaning "on the safe side".

Condition summary (``g'_inf`` is the discharge marginal cost at zero output)::

    A-1  g'_inf - f'           >= 0        A-2  LMP - f'  > 0
    B-1  g'_inf - f'           >  0        B-2  LMP - f' >= 0
    C-1  g'_inf - f'/eta_cycle >  0        C-2  LMP      >= 0
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .model import Network, PriceModel, StorageDevice
from .qp import DispatchSolution, bus_lmp

A_PRIORI = "a_priori"
A_POSTERIORI = "a_posteriori"
DEFAULT_STRICT_EPS = 1e-9
DEFAULT_EXACTNESS_TOL = 1e-7  # MW^2


@dataclass(frozen=True, eq=False)
class LmpSeries:
    values: np.ndarray  # N x T, $/MWh

    def at(self, bus: int) -> np.ndarray:
        return self.values[bus]


@dataclass(frozen=True, eq=False)
class LmpForecast:
    values: np.ndarray  # N x T, $/MWh
    mape: float = 0.0

    def __post_init__(self):
        if not self.mape >= 0.0:
            raise ValueError(f"mape must be >= 0, got {self.mape}")
        object.__setattr__(self, "values", np.atleast_2d(np.asarray(self.values, dtype=float)))


def compute_lmp(solution: DispatchSolution, network: Network) -> LmpSeries:
    return LmpSeries(bus_lmp(solution.duals, network.gsf))


def lmp_lower_bound(forecast: LmpForecast) -> np.ndarray:
    """Three-sigma lower bound with MAPE standing in for the relative standard deviation.

    ``forecast - 3*mape*|forecast|``, so negative forecasts move down as well.
    """
    f = np.asarray(forecast.values, dtype=float)
    return f - 3.0 * forecast.mape * np.abs(f)


LmpRef = Union[LmpSeries, LmpForecast, np.ndarray]


def _reference(lmp_ref: LmpRef, mode: Optional[str]) -> tuple[np.ndarray, str]:
    if isinstance(lmp_ref, LmpForecast):
        return lmp_lower_bound(lmp_ref), mode or A_PRIORI
    if isinstance(lmp_ref, LmpSeries):
        return np.asarray(lmp_ref.values, dtype=float), mode or A_POSTERIORI
    return np.atleast_2d(np.asarray(lmp_ref, dtype=float)), mode or A_POSTERIORI


def _at_storages(ref: np.ndarray, storages: Sequence[StorageDevice]) -> np.ndarray:
    if not storages:
        return np.zeros((0, ref.shape[1]))
    return np.vstack([ref[st.bus] for st in storages])


@dataclass
class ConditionReport:
    """Verdicts of one condition group, margins ``S x T``.

    ``margin1``/``margin2`` belong to the first and second inequality of the
    group. ``strict1``/``strict2`` record which of them must hold strictly.
    ``realized_margin1`` is informational (a-posteriori only): the first margin
    re-evaluated with ``g'`` at the realized discharge.
    """

    group: str
    mode: str
    margin1: np.ndarray
    margin2: np.ndarray
    strict1: bool
    strict2: bool
    strict_eps: float = DEFAULT_STRICT_EPS
    nonstrict_tol: float = 0.0
    realized_margin1: Optional[np.ndarray] = None

    def _ok(self, margin: np.ndarray, strict: bool) -> np.ndarray:
        return margin > self.strict_eps if strict else margin >= -self.nonstrict_tol

    @property
    def ok1(self) -> np.ndarray:
        return self._ok(self.margin1, self.strict1)

    @property
    def ok2(self) -> np.ndarray:
        return self._ok(self.margin2, self.strict2)

    @property
    def satisfied1(self) -> bool:
        return bool(np.all(self.ok1))

    @property
    def satisfied2(self) -> bool:
        return bool(np.all(self.ok2))

    @property
    def satisfied(self) -> bool:
        return self.satisfied1 and self.satisfied2

    def failures(self) -> list[tuple[str, int, int, float]]:
        """``(condition, storage, step, margin)`` for every failing entry."""
        out = []
        for k, (ok, margin) in enumerate(((self.ok1, self.margin1), (self.ok2, self.margin2)), start=1):
            for i, t in zip(*np.nonzero(~ok)):
                out.append((f"{self.group}-{k}", int(i), int(t), float(margin[i, t])))
        return out

    def to_dict(self) -> dict:
        def minimum(a):
            return float(a.min()) if a.size else None

        d = {
            "group": self.group,
            "mode": self.mode,
            "satisfied": self.satisfied,
            "conditions": {
                f"{self.group}-1": {"strict": self.strict1, "satisfied": self.satisfied1,
                                    "min_margin": minimum(self.margin1), "margin": self.margin1.tolist()},
                f"{self.group}-2": {"strict": self.strict2, "satisfied": self.satisfied2,
                                    "min_margin": minimum(self.margin2), "margin": self.margin2.tolist()},
            },
            "strict_eps": self.strict_eps,
            "nonstrict_tol": self.nonstrict_tol,
            "failures": [list(f) for f in self.failures()],
        }
        if self.realized_margin1 is not None:
            d["conditions"][f"{self.group}-1"]["realized_margin"] = self.realized_margin1.tolist()
        return d


def _report(group, prices, storages, lmp_ref, mode, p_dc, strict_eps, nonstrict_tol, first, second, strict):
    ref, mode = _reference(lmp_ref, mode)
    S = len(storages)
    T = ref.shape[1]
    f = np.asarray(prices.f_slope, dtype=float)[:S, None]
    g_inf = np.asarray(prices.g_prime_inf, dtype=float)[:S, None]
    eta_cycle = np.array([st.eta_cycle for st in storages], dtype=float).reshape(S, 1)
    lmp = _at_storages(ref, storages)
    m1 = np.broadcast_to(first(g_inf, f, eta_cycle), (S, T)).copy()
    m2 = second(lmp, f)
    realized = None
    if p_dc is not None and mode == A_POSTERIORI:
        realized = first(prices.g_prime(np.asarray(p_dc, dtype=float).reshape(S, T)), f, eta_cycle)
    return ConditionReport(group, mode, m1, m2, strict[0], strict[1], strict_eps, nonstrict_tol, realized)


def check_conditions_a(prices: PriceModel, storages: Sequence[StorageDevice], lmp_ref: LmpRef, *,
                       mode: Optional[str] = None, p_dc=None, strict_eps: float = DEFAULT_STRICT_EPS,
                       nonstrict_tol: float = 0.0) -> ConditionReport:
    """A-1: ``g'_inf >= f'``; A-2: ``f' < LMP`` at the storage bus for every step."""
    return _report("A", prices, storages, lmp_ref, mode, p_dc, strict_eps, nonstrict_tol,
                   lambda g, f, eta: g - f, lambda lmp, f: lmp - f, (False, True))


def check_conditions_b(prices: PriceModel, storages: Sequence[StorageDevice], lmp_ref: LmpRef, *,
                       mode: Optional[str] = None, p_dc=None, strict_eps: float = DEFAULT_STRICT_EPS,
                       nonstrict_tol: float = 0.0) -> ConditionReport:
    """B-1: ``g'_inf > f'``; B-2: ``f' <= LMP``."""
    return _report("B", prices, storages, lmp_ref, mode, p_dc, strict_eps, nonstrict_tol,
                   lambda g, f, eta: g - f, lambda lmp, f: lmp - f, (True, False))


def check_conditions_c(prices: PriceModel, storages: Sequence[StorageDevice], lmp_ref: LmpRef, *,
                       mode: Optional[str] = None, p_dc=None, strict_eps: float = DEFAULT_STRICT_EPS,
                       nonstrict_tol: float = 0.0) -> ConditionReport:
    """C-1: ``g'_inf > f'/eta_cycle``; C-2: ``LMP >= 0``."""
    for st in storages:
        if not st.eta_cycle < 1.0:
            raise ValueError("Conditions C need a round-trip efficiency below one")
    return _report("C", prices, storages, lmp_ref, mode, p_dc, strict_eps, nonstrict_tol,
                   lambda g, f, eta: g - f / eta, lambda lmp, f: lmp + 0.0 * f, (True, False))


CHECKERS = {"A": check_conditions_a, "B": check_conditions_b, "C": check_conditions_c}


def check_posteriori(solution: DispatchSolution, case, group: str, **kw) -> ConditionReport:
    """Check one group against the realized duals of a solved case."""
    lmp = compute_lmp(solution, case.network)
    return CHECKERS[group.upper()](case.prices, case.storages, lmp, mode=A_POSTERIORI, p_dc=solution.p_dc, **kw)


@dataclass
class Recommendation:
    group: Optional[str]
    rationale: str
    reports: dict = field(default_factory=dict)


def recommend_group(forecast: LmpRef, prices: PriceModel, storages: Sequence[StorageDevice], *,
                    strict_eps: float = DEFAULT_STRICT_EPS, p_dc=None) -> Recommendation:
    """Pick a condition group from a forecast: C for nonnegative prices, else A, else B.

    B is offered only when A fails purely because ``f'`` equals the price bound
    at some entries (the case B admits and A does not). Realized LMPs
    (:class:`LmpSeries`) are accepted too and give an a-posteriori choice.
    """
    reports = {g: fn(prices, storages, forecast, strict_eps=strict_eps, p_dc=p_dc) for g, fn in CHECKERS.items()}
    a, b, c = reports["A"], reports["B"], reports["C"]
    if not storages:
        return Recommendation("C", "no storage devices; every group holds vacuously", reports)
    bound = _at_storages(_reference(forecast, None)[0], storages)
    lo = float(bound.min())
    if c.satisfied:
        return Recommendation("C", f"price lower bound nonnegative (min {lo:.4g}) and C-1 holds "
                                   f"(min margin {c.margin1.min():.4g})", reports)
    why_not_c = (f"C-2 fails: price lower bound reaches {lo:.4g}" if not c.satisfied2
                 else f"C-1 fails: min margin {c.margin1.min():.4g}")
    if a.satisfied:
        return Recommendation("A", f"{why_not_c}; A holds with min A-2 margin {a.margin2.min():.4g}", reports)
    only_ties = a.satisfied1 and bool(np.all(a.ok2 | (np.abs(a.margin2) <= strict_eps)))
    if b.satisfied and only_ties:
        return Recommendation("B", f"{why_not_c}; A-2 fails only where f' equals the price bound, B holds",
                              reports)
    return Recommendation(None, f"{why_not_c}; A and B fail as well, verify exactness a-posteriori", reports)


@dataclass
class ExactnessReport:
    max_product: float
    violations: list[tuple[int, int, float]]  # (storage, step, p_ch*p_dc)
    tol: float
    oracle_gap: Optional[float] = None

    @property
    def exact(self) -> bool:
        return self.max_product <= self.tol

    def to_dict(self) -> dict:
        return {"exact": self.exact, "max_product": self.max_product, "tol": self.tol,
                "violations": [list(v) for v in self.violations], "oracle_gap": self.oracle_gap}


def verify_exactness(solution: DispatchSolution, tol: float = DEFAULT_EXACTNESS_TOL) -> ExactnessReport:
    prod = np.asarray(solution.p_ch, dtype=float) * np.asarray(solution.p_dc, dtype=float)
    # interior-point iterates may sit a hair below zero
    prod = np.maximum(prod, 0.0)
    max_product = float(prod.max(initial=0.0))
    viol = [(int(i), int(t), float(prod[i, t])) for i, t in zip(*np.nonzero(prod > tol))]
    viol.sort(key=lambda v: -v[2])
    return ExactnessReport(max_product, viol, tol)


def proof_identity_b(r_pch, r_pdc, eta_ch, eta_dc, gamma, g_prime, f_prime, alpha2, alpha4, dt):
    """Residual of adding the two storage stationarity conditions.

    Returns ``(1/eta_dc - eta_ch)*Gamma*dt + g' - f' + alpha2 + alpha4 - (r_pdc + r_pch)``,
    which vanishes identically when ``alpha1 = alpha3 = 0``. Otherwise it equals
    ``alpha1 + alpha3``.
    """
    lhs = (1.0 / np.asarray(eta_dc) - np.asarray(eta_ch)) * gamma * dt + g_prime - f_prime + alpha2 + alpha4
    return lhs - (np.asarray(r_pdc) + np.asarray(r_pch))


def proof_identity_c(r_pch, r_pdc, eta_ch, eta_dc, gamma, g_prime, f_prime, alpha2, alpha4, dt, lmp):
    """Residual of ``eta_cycle * r_pdc + r_pch`` against its closed form.

    ``gamma`` and ``dt`` cancel in the combination and are accepted for a
    uniform signature.
    """
    eta_cycle = np.asarray(eta_ch) * np.asarray(eta_dc)
    lhs = c_bracket(g_prime, f_prime, eta_cycle, lmp) + alpha2 + eta_cycle * alpha4
    return lhs - (eta_cycle * np.asarray(r_pdc) + np.asarray(r_pch))


def c_bracket(g_prime, f_prime, eta_cycle, lmp):
    """``(eta_cycle*g' - f') + (1 - eta_cycle)*LMP``."""
    return (eta_cycle * np.asarray(g_prime) - f_prime) + (1.0 - eta_cycle) * np.asarray(lmp)


def c_contradiction(g_prime, f_prime, eta_cycle, lmp) -> np.ndarray:
    """True where simultaneous charging and discharging is ruled out.

    With ``alpha1 = alpha3 = 0`` stationarity forces
    ``alpha2 + eta_cycle*alpha4 = -bracket``; a positive bracket would need a
    negative multiplier.
    """
    return c_bracket(g_prime, f_prime, eta_cycle, lmp) > 0.0


def c_contradiction_verdict(g_prime, f_prime, eta_cycle, lmp) -> str:
    if np.all(c_contradiction(g_prime, f_prime, eta_cycle, lmp)):
        return "simultaneity infeasible"
    return "no contradiction derivable"
