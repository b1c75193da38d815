"""Reference scenarios: the IEEE 30-bus case, the inexactness counterexample, random instances."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..model import (
    NO_NET_CHARGE_REQUIREMENT,
    Generator,
    Horizon,
    Line,
    LoadProfile,
    Network,
    NetworkCase,
    PriceModel,
    StorageDevice,
)
from .matpower import PQ, load_case30_text, parse_matpower_subset

# (p_min MW, p_max MW, ramp_up MW/step, ramp_down MW/step, c2 $/MW^2h, c1 $/MWh) per unit
REFERENCE_UNITS = (
    (20.0, 100.0, 5.0, -5.0, 0.04, 10.0),
    (40.0, 100.0, 5.0, -5.0, 0.01, 20.0),
    (20.0, 80.0, 8.0, -8.0, 0.02, 23.0),
    (20.0, 120.0, 6.0, -6.0, 0.01, 22.0),
    (20.0, 120.0, 6.0, -6.0, 0.01, 10.0),
)
UNIT_BUSES = (1, 13, 22, 23, 27)  # MATPOWER bus numbers
WIND_BUS = 2
SELF_DISCHARGE_PER_HOUR = 0.01


def load_shape(steps: int = 96) -> np.ndarray:
    """Synthetic double-peak daily load shape, peak normalized to 1."""
    hours = (np.arange(steps) + 0.5) * 24.0 / steps
    shape = (0.55 + 0.30 * np.exp(-0.5 * ((hours - 11.0) / 2.5) ** 2)
             + 0.45 * np.exp(-0.5 * ((hours - 19.5) / 2.0) ** 2)
             - 0.08 * np.exp(-0.5 * ((hours - 3.5) / 2.0) ** 2))
    return shape / shape.max()


def wind_shape(steps: int = 96) -> np.ndarray:
    """Synthetic availability (fraction of rating), high at night, anti-correlated with load."""
    hours = (np.arange(steps) + 0.5) * 24.0 / steps
    return np.clip(0.55 + 0.35 * np.cos(2.0 * math.pi * (hours - 3.0) / 24.0)
                   - 0.15 * np.exp(-0.5 * ((hours - 19.5) / 2.0) ** 2), 0.05, 1.0)


def build_ieee30_scenario(*, steps: int = 96, scenario: int = 2, f_slope: float = 0.0, g1: float = 0.0,
                          g2: float = 0.0, wind_capacity: float = 60.0, peak_fraction: float = 0.8,
                          n_storages: int = 50, line_rating_scale: Optional[float] = None) -> NetworkCase:
    """IEEE 30-bus network, the five reference units, wind at bus 2 and 50 storages on the PQ buses.

    The load and wind curves are synthetic (see :func:`load_shape`), and storage
    ratings are artifact defaults (2 MW, 8 MWh, 95 % one-way efficiency).
    """
    skel = parse_matpower_subset(load_case30_text())
    dt = 24.0 / steps
    index = {b: k for k, b in enumerate(skel.bus_ids)}

    gens = [Generator(bus=index[b], p_min=pmin, p_max=pmax, ramp_up=ru, ramp_down=rd, c2=c2, c1=c1)
            for b, (pmin, pmax, ru, rd, c2, c1) in zip(UNIT_BUSES, REFERENCE_UNITS)]
    wind = wind_capacity * wind_shape(steps)
    gens.append(Generator(bus=index[WIND_BUS], p_min=0.0, p_max=wind_capacity, p_max_t=wind, kind="wind"))

    capacity = sum(u[1] for u in REFERENCE_UNITS)
    total = peak_fraction * capacity * load_shape(steps)
    share = skel.base_load / skel.base_load.sum()
    demand = np.outer(share, total)
    # ratings follow the load growth over the stock case
    scale = line_rating_scale if line_rating_scale is not None else total.max() / skel.base_load.sum()
    network = Network(skel.network.n_buses,
                      [Line(ln.from_bus, ln.to_bus, ln.reactance, ln.flow_min * scale, ln.flow_max * scale)
                       for ln in skel.network.lines], slack_bus=skel.network.slack_bus)

    pq = [k for k, t in enumerate(skel.bus_types) if t == PQ]
    # two per PQ bus, the remainder on the most loaded PQ buses
    per_bus = {k: 0 for k in pq}
    order = sorted(pq, key=lambda k: -skel.base_load[k])
    for n in range(n_storages):
        per_bus[pq[n % len(pq)] if n < 2 * len(pq) else order[n - 2 * len(pq)]] += 1
    xi_step = (1.0 - SELF_DISCHARGE_PER_HOUR) ** dt
    storages = []
    for k in pq:
        for _ in range(per_bus[k]):
            storages.append(StorageDevice.broadcast(
                steps, bus=k, ch_max=2.0, dc_max=2.0, eta_ch=0.95, eta_dc=0.95, self_discharge=1.0 - xi_step,
                e0=4.0, e_min=0.0, e_max=8.0, e_req=NO_NET_CHARGE_REQUIREMENT))
    prices = PriceModel.uniform(len(storages), f_slope=f_slope, g2=g2, g1=g1, scenario=scenario)
    return NetworkCase(Horizon(steps, dt), network, gens, storages, prices, LoadProfile(demand),
                       name="ieee30")


def build_counterexample_case(*, steps: int = 3) -> NetworkCase:
    """Small case where A-1 holds (g' = 25 >= f' = 24) but A-2 fails, and the relaxation is inexact.

    The storage starts full and is paid 24 $/MWh to charge while the only unit
    prices energy near 10 $/MWh. Charging therefore requires discharging, and
    doing both at once beats any alternating schedule.
    """
    if not 1 <= steps <= 4:
        raise ValueError("counterexample horizon must be 1..4 steps")
    network = Network(2, [Line(0, 1, 0.1, -200.0, 200.0)], slack_bus=0)
    gen = Generator(bus=0, p_min=0.0, p_max=200.0, c2=0.01, c1=10.0)
    st = StorageDevice.broadcast(steps, bus=1, ch_max=1.0, dc_max=1.0, eta_ch=0.9, eta_dc=0.9,
                                 self_discharge=0.0, e0=5.0, e_min=0.0, e_max=5.0,
                                 e_req=NO_NET_CHARGE_REQUIREMENT)
    prices = PriceModel.uniform(1, f_slope=24.0, g2=0.0, g1=25.0, scenario=3)
    demand = np.zeros((2, steps))
    demand[1] = 50.0
    return NetworkCase(Horizon(steps, 1.0), network, [gen], [st], prices, LoadProfile(demand),
                       name="counterexample")


TARGETS = ("satisfy-a", "satisfy-b", "satisfy-c", "violate-a2", "unconstrained")


class TargetingError(RuntimeError):
    pass


@dataclass(frozen=True)
class ScenarioSpec:
    """Recipe for :func:`generate_random`; ``None`` counts are drawn from the seed.

    ``max_bits`` caps ``n_storages * steps`` so the enumeration oracle stays cheap.
    """

    seed: int
    n_buses: Optional[int] = None  # 1..5
    n_storages: Optional[int] = None  # 1..2
    steps: Optional[int] = None  # 2..6
    scenario: Optional[int] = None  # price scenario 1|2|3
    target: str = "unconstrained"
    load_level: float = 0.55  # mean load over thermal capacity
    wind: Optional[bool] = None
    max_bits: int = 6
    max_tries: int = 60

    def __post_init__(self):
        if self.target not in TARGETS:
            raise ValueError(f"unknown target {self.target!r}; expected one of {TARGETS}")
        if self.n_buses is not None and not 1 <= self.n_buses <= 5:
            raise ValueError("n_buses must be 1..5")
        if self.n_storages is not None and not 0 <= self.n_storages <= 2:
            raise ValueError("n_storages must be 0..2")
        if self.steps is not None and not 1 <= self.steps <= 6:
            raise ValueError("steps must be 1..6")
        if self.scenario not in (None, 1, 2, 3):
            raise ValueError("scenario must be 1, 2 or 3")


def _draw_network(rng: np.random.Generator, n: int) -> Network:
    lines = []
    for b in range(1, n):
        lines.append((int(rng.integers(0, b)), b))
    if n >= 3 and rng.random() < 0.6:
        a, b = rng.choice(n, size=2, replace=False)
        if (min(a, b), max(a, b)) not in {(min(x, y), max(x, y)) for x, y in lines}:
            lines.append((int(a), int(b)))
    out = []
    for f, t in lines:
        lim = math.inf if rng.random() < 0.3 else float(rng.uniform(15.0, 60.0))
        out.append(Line(f, t, float(rng.uniform(0.05, 0.3)), -lim, lim))
    return Network(n, out, slack_bus=0)


def _draw_prices(rng: np.random.Generator, spec: ScenarioSpec, S: int, etas: np.ndarray, c1_min: float,
                 c1_max: float) -> PriceModel:
    target = spec.target
    scen = spec.scenario
    if scen is None:
        choices = {"satisfy-c": (1, 3), "violate-a2": (3,)}.get(target, (1, 2, 3))
        scen = int(rng.choice(choices))
    if target == "satisfy-c" and scen == 2:
        raise TargetingError("scenario 2 prices cannot satisfy C-1 (0 > 0 is false)")
    f = np.zeros(S)
    g1 = np.zeros(S)
    g2 = np.zeros(S)
    if scen == 2:
        return PriceModel(f, g2, g1, 2)
    for i in range(S):
        if scen == 1:
            f[i] = -rng.uniform(0.5, 10.0)
            g1[i] = rng.uniform(0.5, 10.0)
        elif target == "violate-a2":
            f[i] = rng.uniform(c1_max + 2.0, c1_max + 15.0)
            g1[i] = f[i] + rng.uniform(0.0, 5.0)
        elif target == "satisfy-c":
            f[i] = rng.uniform(0.5, 0.9 * c1_min)
            g1[i] = f[i] / etas[i] + rng.uniform(0.5, 10.0)
        elif target in ("satisfy-a", "satisfy-b"):
            f[i] = rng.uniform(0.5, 0.8 * c1_min)
            g1[i] = f[i] + (rng.uniform(0.5, 10.0) if target == "satisfy-b" else rng.choice([0.0, rng.uniform(0, 8)]))
        else:
            f[i] = rng.uniform(0.5, 1.2 * c1_max)
            g1[i] = rng.uniform(0.5, 1.2 * c1_max)
        g2[i] = rng.choice([0.0, rng.uniform(0.0, 0.5)])
    return PriceModel(f, g2, g1, scen)


def _draw_case(rng: np.random.Generator, spec: ScenarioSpec, name: str) -> NetworkCase:
    n = spec.n_buses or int(rng.integers(1, 6))
    S = spec.n_storages if spec.n_storages is not None else int(rng.integers(1, 3))
    if spec.steps is not None:
        T = spec.steps
    else:
        t_max = min(6, spec.max_bits // max(S, 1))
        T = int(rng.integers(2, max(t_max, 2) + 1))
    if S * T > spec.max_bits:
        raise ValueError(f"n_storages * steps = {S * T} exceeds max_bits {spec.max_bits}")
    dt = float(rng.choice([0.25, 0.5, 1.0]))
    network = _draw_network(rng, n)

    n_gen = int(rng.integers(1, 4))
    gens = []
    for _ in range(n_gen):
        p_max = float(rng.uniform(30.0, 90.0))
        ramp = None if rng.random() < 0.5 else float(rng.uniform(0.3, 0.8) * p_max)
        gens.append(Generator(bus=int(rng.integers(0, n)), p_min=float(rng.choice([0.0, rng.uniform(0.0, 10.0)])),
                              p_max=p_max, ramp_up=ramp, ramp_down=None if ramp is None else -ramp,
                              c2=float(rng.uniform(0.005, 0.06)), c1=float(rng.uniform(8.0, 30.0))))
    c1 = np.array([g.c1 for g in gens])
    capacity = sum(g.p_max for g in gens)
    wind = spec.wind if spec.wind is not None else bool(rng.random() < 0.3)
    if wind and spec.target != "satisfy-c":
        cap = float(rng.uniform(10.0, 40.0))
        avail = cap * rng.uniform(0.2, 1.0, size=T)
        gens.append(Generator(bus=int(rng.integers(0, n)), p_min=0.0, p_max=cap, p_max_t=avail, kind="wind"))

    level = spec.load_level * capacity * rng.uniform(0.6, 1.2, size=T)
    share = rng.dirichlet(np.ones(n), size=T).T  # n x T
    demand = share * level[None, :]

    storages = []
    etas = np.zeros(S)
    for i in range(S):
        e_max = float(rng.uniform(5.0, 30.0))
        eta_ch = float(rng.uniform(0.8, 0.98))
        eta_dc = float(rng.uniform(0.8, 0.98))
        etas[i] = eta_ch * eta_dc
        e_min = float(rng.uniform(0.0, 0.2) * e_max)
        e0 = float(rng.uniform(e_min, e_max))
        e_req = NO_NET_CHARGE_REQUIREMENT if rng.random() < 0.7 else -float(rng.uniform(0.0, 0.5) * e0)
        storages.append(StorageDevice.broadcast(
            T, bus=int(rng.integers(0, n)), ch_max=float(rng.uniform(2.0, 15.0)), dc_max=float(rng.uniform(2.0, 15.0)),
            eta_ch=eta_ch, eta_dc=eta_dc, self_discharge=float(rng.choice([0.0, rng.uniform(0.0, 0.02)])),
            e0=e0, e_min=e_min, e_max=e_max, e_req=e_req))
    prices = _draw_prices(rng, spec, S, etas, float(c1.min()), float(c1.max() + 2 * 0.06 * max(g.p_max for g in gens)))
    return NetworkCase(Horizon(T, dt), network, gens, storages, prices, LoadProfile(demand), name=name)


def _meets_target(case: NetworkCase, target: str) -> bool:
    from ..model import is_valid, validate_case
    from ..qp import solve_case
    from ..relaxation import check_posteriori

    if not is_valid(validate_case(case)):
        return False
    sol = solve_case(case)
    if not sol.optimal:
        return False
    if target == "unconstrained":
        return True
    if target == "violate-a2":
        rep = check_posteriori(sol, case, "A")
        return not rep.satisfied2
    return check_posteriori(sol, case, target[-1]).satisfied


def generate_random(spec: ScenarioSpec) -> NetworkCase:
    """Seeded random desk-scale instance honoring ``spec.target``, checked by solving it.

    Draws are repeated from the same seed stream until the relaxed solve is
    optimal and its realized duals meet the target, at most ``spec.max_tries`` times.
    """
    # one stream per target, so suites with equal seeds do not share instances
    rng = np.random.default_rng([spec.seed, TARGETS.index(spec.target)])
    for attempt in range(spec.max_tries):
        case = _draw_case(rng, spec, name=f"random-{spec.seed}-{spec.target}")
        if _meets_target(case, spec.target):
            return case
    raise TargetingError(f"seed {spec.seed}: no instance meeting {spec.target!r} after {spec.max_tries} draws")
