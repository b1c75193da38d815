"""Reader for the bus/branch/gen matrices of MATPOWER case files."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np

from ..model import Generator, Line, Network

# column indices (0-based) of the MATPOWER case format, version 2
BUS_I, BUS_TYPE, PD = 0, 1, 2
F_BUS, T_BUS, BR_X, RATE_A, BR_STATUS = 0, 1, 3, 5, 10
GEN_BUS, PMAX, PMIN, GEN_STATUS = 0, 8, 9, 7

REF, PV, PQ = 3, 2, 1


class MatpowerFormatError(ValueError):
    pass


@dataclass
class MatpowerSkeleton:
    network: Network
    generators: list[Generator]
    bus_ids: list[int]  # external MATPOWER bus numbers, position = internal index
    bus_types: np.ndarray
    base_load: np.ndarray  # Pd per bus, MW
    base_mva: float


_ASSIGN = re.compile(r"mpc\.(\w+)\s*=\s*")


def _strip_comment(line: str) -> str:
    pos = line.find("%")
    return line if pos < 0 else line[:pos]


def _read_matrices(text: str) -> tuple[dict[str, np.ndarray], float]:
    mats: dict[str, np.ndarray] = {}
    base_mva = 100.0
    lines = text.splitlines()
    k = 0
    while k < len(lines):
        raw = _strip_comment(lines[k])
        m = _ASSIGN.search(raw)
        if not m:
            k += 1
            continue
        name, rest = m.group(1), raw[m.end():].strip()
        if name == "baseMVA":
            try:
                base_mva = float(rest.rstrip(";").strip())
            except ValueError as exc:
                raise MatpowerFormatError(f"line {k + 1}: bad baseMVA {rest!r}") from exc
            k += 1
            continue
        if not rest.startswith("["):
            k += 1
            continue
        rows: list[list[float]] = []
        body = rest[1:]
        start = k
        while True:
            done = "]" in body
            if done:
                body = body[: body.index("]")]
            for chunk in body.split(";"):
                tokens = chunk.replace(",", " ").split()
                if not tokens:
                    continue
                try:
                    rows.append([float(tok) for tok in tokens])
                except ValueError as exc:
                    raise MatpowerFormatError(f"line {k + 1}: malformed row in mpc.{name}: {chunk.strip()!r}") from exc
                if len(rows[-1]) != len(rows[0]):
                    raise MatpowerFormatError(
                        f"line {k + 1}: row of mpc.{name} has {len(rows[-1])} columns, expected {len(rows[0])}")
            if done:
                break
            k += 1
            if k >= len(lines):
                raise MatpowerFormatError(f"line {start + 1}: unterminated matrix mpc.{name}")
            body = _strip_comment(lines[k])
        mats[name] = np.array(rows, dtype=float)
        k += 1
    return mats, base_mva


def parse_matpower_subset(text: str) -> MatpowerSkeleton:
    """Extract topology, reactances, line ratings and generator limits.

    Reactances stay in p.u. (shift factors are base-independent); ratings and
    generator limits are MW. A zero ``rateA`` means unlimited. Out-of-service
    branches and generators are dropped. Costs and storage come from elsewhere.
    """
    mats, base_mva = _read_matrices(text)
    for name in ("bus", "branch", "gen"):
        if name not in mats:
            raise MatpowerFormatError(f"unrecognized format: mpc.{name} matrix not found")
    bus, branch, gen = mats["bus"], mats["branch"], mats["gen"]
    if bus.shape[1] < 3 or branch.shape[1] < 11 or gen.shape[1] < 10:
        raise MatpowerFormatError("unrecognized format: too few columns in bus/branch/gen")

    ids = [int(b) for b in bus[:, BUS_I]]
    if len(set(ids)) != len(ids):
        raise MatpowerFormatError("inconsistent bus numbering: duplicate bus ids")
    index = {b: k for k, b in enumerate(ids)}
    types = bus[:, BUS_TYPE].astype(int)
    ref = np.flatnonzero(types == REF)
    slack = int(ref[0]) if ref.size else 0

    lines = []
    for row in branch:
        if row[BR_STATUS] == 0:
            continue
        f, t = int(row[F_BUS]), int(row[T_BUS])
        if f not in index or t not in index:
            raise MatpowerFormatError(f"inconsistent bus numbering: branch {f}-{t} references unknown bus")
        rate = row[RATE_A]
        lim = math.inf if rate == 0 else float(rate)
        lines.append(Line(index[f], index[t], float(row[BR_X]), -lim, lim))

    gens = []
    for row in gen:
        if row[GEN_STATUS] <= 0:
            continue
        b = int(row[GEN_BUS])
        if b not in index:
            raise MatpowerFormatError(f"inconsistent bus numbering: generator at unknown bus {b}")
        gens.append(Generator(bus=index[b], p_min=max(float(row[PMIN]), 0.0), p_max=float(row[PMAX])))

    network = Network(len(ids), lines, slack_bus=slack)
    return MatpowerSkeleton(network=network, generators=gens, bus_ids=ids, bus_types=types,
                            base_load=bus[:, PD].copy(), base_mva=base_mva)


def load_case30_text() -> str:
    from importlib.resources import files

    return files("edrelax.casekit").joinpath("data/case30.m").read_text()
