"""JSON case and solution documents.

Case documents carry ``"format": "edrelax-case/1"``. Storage limits may be a
scalar or a length-T list. Serialization writes a scalar whenever a vector is
constant, so documents produced here round-trip byte-for-byte after parsing.
Unlimited line flows are written as ``null``.
"""

from __future__ import annotations

import json
import math
from typing import Any, Optional, Union

import jsonschema
import numpy as np

from ..model import (
    Generator,
    Horizon,
    Line,
    LoadProfile,
    Network,
    NetworkCase,
    PriceModel,
    StorageDevice,
    require_valid,
)
from ..qp import DispatchSolution, DualSolution
from ..relaxation import LmpForecast

CASE_FORMAT = "edrelax-case/1"
SOLUTION_FORMAT = "edrelax-solution/1"

_num = {"type": "number"}
_opt_num = {"type": ["number", "null"]}
_series = {"oneOf": [_num, {"type": "array", "items": _num, "minItems": 1}]}
_price_series = {"oneOf": [_num, {"type": "array", "items": _num}]}  # [] for storage-free cases
_matrix = {"type": "array", "items": {"type": "array", "items": _num}}

CASE_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["format", "horizon", "buses", "lines", "generators", "storages", "prices", "loads"],
    "properties": {
        "format": {"const": CASE_FORMAT},
        "name": {"type": "string"},
        "horizon": {
            "type": "object", "required": ["steps", "dt"], "additionalProperties": False,
            "properties": {"steps": {"type": "integer", "minimum": 1}, "dt": {"type": "number", "exclusiveMinimum": 0}},
        },
        "buses": {
            "type": "object", "required": ["count"], "additionalProperties": False,
            "properties": {"count": {"type": "integer", "minimum": 1}, "slack": {"type": "integer", "minimum": 0}},
        },
        "lines": {"type": "array", "items": {
            "type": "object", "required": ["from", "to", "reactance"], "additionalProperties": False,
            "properties": {"from": {"type": "integer", "minimum": 0}, "to": {"type": "integer", "minimum": 0},
                           "reactance": _num, "flow_min": _opt_num, "flow_max": _opt_num},
        }},
        "generators": {"type": "array", "items": {
            "type": "object", "required": ["bus", "p_min", "p_max"], "additionalProperties": False,
            "properties": {"bus": {"type": "integer", "minimum": 0}, "p_min": _num, "p_max": _num,
                           "ramp_up": _opt_num, "ramp_down": _opt_num, "c2": _num, "c1": _num,
                           "p_max_t": {"type": ["array", "null"], "items": _num},
                           "kind": {"type": "string"}},
        }},
        "storages": {"type": "array", "items": {
            "type": "object", "additionalProperties": False,
            "required": ["bus", "ch_max", "dc_max", "eta_ch", "eta_dc", "self_discharge", "e0", "e_min", "e_max",
                         "e_req"],
            "properties": {"bus": {"type": "integer", "minimum": 0}, "ch_max": _series, "dc_max": _series,
                           "eta_ch": _num, "eta_dc": _num, "self_discharge": _num, "e0": _num,
                           "e_min": _series, "e_max": _series, "e_req": _num},
        }},
        "prices": {
            "type": "object", "required": ["f_slope", "g2", "g1"], "additionalProperties": False,
            "properties": {"scenario": {"enum": [1, 2, 3, None]}, "f_slope": _price_series,
                           "g2": _price_series, "g1": _price_series},
        },
        "loads": _matrix,
        "forecasts": {
            "type": "object", "required": ["lmp"], "additionalProperties": False,
            "properties": {"lmp": _matrix, "mape": {"type": "number", "minimum": 0}},
        },
    },
    "additionalProperties": False,
}


class CaseFormatError(ValueError):
    """Schema or shape problem; ``path`` is a JSON-pointer-like location."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


def _pointer(parts) -> str:
    return "/" + "/".join(str(p) for p in parts) if parts else "/"


def _schema_check(doc: Any) -> None:
    validator = jsonschema.Draft202012Validator(CASE_SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: (len(e.absolute_path), list(map(str, e.absolute_path))))
    if not errors:
        return
    err = errors[0]
    parts = list(err.absolute_path)
    if err.validator == "required":
        # name the missing member itself
        missing = [p for p in err.validator_value if isinstance(err.instance, dict) and p not in err.instance]
        if missing:
            parts.append(missing[0])
    raise CaseFormatError(_pointer(parts), err.message)


def _vector(value, steps: int, path: str) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        return np.full(steps, float(arr))
    if arr.shape != (steps,):
        raise CaseFormatError(path, f"expected a scalar or {steps} values, got {arr.shape[0]}")
    return arr


def _bound(value, default: float) -> float:
    return default if value is None else float(value)


def parse_document(doc: Union[dict, str, bytes]) -> tuple[NetworkCase, Optional[LmpForecast]]:
    """Case plus the optional forecast section. Raises :class:`CaseFormatError` or ``InvalidCaseError``."""
    if isinstance(doc, (str, bytes)):
        try:
            doc = json.loads(doc)
        except json.JSONDecodeError as exc:
            raise CaseFormatError("/", f"not valid JSON: {exc}") from exc
    _schema_check(doc)
    T = int(doc["horizon"]["steps"])
    horizon = Horizon(T, float(doc["horizon"]["dt"]))
    n = int(doc["buses"]["count"])
    lines = [Line(ln["from"], ln["to"], float(ln["reactance"]), _bound(ln.get("flow_min"), -math.inf),
                  _bound(ln.get("flow_max"), math.inf)) for ln in doc["lines"]]
    network = Network(n, lines, slack_bus=int(doc["buses"].get("slack", 0)))
    gens = []
    for k, g in enumerate(doc["generators"]):
        p_max_t = g.get("p_max_t")
        if p_max_t is not None:
            p_max_t = _vector(p_max_t, T, f"/generators/{k}/p_max_t")
        gens.append(Generator(bus=g["bus"], p_min=float(g["p_min"]), p_max=float(g["p_max"]),
                              ramp_up=g.get("ramp_up"), ramp_down=g.get("ramp_down"), c2=float(g.get("c2", 0.0)),
                              c1=float(g.get("c1", 0.0)), p_max_t=p_max_t, kind=g.get("kind", "thermal")))
    storages = []
    for i, s in enumerate(doc["storages"]):
        kw = {name: _vector(s[name], T, f"/storages/{i}/{name}") for name in ("ch_max", "dc_max", "e_min", "e_max")}
        storages.append(StorageDevice(bus=s["bus"], eta_ch=float(s["eta_ch"]), eta_dc=float(s["eta_dc"]),
                                      self_discharge=float(s["self_discharge"]), e0=float(s["e0"]),
                                      e_req=float(s["e_req"]), **kw))
    S = len(storages)
    pr = doc["prices"]
    prices = PriceModel(*(_vector(pr[name], S, f"/prices/{name}") if S else np.zeros(0)
                          for name in ("f_slope", "g2", "g1")), scenario=pr.get("scenario"))
    demand = np.asarray(doc["loads"], dtype=float)
    if demand.shape != (n, T):
        raise CaseFormatError("/loads", f"expected {n} x {T} demand matrix, got {demand.shape}")
    case = NetworkCase(horizon, network, gens, storages, prices, LoadProfile(demand), name=doc.get("name", ""))
    require_valid(case)
    forecast = None
    if "forecasts" in doc:
        values = np.asarray(doc["forecasts"]["lmp"], dtype=float)
        if values.shape != (n, T):
            raise CaseFormatError("/forecasts/lmp", f"expected {n} x {T} matrix, got {values.shape}")
        forecast = LmpForecast(values, float(doc["forecasts"].get("mape", 0.0)))
    return case, forecast


def parse_case(doc: Union[dict, str, bytes]) -> NetworkCase:
    return parse_document(doc)[0]


def _compact(arr) -> Union[float, list]:
    arr = np.asarray(arr, dtype=float)
    if arr.size and np.all(arr == arr.flat[0]):
        return float(arr.flat[0])
    return arr.tolist()


def _finite_or_none(x: float):
    return None if math.isinf(x) else float(x)


def serialize_case(case: NetworkCase, forecast: Optional[LmpForecast] = None) -> dict:
    doc: dict[str, Any] = {
        "format": CASE_FORMAT,
        "name": case.name,
        "horizon": {"steps": case.horizon.steps, "dt": float(case.horizon.dt)},
        "buses": {"count": case.network.n_buses, "slack": case.network.slack_bus},
        "lines": [{"from": ln.from_bus, "to": ln.to_bus, "reactance": float(ln.reactance),
                   "flow_min": _finite_or_none(ln.flow_min), "flow_max": _finite_or_none(ln.flow_max)}
                  for ln in case.network.lines],
        "generators": [{"bus": g.bus, "p_min": float(g.p_min), "p_max": float(g.p_max),
                        "ramp_up": None if g.ramp_up is None else float(g.ramp_up),
                        "ramp_down": None if g.ramp_down is None else float(g.ramp_down),
                        "c2": float(g.c2), "c1": float(g.c1),
                        "p_max_t": None if g.p_max_t is None else np.asarray(g.p_max_t, dtype=float).tolist(),
                        "kind": g.kind} for g in case.generators],
        "storages": [{"bus": s.bus, "ch_max": _compact(s.ch_max), "dc_max": _compact(s.dc_max),
                      "eta_ch": float(s.eta_ch), "eta_dc": float(s.eta_dc),
                      "self_discharge": float(s.self_discharge), "e0": float(s.e0), "e_min": _compact(s.e_min),
                      "e_max": _compact(s.e_max), "e_req": float(s.e_req)} for s in case.storages],
        "prices": {"scenario": case.prices.scenario,
                   "f_slope": _compact(case.prices.f_slope) if case.n_storages else [],
                   "g2": _compact(case.prices.g2) if case.n_storages else [],
                   "g1": _compact(case.prices.g1) if case.n_storages else []},
        "loads": np.asarray(case.loads.demand, dtype=float).tolist(),
    }
    if forecast is not None:
        doc["forecasts"] = {"lmp": np.asarray(forecast.values, dtype=float).tolist(), "mape": float(forecast.mape)}
    return doc


def dumps_case(case: NetworkCase, forecast: Optional[LmpForecast] = None) -> str:
    return json.dumps(serialize_case(case, forecast), indent=1)


def load_case(path) -> tuple[NetworkCase, Optional[LmpForecast]]:
    with open(path, "rb") as fh:
        return parse_document(fh.read())


def serialize_solution(solution: DispatchSolution, lmp: Optional[np.ndarray] = None) -> dict:
    d = solution.duals
    doc = {
        "format": SOLUTION_FORMAT,
        "fingerprint": solution.fingerprint,
        "status": solution.status,
        "message": solution.message,
        "objective": None if not np.isfinite(solution.objective) else float(solution.objective),
        "iterations": int(solution.iterations),
        "solve_time": float(solution.solve_time),
        "residuals": {k: float(v) for k, v in solution.residuals.items()},
        "primal": {"p_ch": np.asarray(solution.p_ch).tolist(), "p_dc": np.asarray(solution.p_dc).tolist(),
                   "p_g": np.asarray(solution.p_g).tolist(), "energy": np.asarray(solution.energy).tolist()},
        "duals": {name: np.asarray(getattr(d, name)).tolist() for name in DualSolution.NAMES},
    }
    if lmp is not None:
        doc["lmp"] = np.asarray(lmp).tolist()
    return _nan_to_none(doc)


def _nan_to_none(obj):
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _nan_to_none(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_nan_to_none(v) for v in obj]
    return obj


def parse_solution(doc: Union[dict, str, bytes]) -> DispatchSolution:
    if isinstance(doc, (str, bytes)):
        doc = json.loads(doc)
    if doc.get("format") != SOLUTION_FORMAT:
        raise CaseFormatError("/format", f"expected {SOLUTION_FORMAT!r}")

    def arr(v, ndim):
        a = np.asarray(v if v is not None else np.nan, dtype=float)
        return a.reshape((0,) * ndim) if a.size == 0 else a

    pr = doc["primal"]
    duals = DualSolution(**{n: arr(doc["duals"][n], 1 if n in ("lam", "phi") else 2) for n in DualSolution.NAMES})
    obj = doc.get("objective")
    return DispatchSolution(p_ch=arr(pr["p_ch"], 2), p_dc=arr(pr["p_dc"], 2), p_g=arr(pr["p_g"], 2),
                            energy=arr(pr["energy"], 2), duals=duals,
                            objective=float("nan") if obj is None else float(obj), status=doc["status"],
                            residuals=doc.get("residuals", {}), iterations=doc.get("iterations", 0),
                            solve_time=doc.get("solve_time", 0.0), fingerprint=doc.get("fingerprint", ""),
                            message=doc.get("message", ""))


def is_solution_document(doc: dict) -> bool:
    return isinstance(doc, dict) and doc.get("format") == SOLUTION_FORMAT
