"""``edrelax`` command-line driver.

Exit codes: 0 success/exact, 1 condition or exactness failure, 2 infeasible,
3 solver failure, 4 pattern budget exceeded, 64 usage error, 65 unreadable or
invalid input data, 66 input file missing.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from typing import Optional, Sequence

import numpy as np

from .casekit import io as caseio
from .casekit.scenarios import (
    TARGETS,
    ScenarioSpec,
    TargetingError,
    build_counterexample_case,
    build_ieee30_scenario,
    generate_random,
)
from .model import InvalidCaseError, NetworkCase
from .oracle import DEFAULT_LIMIT, AllPatternsInfeasible, PatternBudgetExceeded, compare, enumerate_patterns
from .qp import INFEASIBLE, OPTIMAL, DispatchSolution, SolverSettings, solve_case
from .relaxation import (
    CHECKERS,
    DEFAULT_EXACTNESS_TOL,
    LmpForecast,
    check_posteriori,
    compute_lmp,
    lmp_lower_bound,
    recommend_group,
    verify_exactness,
)

log = logging.getLogger("edrelax")

EXIT_OK, EXIT_FAIL, EXIT_INFEASIBLE, EXIT_SOLVER, EXIT_BUDGET = 0, 1, 2, 3, 4
EXIT_USAGE, EXIT_DATA, EXIT_NOINPUT = 64, 65, 66

DISPATCH_COLUMNS = ("step", "total_load", "total_wind", "total_p_ch", "total_p_dc", "net_storage_power", "lambda")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on bad usage, which collides with "infeasible"
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _positive(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}")
    if not value > 0:
        raise argparse.ArgumentTypeError(f"must be > 0, got {text}")
    return value


def _nonnegative(text: str) -> float:
    value = float(text)
    if not value >= 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {text}")
    return value


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="edrelax", description="Relaxed storage-concerned economic dispatch with exactness checks.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("solve", help="solve the relaxed model")
    s.add_argument("case")
    s.add_argument("--out", help="solution JSON path, '-' for stdout")
    s.add_argument("--csv", help="dispatch CSV path, '-' for stdout")
    s.add_argument("--primal-tol", type=_positive, default=1e-6)
    s.add_argument("--dual-tol", type=_positive, default=1e-6)
    s.add_argument("--backend", choices=("clarabel", "ipm"), default="clarabel")

    c = sub.add_parser("check", help="check Conditions A/B/C")
    c.add_argument("case")
    c.add_argument("--group", choices=("a", "b", "c", "auto"), default="auto")
    c.add_argument("--forecast", help="CSV with header bus,step,lmp_forecast")
    c.add_argument("--mape", type=_nonnegative, default=None)
    c.add_argument("--posteriori", action="store_true", help="use realized LMPs from a fresh solve")
    c.add_argument("--out", help="report JSON path (default stdout)")

    v = sub.add_parser("verify", help="max p_ch*p_dc of a solution or a fresh solve")
    v.add_argument("path", help="case JSON or solution JSON")
    v.add_argument("--tol", type=_positive, default=DEFAULT_EXACTNESS_TOL)
    v.add_argument("--out", help="report JSON path (default stdout)")

    o = sub.add_parser("oracle", help="compare against complementarity-pattern enumeration")
    o.add_argument("case")
    o.add_argument("--limit", type=int, default=DEFAULT_LIMIT)
    o.add_argument("--tol", type=_positive, default=1e-6, help="relative gap tolerance")
    o.add_argument("--table", action="store_true", help="include the per-pattern objective table")
    o.add_argument("--out", help="report JSON path (default stdout)")

    w = sub.add_parser("sweep", help="randomized instances: conditions, exactness, oracle gap")
    w.add_argument("--instances", type=int, required=True)
    w.add_argument("--seed", type=int, required=True)
    w.add_argument("--target", choices=TARGETS, default="unconstrained")
    w.add_argument("--oracle-limit", type=int, default=2 ** 8)
    w.add_argument("--out", help="aggregate CSV path (default stdout)")

    g = sub.add_parser("gen", help="write a reference case")
    g.add_argument("which", choices=("ieee30", "counterexample", "random"))
    g.add_argument("--steps", type=int)
    g.add_argument("--seed", type=int, default=0, help="random only")
    g.add_argument("--target", choices=TARGETS, default="unconstrained", help="random only")
    g.add_argument("--out", help="case JSON path (default stdout)")
    return p


def _emit(text: str, path: Optional[str]) -> None:
    if path in (None, "-"):
        sys.stdout.write(text if text.endswith("\n") else text + "\n")
        return
    with open(path, "w", newline="") as fh:
        fh.write(text)


def _dump(doc) -> str:
    return json.dumps(doc, indent=1) + "\n"


def _read_json(path: str):
    with open(path, "rb") as fh:
        raw = fh.read()
    try:
        return json.loads(raw)
    except json.JSONDecodeError as exc:
        raise caseio.CaseFormatError("/", f"not valid JSON: {exc}") from exc


def _load(path: str) -> tuple[NetworkCase, Optional[LmpForecast]]:
    return caseio.parse_document(_read_json(path))


def _exit_for_status(sol: DispatchSolution) -> int:
    if sol.status == OPTIMAL:
        return EXIT_OK
    if sol.status == INFEASIBLE:
        return EXIT_INFEASIBLE
    return EXIT_SOLVER


def _report_failure(sol: DispatchSolution) -> None:
    if sol.status == INFEASIBLE:
        print(f"infeasible: {sol.message}", file=sys.stderr)
    else:
        print(f"solver failure ({sol.status}): {sol.message}", file=sys.stderr)


def dispatch_rows(case: NetworkCase, sol: DispatchSolution) -> list[list]:
    """Per-step totals; ``net_storage_power`` is discharge minus charge (injection into the grid)."""
    wind = [k for k, g in enumerate(case.generators) if g.kind == "wind"]
    total_wind = sol.p_g[wind].sum(axis=0) if wind else np.zeros(case.T)
    ch = sol.p_ch.sum(axis=0) if case.n_storages else np.zeros(case.T)
    dc = sol.p_dc.sum(axis=0) if case.n_storages else np.zeros(case.T)
    load = case.loads.total
    return [[t, float(load[t]), float(total_wind[t]), float(ch[t]), float(dc[t]), float(dc[t] - ch[t]),
             float(sol.duals.lam[t])] for t in range(case.T)]


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def cmd_solve(args) -> int:
    case, _ = _load(args.case)
    settings = SolverSettings(primal_tol=args.primal_tol, dual_tol=args.dual_tol, backend=args.backend)
    sol = solve_case(case, settings)
    lmp = compute_lmp(sol, case.network).values if sol.optimal else None
    if args.out:
        _emit(_dump(caseio.serialize_solution(sol, lmp)), args.out)
    if sol.optimal:
        if args.csv:
            _emit(_csv_text(DISPATCH_COLUMNS, dispatch_rows(case, sol)), args.csv)
        print(f"optimal: objective {sol.objective:.6f}, {sol.iterations} iterations, {sol.solve_time:.2f} s",
              file=sys.stderr)
    else:
        _report_failure(sol)
    return _exit_for_status(sol)


def read_forecast_csv(path: str, n_buses: int, steps: int) -> np.ndarray:
    """N x T forecast from ``bus,step,lmp_forecast`` rows (0-based); missing entries are NaN."""
    values = np.full((n_buses, steps), np.nan)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"bus", "step", "lmp_forecast"} <= set(reader.fieldnames):
            raise caseio.CaseFormatError(path, "forecast CSV needs header bus,step,lmp_forecast")
        for lineno, row in enumerate(reader, start=2):
            try:
                b, t, v = int(row["bus"]), int(row["step"]), float(row["lmp_forecast"])
            except (TypeError, ValueError) as exc:
                raise caseio.CaseFormatError(f"{path}:{lineno}", f"bad forecast row: {exc}") from exc
            if not (0 <= b < n_buses and 0 <= t < steps):
                raise caseio.CaseFormatError(f"{path}:{lineno}", f"bus {b} / step {t} out of range")
            values[b, t] = v
    return values


def cmd_check(args) -> int:
    case, doc_forecast = _load(args.case)
    if args.posteriori:
        sol = solve_case(case)
        if not sol.optimal:
            _report_failure(sol)
            return _exit_for_status(sol)
        ref = compute_lmp(sol, case.network)
        p_dc = sol.p_dc
    else:
        if args.forecast:
            values = read_forecast_csv(args.forecast, case.network.n_buses, case.T)
            mape = args.mape if args.mape is not None else 0.0
        elif doc_forecast is not None:
            values = doc_forecast.values
            mape = args.mape if args.mape is not None else doc_forecast.mape
        else:
            raise UsageError("a-priori check needs --forecast (or a forecasts section in the case); "
                             "use --posteriori to check realized prices")
        buses = sorted({st.bus for st in case.storages})
        if buses and np.any(np.isnan(values[buses])):
            raise caseio.CaseFormatError(args.forecast or "/forecasts", "forecast missing at a storage bus")
        ref = LmpForecast(values, mape)
        bound = lmp_lower_bound(ref)
        for b in buses:
            print(f"bus {b}: forecast min {np.nanmin(values[b]):.6g} -> lower bound min {np.nanmin(bound[b]):.6g}"
                  f" (mape {mape:g})", file=sys.stderr)
        p_dc = None

    if args.group == "auto":
        rec = recommend_group(ref, case.prices, case.storages, p_dc=p_dc)
        doc = {"recommended": rec.group, "rationale": rec.rationale,
               "reports": {g: r.to_dict() for g, r in rec.reports.items()}}
        print(f"recommended group: {rec.group or 'none'} ({rec.rationale})", file=sys.stderr)
        ok = rec.group is not None
    else:
        rep = CHECKERS[args.group.upper()](case.prices, case.storages, ref, p_dc=p_dc)
        doc = rep.to_dict()
        for name, i, t, margin in rep.failures()[:20]:
            print(f"{name} fails at storage {i}, step {t}: margin {margin:.6g}", file=sys.stderr)
        print(f"conditions {rep.group}: {'satisfied' if rep.satisfied else 'violated'}", file=sys.stderr)
        ok = rep.satisfied
    _emit(_dump(doc), args.out)
    return EXIT_OK if ok else EXIT_FAIL


def cmd_verify(args) -> int:
    doc = _read_json(args.path)
    if caseio.is_solution_document(doc):
        sol = caseio.parse_solution(doc)
        if sol.status != OPTIMAL:
            print(f"solution status {sol.status}; exactness is measured on the stored schedule anyway",
                  file=sys.stderr)
    else:
        case, _ = caseio.parse_document(doc)
        sol = solve_case(case)
        if not sol.optimal:
            _report_failure(sol)
            return _exit_for_status(sol)
    rep = verify_exactness(sol, args.tol)
    _emit(_dump(rep.to_dict()), args.out)
    for i, t, prod in rep.violations[:20]:
        print(f"simultaneous charge/discharge: storage {i}, step {t}, p_ch*p_dc = {prod:.6g}", file=sys.stderr)
    print(f"max p_ch*p_dc = {rep.max_product:.3e} ({'exact' if rep.exact else 'not exact'})", file=sys.stderr)
    return EXIT_OK if rep.exact else EXIT_FAIL


def cmd_oracle(args) -> int:
    case, _ = _load(args.case)
    bits = case.n_storages * case.T
    if bits > 62 or 2 ** bits > args.limit:
        print(f"pattern budget exceeded: 2^{bits} patterns, limit {args.limit}", file=sys.stderr)
        return EXIT_BUDGET
    sol = solve_case(case)
    if not sol.optimal:
        _report_failure(sol)
        return _exit_for_status(sol)
    try:
        res = enumerate_patterns(case, limit=args.limit, keep_table=args.table)
    except AllPatternsInfeasible as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    cmp = compare(sol, res, tol=args.tol)
    doc = {"relaxed_objective": sol.objective, "oracle": res.to_dict(), "comparison": cmp.to_dict()}
    _emit(_dump(doc), args.out)
    print(f"{res.n_patterns} patterns ({res.n_feasible} feasible, {res.n_pruned} pruned); "
          f"gap {cmp.gap:.6g} ({cmp.rel_gap:.3e} relative); {'exact' if cmp.exact else 'not exact'}",
          file=sys.stderr)
    return EXIT_OK if cmp.exact else EXIT_FAIL


SWEEP_COLUMNS = ("instance", "seed", "buses", "storages", "steps", "scenario", "a_satisfied", "b_satisfied",
                 "c_satisfied", "max_product", "exact", "oracle_gap", "oracle_rel_gap")


def _sweep_one(seed: int, target: str, oracle_limit: int) -> list:
    case = generate_random(ScenarioSpec(seed=seed, target=target))
    sol = solve_case(case)
    verdicts = [check_posteriori(sol, case, g).satisfied for g in "ABC"]
    ex = verify_exactness(sol)
    gap = rel = ""
    exact = ex.exact
    if 2 ** (case.n_storages * case.T) <= oracle_limit:
        cmp = compare(sol, enumerate_patterns(case, limit=oracle_limit))
        gap, rel, exact = cmp.gap, cmp.rel_gap, cmp.exact
    return [seed, case.network.n_buses, case.n_storages, case.T, case.prices.scenario, *verdicts,
            ex.max_product, exact, gap, rel]


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("EDRELAX_THREADS", "1")))
    except ValueError:
        return 1


def cmd_sweep(args) -> int:
    if args.instances < 0:
        raise UsageError("--instances must be >= 0")
    seeds = [args.seed + k for k in range(args.instances)]
    workers = _threads()
    try:
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                rows = list(pool.map(lambda s: _sweep_one(s, args.target, args.oracle_limit), seeds))
        else:
            rows = [_sweep_one(s, args.target, args.oracle_limit) for s in seeds]
    except TargetingError as exc:
        print(f"generation failed: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    rows = [[k, *r] for k, r in enumerate(rows)]
    _emit(_csv_text(SWEEP_COLUMNS, rows), args.out)
    theorem_ok = True
    parts = []
    for g, col in zip("ABC", (6, 7, 8)):
        sel = [r for r in rows if r[col]]
        n_exact = sum(bool(r[10]) for r in sel)
        theorem_ok &= n_exact == len(sel)
        parts.append(f"{g} {n_exact}/{len(sel)}" + (f" ({100.0 * n_exact / len(sel):.0f}%)" if sel else ""))
    total_exact = sum(bool(r[10]) for r in rows)
    print(f"exact per satisfied group: {', '.join(parts)}; overall {total_exact}/{len(rows)} exact",
          file=sys.stderr)
    return EXIT_OK if theorem_ok else EXIT_FAIL


def cmd_gen(args) -> int:
    if args.which == "ieee30":
        case = build_ieee30_scenario(steps=args.steps or 96)
    elif args.which == "counterexample":
        case = build_counterexample_case(steps=args.steps or 3)
    else:
        case = generate_random(ScenarioSpec(seed=args.seed, target=args.target, steps=args.steps))
    _emit(caseio.dumps_case(case) + "\n", args.out)
    return EXIT_OK


COMMANDS = {"solve": cmd_solve, "check": cmd_check, "verify": cmd_verify, "oracle": cmd_oracle,
            "sweep": cmd_sweep, "gen": cmd_gen}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"edrelax: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"edrelax: error: {exc}", file=sys.stderr)
        return EXIT_NOINPUT
    except PatternBudgetExceeded as exc:
        print(f"edrelax: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    except (caseio.CaseFormatError, InvalidCaseError, ValueError) as exc:
        print(f"edrelax: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"edrelax: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
