"""Command-line front end: ``global-acopf solve|bounds|lift|report|perfprofile``.

The result JSON written by ``solve`` is the single source of truth; the
tables printed by ``solve`` and ``report`` are derived from it.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import click
import numpy as np

from . import __version__
from . import convex_engine as ce
from .fbb import TRACE_CUTS, BudgetExceeded, FbbError, GlobalResult, brute_force_solve, fbb_solve
from .fslp import FslpError
from .grid_model import CaseError, load_case
from .lifting import DEFAULT_RHO, PENALTY_FORMS, build_lcqp, dump_json, penalty_value, recover_voltages
from .spectral import ModelError, lift_lcqp

log = logging.getLogger(__name__)

EXIT_OK, EXIT_ERROR, EXIT_LIMIT = 0, 1, 2
AC_RESIDUAL_WARN = 1e-4  # p.u.
TIMING_FIELDS = ("timings", "ub_time", "psdp_time", "total_time")
REPORT_COLUMNS = ("ID", "Gap", "Aux", "UB", "P-SDP", "CPU", "BB Nodes")
RESULT_KEYS = ("case_id", "objective", "lower_bound", "gap", "nodes", "fslp_restarts", "status", "voltages",
               "rank_ratio", "penalty_value", "timings")


# ------------------------------------------------------------------ reports


@dataclass
class SolveReport:
    case_id: str
    opt: float
    cont: float
    gap_pct: float
    aux: int
    ub_time: float
    psdp_time: float
    total_time: float
    bb_nodes: int
    solved: bool = True


def gap_pct(opt: float, cont: float) -> float:
    """|opt - cont| / |opt| * 100 (root gap in percent)."""
    if math.isnan(opt) or math.isnan(cont):
        return math.nan
    if opt == 0:
        return 0.0 if cont == 0 else math.inf
    return abs(opt - cont) / abs(opt) * 100.0


def aux_count(r: int, n_lines: int) -> int:
    """Auxiliary variables: r s-variables, r t-variables and four flow surrogates per line."""
    return 2 * r + 4 * n_lines


def result_to_json(case_id: str, res: GlobalResult, r: int, n_lines: int, algorithm: str) -> dict:
    volt = res.voltage
    voltages = None
    rank_ratio = None
    residuals = None
    if volt is not None:
        voltages = {"vd": volt.v_d.tolist(), "vq": volt.v_q.tolist(), "vm": volt.magnitude.tolist(),
                    "va_deg": volt.angle_deg.tolist()}
        rank_ratio = volt.rank_ratio
        residuals = volt.residuals
    return {
        "case_id": case_id,
        "algorithm": algorithm,
        "status": res.status,
        "objective": res.v_star,
        "lower_bound": res.lb,
        "gap": res.gap_abs,
        "epsilon": res.epsilon,
        "root_bound": res.root_bound,
        "nodes": res.nodes_explored,
        "fslp_restarts": res.fslp_restarts,
        "r": r,
        "aux": aux_count(r, n_lines),
        "rank_ratio": rank_ratio,
        "penalty_value": None,
        "residuals": residuals,
        "voltages": voltages,
        "timings": res.timings,
    }


def report_from_json(doc: dict, source: str = "<json>") -> SolveReport:
    missing = [k for k in ("case_id", "objective", "status", "nodes", "timings") if k not in doc]
    if missing:
        raise click.ClickException(f"{source}: not a result file (missing {', '.join(missing)})")
    t = doc.get("timings") or {}
    opt = _num(doc["objective"])
    cont = _num(doc.get("root_bound", doc.get("lower_bound")))
    return SolveReport(case_id=str(doc["case_id"]), opt=opt, cont=cont, gap_pct=gap_pct(opt, cont),
                       aux=int(doc.get("aux", 0)), ub_time=float(t.get("fslp", 0.0)),
                       psdp_time=float(t.get("root", 0.0)), total_time=float(t.get("total", 0.0)),
                       bb_nodes=int(doc["nodes"]), solved=doc["status"] == "Proved")


def _num(v) -> float:
    return math.nan if v is None else float(v)


def report_rows(reports: Sequence[SolveReport]) -> list[list[str]]:
    rows = []
    for rep in reports:
        cpu = f"{rep.total_time:.2f}" if rep.solved else "-"
        gap = f"{rep.gap_pct:.3f}" if math.isfinite(rep.gap_pct) else "-"
        rows.append([rep.case_id, gap, str(rep.aux), f"{rep.ub_time:.2f}", f"{rep.psdp_time:.2f}",
                     cpu, str(rep.bb_nodes) if rep.solved else "-"])
    return rows


def render_markdown(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    lines += ["| " + " | ".join(row) + " |" for row in rows]
    return "\n".join(lines) + "\n"


def render_csv(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")  # RFC 4180
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


# ------------------------------------------------------------- perf profile


@dataclass
class PerfProfile:
    solvers: list
    cases: list
    ratios: dict  # (case, solver) -> kappa (inf when unsolved)
    tau: np.ndarray
    curve: dict  # solver -> P(kappa <= tau) on the tau grid

    def to_csv(self) -> str:
        rows = [[repr(float(t))] + [repr(float(self.curve[s][k])) for s in self.solvers]
                for k, t in enumerate(self.tau)]
        return render_csv(["tau"] + list(self.solvers), rows)


def default_tau_grid(points: int = 50, top: float = 64.0) -> np.ndarray:
    return np.logspace(0.0, math.log10(top), points)


def read_times_csv(text: str) -> dict:
    """{(case, solver): seconds or None} from a ``case,solver,seconds`` CSV."""
    times: dict = {}
    reader = csv.reader(io.StringIO(text))
    header_seen = False
    for lineno, row in enumerate(reader, start=1):
        if not row or all(not c.strip() for c in row):
            continue
        if not header_seen:
            header_seen = True
            if [c.strip().lower() for c in row] == ["case", "solver", "seconds"]:
                continue
        if len(row) != 3:
            raise ValueError(f"line {lineno}: expected 3 columns (case,solver,seconds), got {len(row)}")
        case, solver, sec = (c.strip() for c in row)
        if not case or not solver:
            raise ValueError(f"line {lineno}: empty case or solver name")
        if sec == "":
            times[(case, solver)] = None
            continue
        try:
            val = float(sec)
        except ValueError:
            raise ValueError(f"line {lineno}: seconds {sec!r} is not a number") from None
        if not math.isfinite(val) or val <= 0:
            raise ValueError(f"line {lineno}: seconds must be positive and finite")
        times[(case, solver)] = val
    return times


def perf_profile(times: dict, tau_grid: Optional[Iterable[float]] = None) -> PerfProfile:
    """kappa = t / min over solvers per case; curve P(kappa <= tau) per solver."""
    tau = default_tau_grid() if tau_grid is None else np.asarray(sorted(tau_grid), dtype=float)
    cases = sorted({c for c, _ in times})
    solvers = sorted({s for _, s in times})
    ratios = {}
    for c in cases:
        solved = [v for (cc, _), v in times.items() if cc == c and v is not None]
        best = min(solved) if solved else None
        for s in solvers:
            v = times.get((c, s))
            ratios[(c, s)] = math.inf if v is None or best is None else v / best
    n = len(cases)
    curve = {}
    for s in solvers:
        ks = np.array([ratios[(c, s)] for c in cases])
        curve[s] = np.array([np.count_nonzero(ks <= t) / n for t in tau]) if n else np.zeros(tau.size)
    return PerfProfile(solvers=solvers, cases=cases, ratios=ratios, tau=tau, curve=curve)


# ------------------------------------------------------------------- solving


def default_threads() -> int:
    raw = os.environ.get("GLOBAL_ACOPF_THREADS", "").strip()
    if not raw:
        return 1
    try:
        return max(1, int(raw))
    except ValueError:
        raise click.BadParameter(f"GLOBAL_ACOPF_THREADS={raw!r} is not an integer") from None


def solve_case(case: str, algorithm: str = "fbb", epsilon: float = 1e-4, epsilon_abs: Optional[float] = None,
               time_limit: Optional[float] = None, node_limit: Optional[int] = None, threads: int = 1,
               trace_cut: str = "valid", penalty_form: str = "complex", minor_cones: bool = True,
               rho: float = DEFAULT_RHO, budget: int = 200_000, eig_tol: Optional[float] = None,
               trace: Optional[callable] = None) -> dict:
    """Load, lift, solve; returns the result JSON document."""
    t0 = time.perf_counter()
    net = load_case(case)
    lcqp = build_lcqp(net, rho=rho, penalty_form=penalty_form, minor_cones=minor_cones)
    problem = lift_lcqp(lcqp, eig_tol=eig_tol, threads=threads)
    t_lift = time.perf_counter() - t0
    if algorithm == "fslp":
        res = _fslp_result(problem, epsilon, trace)
    elif algorithm == "fbb":
        res = fbb_solve(problem, epsilon=epsilon_abs, rel_epsilon=epsilon, time_limit=time_limit,
                        node_limit=node_limit, threads=threads, trace_cut=trace_cut)
    elif algorithm == "brute":
        eps = epsilon_abs
        if eps is None:
            # scale by the objective at the feasible-set analytic point: cheapest deterministic reference
            from .fslp import init_points
            eps = epsilon * max(1.0, abs(problem.objective(init_points(problem, cap=0)[0])))
        res = brute_force_solve(problem, eps, budget=budget, trace_cut=trace_cut, threads=threads)
    else:
        raise click.BadParameter(f"unknown algorithm {algorithm!r}")
    doc = result_to_json(net.name or Path(case).stem, res, problem.r, len(net.lines), algorithm)
    doc["penalty_value"] = penalty_value(res.w_star, lcqp) if res.w_star is not None else None
    doc["timings"] = dict(doc["timings"], lift=t_lift, total=time.perf_counter() - t0)
    return doc


def _fslp_result(problem, epsilon: float, trace=None) -> GlobalResult:
    """Multi-start FSLP only: a local solution, so the status is never Proved."""
    from .fslp import fslp_solve, init_points

    t0 = time.perf_counter()
    runs = []
    for k, w0 in enumerate(init_points(problem)):
        cb = None if trace is None else (lambda st, k=k: trace(k, st.k, st.f_cur, st.history[-1][1]))
        runs.append(fslp_solve(problem, w0, epsilon, callback=cb))
    best = min(range(len(runs)), key=lambda i: (runs[i].f_star, i))
    run = runs[best]
    status = "Local" if run.converged else "IterLimit"
    voltage = recover_voltages(run.w_star, problem.lcqp) if problem.lcqp is not None else None
    return GlobalResult(w_star=run.w_star, v_star=run.f_star, lb=-math.inf, gap_abs=math.inf, nodes_explored=0,
                        fslp_restarts=len(runs), status=status, voltage=voltage, epsilon=epsilon,
                        algorithm="fslp", timings={"fslp": time.perf_counter() - t0})


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialize {type(o).__name__}")


def _finite_or_null(o):
    """Strict JSON has no inf/nan: they become null."""
    if isinstance(o, dict):
        return {k: _finite_or_null(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_finite_or_null(v) for v in o]
    if isinstance(o, (float, np.floating)):
        return float(o) if math.isfinite(o) else None
    return o


def dumps_result(doc: dict) -> str:
    return json.dumps(_finite_or_null(doc), indent=2, sort_keys=True, default=_json_default, allow_nan=False)


def _fmt(v, spec: str) -> str:
    return "-" if v is None or not math.isfinite(v) else format(v, spec)


def summary_table(doc: dict) -> str:
    rows = [["case", doc["case_id"]], ["algorithm", doc["algorithm"]], ["status", doc["status"]],
            ["objective", _fmt(doc["objective"], ".6f")], ["lower bound", _fmt(doc["lower_bound"], ".6f")],
            ["gap", _fmt(doc["gap"], ".3e")], ["epsilon", f"{doc['epsilon']:.3e}"], ["nodes", str(doc["nodes"])],
            ["fslp restarts", str(doc["fslp_restarts"])],
            ["rank ratio", "-" if doc["rank_ratio"] is None else f"{doc['rank_ratio']:.3e}"],
            ["penalty", "-" if doc["penalty_value"] is None else f"{doc['penalty_value']:.3e}"],
            ["AC residual", "-" if not doc.get("residuals") else f"{max(doc['residuals'].values()):.3e}"],
            ["time [s]", f"{doc['timings'].get('total', 0.0):.2f}"]]
    width = max(len(k) for k, _ in rows)
    text = "\n".join(f"{k.ljust(width)}  {v}" for k, v in rows) + "\n"
    if doc.get("residuals") and max(doc["residuals"].values()) > AC_RESIDUAL_WARN:
        text += ("warning: the recovered voltages violate the AC equations; the objective is a bound "
                 "from the relaxation, not a feasible dispatch\n")
    return text


def exit_code_for(doc: dict) -> int:
    # a converged local FSLP run is the requested answer; every other non-Proved status is a limit
    return EXIT_OK if doc["status"] in ("Proved", "Local") else EXIT_LIMIT


# ---------------------------------------------------------------------- click


@click.group()
@click.version_option(__version__, prog_name="global-acopf")
@click.option("--solver", "--backend", "backend", default=None,
              help="Convex engine backend (reference, external:cvxopt, external:clarabel).")
@click.option("-v", "--verbose", count=True, help="Log more (repeat for debug).")
def main(backend: Optional[str], verbose: int):
    """Global ACOPF via penalized W-space lifting, FSLP and secant branch and bound."""
    logging.basicConfig(level=[logging.WARNING, logging.INFO, logging.DEBUG][min(verbose, 2)],
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if backend:
        try:
            ce.set_default_backend(backend)
        except KeyError as exc:
            raise click.BadParameter(str(exc), param_hint="--solver")


_SOLVE_ERRORS = (CaseError, FileNotFoundError, ModelError, FbbError, FslpError, ce.EngineError, BudgetExceeded,
                 ValueError, RuntimeError)


@main.command()
@click.argument("case", required=False)
@click.option("--algorithm", type=click.Choice(["fbb", "brute", "fslp"]), default="fbb", show_default=True)
@click.option("--epsilon", type=float, default=1e-4, show_default=True,
              help="Relative tolerance; absolute epsilon = value * max(1, |v*|).")
@click.option("--epsilon-abs", type=float, default=None, help="Absolute epsilon (overrides --epsilon).")
@click.option("--time-limit", type=float, default=None, help="Seconds.")
@click.option("--node-limit", type=int, default=None)
@click.option("--threads", type=int, default=None, help="Default: $GLOBAL_ACOPF_THREADS or 1.")
@click.option("--trace-cut", type=click.Choice(TRACE_CUTS), default="valid", show_default=True)
@click.option("--penalty-form", type=click.Choice(PENALTY_FORMS), default="complex", show_default=True)
@click.option("--minor-cones/--no-minor-cones", default=True, show_default=True)
@click.option("--rho", type=float, default=DEFAULT_RHO, show_default=True)
@click.option("--budget", type=int, default=200_000, show_default=True, help="Cell budget for --algorithm brute.")
@click.option("--eig-tol", type=float, default=None, help="Eigenvalues below -eig_tol count as negative.")
@click.option("--trace", is_flag=True, help="With --algorithm fslp: print f and |dt| per iteration to stderr.")
@click.option("-o", "--output", type=click.Path(dir_okay=False, writable=True), default=None,
              help="Write the result JSON here (default: stdout).")
@click.option("--all", "all_dir", type=click.Path(exists=True, file_okay=False), default=None,
              help="Solve every .m/.json case in this directory (in parallel).")
@click.option("--out-dir", type=click.Path(file_okay=False), default=None, help="Result directory for --all.")
def solve(case, algorithm, epsilon, epsilon_abs, time_limit, node_limit, threads, trace_cut, penalty_form,
          minor_cones, rho, budget, eig_tol, trace, output, all_dir, out_dir):
    """Solve CASE (a path or a bundled case name) to epsilon-global optimality."""
    threads = default_threads() if threads is None else max(1, threads)
    opts = dict(algorithm=algorithm, epsilon=epsilon, epsilon_abs=epsilon_abs, time_limit=time_limit,
                node_limit=node_limit, trace_cut=trace_cut, penalty_form=penalty_form, minor_cones=minor_cones,
                rho=rho, budget=budget, eig_tol=eig_tol)
    if all_dir is not None:
        sys.exit(_solve_all(Path(all_dir), Path(out_dir) if out_dir else None, threads, opts))
    if case is None:
        raise click.UsageError("give a CASE or --all DIR")
    try:
        doc = solve_case(case, threads=threads, trace=_print_trace if trace else None, **opts)
    except _SOLVE_ERRORS as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_ERROR)
    text = dumps_result(doc)
    if output:
        Path(output).write_text(text + "\n", encoding="utf-8")
        click.echo(summary_table(doc), nl=False)
    else:
        click.echo(text)
        click.echo(summary_table(doc), err=True, nl=False)
    sys.exit(exit_code_for(doc))


def _print_trace(start: int, k: int, f: float, step: float) -> None:
    click.echo(f"start {start} iter {k:4d}  f {f:.10g}  |dt| {step:.3e}", err=True)


def _solve_all(directory: Path, out_dir: Optional[Path], threads: int, opts: dict) -> int:
    files = sorted(p for p in directory.iterdir() if p.suffix.lower() in (".m", ".json"))
    if not files:
        click.echo(f"error: no .m or .json cases in {directory}", err=True)
        return EXIT_ERROR
    out_dir = out_dir or Path.cwd()
    out_dir.mkdir(parents=True, exist_ok=True)

    def one(path: Path):
        try:
            # one single-threaded solver per case; cases run side by side
            return path, solve_case(str(path), threads=1, **opts), None
        except _SOLVE_ERRORS as exc:
            return path, None, exc

    with ThreadPoolExecutor(max_workers=threads) as pool:
        results = list(pool.map(one, files))
    code = EXIT_OK
    for path, doc, exc in results:
        if exc is not None:
            click.echo(f"{path.name}: error: {exc}", err=True)
            code = EXIT_ERROR
            continue
        (out_dir / f"{path.stem}.result.json").write_text(dumps_result(doc) + "\n", encoding="utf-8")
        click.echo(f"{path.name}: {doc['status']} objective {doc['objective']:.6f}")
        if code == EXIT_OK and doc["status"] != "Proved":
            code = EXIT_LIMIT
    return code


@main.command()
@click.argument("case")
@click.option("--csv", "as_csv", is_flag=True, help="CSV instead of a table.")
@click.option("--penalty-form", type=click.Choice(PENALTY_FORMS), default="complex", show_default=True)
@click.option("--minor-cones/--no-minor-cones", default=True, show_default=True)
@click.option("--rho", type=float, default=DEFAULT_RHO, show_default=True)
@click.option("--threads", type=int, default=None)
@click.option("--eig-tol", type=float, default=None)
def bounds(case, as_csv, penalty_form, minor_cones, rho, threads, eig_tol):
    """Print r, the eigenvalue magnitudes lambda_i and the bounds [t_lo, t_hi]."""
    threads = default_threads() if threads is None else max(1, threads)
    try:
        lcqp = build_lcqp(load_case(case), rho=rho, penalty_form=penalty_form, minor_cones=minor_cones)
        problem = lift_lcqp(lcqp, eig_tol=eig_tol, threads=threads)
    except _SOLVE_ERRORS as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_ERROR)
    header = ["i", "lambda", "t_lo", "t_hi"]
    rows = [[str(i), repr(float(lam)), repr(float(lo)), repr(float(hi))]
            for i, (lam, lo, hi) in enumerate(zip(problem.split.lambdas, problem.t_lo, problem.t_hi))]
    if as_csv:
        click.echo(render_csv(header, rows), nl=False)
    else:
        click.echo(f"r = {problem.r}")
        click.echo(render_markdown(header, rows), nl=False)


@main.command()
@click.argument("case")
@click.option("--dump", type=click.Path(dir_okay=False, writable=True), default=None,
              help="Write the LCQP (COO triplets) as JSON.")
@click.option("--penalty-form", type=click.Choice(PENALTY_FORMS), default="complex", show_default=True)
@click.option("--minor-cones/--no-minor-cones", default=True, show_default=True)
@click.option("--rho", type=float, default=DEFAULT_RHO, show_default=True)
def lift(case, dump, penalty_form, minor_cones, rho):
    """Build the W-space LCQP and print its size."""
    try:
        lcqp = build_lcqp(load_case(case), rho=rho, penalty_form=penalty_form, minor_cones=minor_cones)
    except _SOLVE_ERRORS as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_ERROR)
    if dump:
        Path(dump).write_text(json.dumps(dump_json(lcqp)) + "\n", encoding="utf-8")
    click.echo(f"variables {lcqp.n}  rows {lcqp.m}  cones {len(lcqp.cone_rows())}  "
               f"lines {len(lcqp.lines)}  penalty {lcqp.penalty_form}")


@main.command()
@click.argument("results", nargs=-1, type=click.Path(exists=True, dir_okay=False))
@click.option("--csv", "as_csv", is_flag=True)
def report(results, as_csv):
    """Table (ID, Gap, Aux, UB, P-SDP, CPU, BB Nodes) from result JSON files."""
    if not results:
        raise click.UsageError("give at least one result JSON file")
    reps = []
    for path in results:
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise click.ClickException(f"{path}: invalid JSON ({exc})")
        if not isinstance(doc, dict):
            raise click.ClickException(f"{path}: not a result file")
        reps.append(report_from_json(doc, path))
    rows = report_rows(reps)
    click.echo(render_csv(REPORT_COLUMNS, rows) if as_csv else render_markdown(REPORT_COLUMNS, rows), nl=False)


@main.command()
@click.argument("csv_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--tau", "taus", type=float, multiple=True, help="tau values (default: 50 log points in [1, 64]).")
def perfprofile(csv_path, taus):
    """Performance profile P(kappa <= tau) per solver from case,solver,seconds rows."""
    try:
        times = read_times_csv(Path(csv_path).read_text(encoding="utf-8"))
    except ValueError as exc:
        raise click.ClickException(f"{csv_path}: {exc}")
    prof = perf_profile(times, taus or None)
    click.echo(prof.to_csv(), nl=False)


if __name__ == "__main__":  # pragma: no cover
    main()
