"""Command-line interface: ``solve``, ``batch`` and ``check``.

Randomness
----------
Start perturbations are ``0.01 * standard_normal`` draws from numpy's
``Generator(PCG64)`` (ziggurat normals). ``solve`` seeds it with
``default_rng(seed)``; ``batch`` gives repetition ``rep`` of the problem at
corpus position ``i`` its own stream ``default_rng([seed, i, rep])``, so
rows do not depend on worker count or completion order.

Outputs
-------
``report.json``
    ``solve``: config, run record, final point, Res history. ``batch``:
    config plus all run records.
``summary.csv``
    one ``run`` row per (problem, rep), then per problem a ``best`` row
    (lowest F among applicable runs, else lowest Infease) and a ``median``
    row, and a final ``total`` row. ``applicable_count`` is filled on the
    aggregate rows.
``trace_<problem>_<rep>.csv``
    per-iteration trace (with ``--trace``).
``fig_rF.dat``, ``fig_rf.dat``, ``fig_time.dat``, ``fig_infease.dat``
    two columns ``index value`` of the per-problem best rows, sorted
    ascending.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .corpus import NAMES, corpus_get
from .errors import BilevelError, UnknownProblem
from .metrics import infeasibility, ratios
from .problem import BilevelProblem, load_problem_file, random_points, validate_derivatives
from .smoothing import eval_zk
from .solver import TRACE_COLUMNS, SolverConfig, Status, diagnose, solve

PERTURBATION = 0.01
MAX_SEED = 2 ** 64 - 1


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.exit(1, f"{self.prog}: error: {message}\n")


# -- configuration -------------------------------------------------------------

def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _field_types() -> Dict[str, type]:
    defaults = SolverConfig()
    return {f.name: type(getattr(defaults, f.name)) for f in fields(SolverConfig)}


def read_config_file(path) -> Dict[str, object]:
    """Parse a flat ``key = value`` file; keys are flag names with or without dashes."""
    types = _field_types()
    out: Dict[str, object] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        key = key.lstrip("-").replace("-", "_")
        if key not in types:
            raise ValueError(f"{path}:{lineno}: unknown setting {key!r}")
        out[key] = types[key](value)
    return out


def build_config(args) -> SolverConfig:
    """Defaults, overridden by ``--config`` file, overridden by flags."""
    values: Dict[str, object] = {}
    if getattr(args, "config", None):
        values.update(read_config_file(args.config))
    for name in SolverConfig.field_names():
        v = getattr(args, name, None)
        if v is not None:
            values[name] = v
    return SolverConfig(**values).validate()


def _seed(text: str) -> int:
    v = int(text)
    if not 0 <= v <= MAX_SEED:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bilevel-smooth", description="Barrier-smoothing bilevel solver.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def solver_flags(p):
        p.add_argument("--seed", type=_seed, default=0, help="64-bit seed for start perturbations")
        p.add_argument("--config", help="key = value file with solver settings")
        p.add_argument("--out", default="results", help="output directory")
        p.add_argument("--trace", action="store_true", help="write per-iteration CSV traces")
        g = p.add_argument_group("solver settings")
        for name, typ in _field_types().items():
            g.add_argument(_flag(name), dest=name, type=typ, default=None, metavar=typ.__name__.upper())

    ps = sub.add_parser("solve", help="solve one problem")
    ps.add_argument("problem", help="corpus name or problem file")
    solver_flags(ps)

    pb = sub.add_parser("batch", help="run the corpus protocol")
    pb.add_argument("--reps", type=_positive_int, default=5)
    pb.add_argument("--workers", type=_positive_int, default=1)
    pb.add_argument("--problems", nargs="*", default=None, help="restrict to these corpus names")
    solver_flags(pb)

    pc = sub.add_parser("check", help="validate derivatives and smoothing identities")
    pc.add_argument("--tol", type=float, default=1e-5)
    pc.add_argument("--points", type=_positive_int, default=20)
    pc.add_argument("--seed", type=_seed, default=0)
    pc.add_argument("--problems", nargs="*", default=None)
    return parser


# -- single runs ---------------------------------------------------------------

@dataclass
class RunRecord:
    problem: str
    rep: int
    seed: int
    x0: List[float]
    y0: List[float]
    status: str
    stop_rule: str
    F_val: float
    f_val: float
    R_F: float
    R_f: float
    infease: float
    applicable: bool
    wall_time: float
    iterations: int
    x: List[float]
    y: List[float]
    diagnosis: str


RECORD_COLUMNS = [f.name for f in fields(RunRecord)]
SUMMARY_COLUMNS = ["kind"] + RECORD_COLUMNS + ["applicable_count"]


def resolve_problem(name: str) -> BilevelProblem:
    try:
        return corpus_get(name)
    except UnknownProblem:
        path = Path(name)
        if path.is_file():
            return load_problem_file(path)
        raise


def perturbed_start(prob: BilevelProblem, rng: np.random.Generator):
    x0 = prob.x0 + PERTURBATION * rng.standard_normal(prob.d)
    y0 = prob.y0 + PERTURBATION * rng.standard_normal(prob.l)
    return x0, y0


def run_once(prob: BilevelProblem, cfg: SolverConfig, rng: np.random.Generator, rep: int,
             seed: int, trace_path: Optional[Path] = None):
    """Solve from a perturbed start and score the result; ``(record, report)``."""
    x0, y0 = perturbed_start(prob, rng)
    try:
        report = solve(prob, cfg, start=(x0, y0))
    except BilevelError as exc:
        nan = float("nan")
        rec = RunRecord(prob.name, rep, seed, x0.tolist(), y0.tolist(), "Error", type(exc).__name__,
                        nan, nan, nan, nan, nan, False, 0.0, 0, [], [], str(exc))
        return rec, None
    x, y = report.x, report.y
    F_val = float(prob.F(x, y))
    f_val = float(prob.f(x, y))
    ref = prob.reference
    R_F, R_f = ratios(F_val, f_val, ref.F, ref.f) if ref is not None else (math.nan, math.nan)
    inf = infeasibility(prob, x, y)
    rec = RunRecord(
        prob.name, rep, seed, x0.tolist(), y0.tolist(), report.status.value, report.stop_rule,
        F_val, f_val, R_F, R_f, inf.total, inf.applicable, report.wall_time, report.iterations,
        x.tolist(), y.tolist(), diagnose(report),
    )
    if trace_path is not None:
        write_trace(trace_path, report)
    return rec, report


def write_trace(path: Path, report) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_COLUMNS)
        for row in report.history:
            vals = []
            for name in TRACE_COLUMNS:
                v = getattr(row, name)
                vals.append(" ".join(repr(t) for t in v) if isinstance(v, tuple) else repr(v))
            w.writerow(vals)


def _jsonable(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    if isinstance(v, list):
        return [_jsonable(t) for t in v]
    return v


def _record_json(rec: RunRecord) -> dict:
    return {k: _jsonable(v) for k, v in asdict(rec).items()}


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def cmd_solve(args) -> int:
    try:
        prob = resolve_problem(args.problem)
        cfg = build_config(args)
    except (BilevelError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    trace = out / f"trace_{prob.name}_0.csv" if args.trace else None
    rec, report = run_once(prob, cfg, rng, 0, args.seed, trace)
    payload = {
        "config": asdict(cfg),
        "record": _record_json(rec),
        "res_history": [_jsonable(r) for r in report.res_history()] if report else [],
        "events": report.events if report else [],
    }
    _write_json(out / "report.json", payload)
    print(f"{prob.name}: {rec.status} ({rec.stop_rule}) F={rec.F_val:.6g} f={rec.f_val:.6g} "
          f"Infease={rec.infease:.3g} iterations={rec.iterations}")
    return 0 if rec.status == Status.RES_CONVERGED.value else 2


# -- batch ---------------------------------------------------------------------

def _batch_job(job):
    name, index, rep, seed, cfg, trace_dir = job
    prob = corpus_get(name)
    rng = np.random.default_rng([seed, index, rep])
    trace = Path(trace_dir) / f"trace_{name}_{rep}.csv" if trace_dir else None
    rec, _ = run_once(prob, cfg, rng, rep, seed, trace)
    return rec


def _best(rows: List[RunRecord]) -> RunRecord:
    ok = [r for r in rows if r.applicable and math.isfinite(r.F_val)]
    if ok:
        return min(ok, key=lambda r: (r.F_val, r.rep))
    return min(rows, key=lambda r: (r.infease if math.isfinite(r.infease) else math.inf, r.rep))


def _median_row(rows: List[RunRecord]) -> dict:
    row = {"problem": rows[0].problem, "rep": "", "seed": rows[0].seed}
    for name in ("F_val", "f_val", "R_F", "R_f", "infease", "wall_time", "iterations"):
        vals = [getattr(r, name) for r in rows]
        row[name] = float(np.median(vals)) if all(math.isfinite(v) for v in vals) else math.nan
    return row


def _csv_value(v):
    if isinstance(v, list):
        return " ".join(repr(float(t)) for t in v)
    if isinstance(v, float):
        return repr(v)
    return v


def write_summary(path: Path, records: List[RunRecord]) -> Dict[str, RunRecord]:
    by_problem: Dict[str, List[RunRecord]] = {}
    for r in records:
        by_problem.setdefault(r.problem, []).append(r)
    best: Dict[str, RunRecord] = {}
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SUMMARY_COLUMNS, restval="")
        w.writeheader()
        for r in records:
            w.writerow({"kind": "run", **{k: _csv_value(v) for k, v in asdict(r).items()}})
        for name, rows in by_problem.items():
            count = sum(r.applicable for r in rows)
            best[name] = _best(rows)
            w.writerow({"kind": "best", **{k: _csv_value(v) for k, v in asdict(best[name]).items()},
                        "applicable_count": count})
            w.writerow({"kind": "median", **{k: _csv_value(v) for k, v in _median_row(rows).items()},
                        "applicable_count": count})
        w.writerow({"kind": "total", "applicable_count": sum(r.applicable for r in records),
                    "iterations": sum(r.iterations for r in records),
                    "wall_time": repr(sum(r.wall_time for r in records))})
    return best


def write_dat(path: Path, values: Sequence[float]) -> None:
    vals = sorted(v for v in values if math.isfinite(v))
    with open(path, "w") as fh:
        for i, v in enumerate(vals, 1):
            fh.write(f"{i} {v!r}\n")


def cmd_batch(args) -> int:
    try:
        cfg = build_config(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    names = NAMES if args.problems is None else [n for n in NAMES if n in set(args.problems)]
    if not names:
        print("error: problem filter matches no corpus entry", file=sys.stderr)
        return 1
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    trace_dir = str(out) if args.trace else None
    jobs = [(n, NAMES.index(n), rep, args.seed, cfg, trace_dir) for n in names for rep in range(args.reps)]
    if args.workers > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            records = list(pool.map(_batch_job, jobs))
    else:
        records = [_batch_job(j) for j in jobs]
    best = write_summary(out / "summary.csv", records)
    chosen = [best[n] for n in names]
    write_dat(out / "fig_rF.dat", [r.R_F for r in chosen])
    write_dat(out / "fig_rf.dat", [r.R_f for r in chosen])
    write_dat(out / "fig_time.dat", [r.wall_time for r in chosen])
    write_dat(out / "fig_infease.dat", [r.infease for r in chosen])
    _write_json(out / "report.json", {"config": asdict(cfg), "reps": args.reps, "seed": args.seed,
                                      "records": [_record_json(r) for r in records]})
    applicable = sum(r.applicable for r in records)
    print(f"{len(records)} runs, {applicable} applicable ({100.0 * applicable / len(records):.0f}%)")
    for n in names:
        b = best[n]
        print(f"  {n:16s} {b.status:14s} R_F={b.R_F: .2e} Infease={b.infease: .2e}")
    return 0


# -- check ---------------------------------------------------------------------

def identity_errors(n: int, rng: np.random.Generator) -> Dict[str, float]:
    """Worst violations of the z/kappa identities on random tuples."""
    g = rng.uniform(-1e3, 1e3, n)
    s = rng.uniform(-1e3, 1e3, n)
    r = rng.uniform(0.0, 10.0, n)
    rho = rng.uniform(1e-7, 10.0, n)
    t = rho * s + g
    zk = eval_zk(g, s, r, rho)
    scale = np.maximum.reduce([np.ones(n), np.abs(g), np.abs(rho * s)])
    rr = r * rho
    return {
        "z_nonneg": float(np.max(-zk.z, initial=0.0)),
        "kappa_nonneg": float(np.max(-zk.kappa, initial=0.0)),
        "product": float(np.max(np.abs(zk.z * zk.kappa - rr) / np.maximum(1.0, rr), initial=0.0)),
        "shift": float(np.max(np.abs((zk.z + g) - (zk.kappa - rho * s)) / scale, initial=0.0)),
    }


def run_check(problems: Sequence[BilevelProblem], tol: float, points: int = 20, seed: int = 0):
    """Rows ``(problem, item, error)`` failing ``tol``; empty when all pass."""
    rng = np.random.default_rng(seed)
    bad = []
    for prob in problems:
        rep = validate_derivatives(prob, random_points(prob, points, rng), tol)
        bad += [(prob.name, k, rep.errors[k]) for k in rep.failures()]
    for k, v in identity_errors(2000, rng).items():
        if v > 1e-9:
            bad.append(("smoothing", k, v))
    return bad


def cmd_check(args) -> int:
    if not args.tol > 0:
        print("error: --tol must be positive", file=sys.stderr)
        return 1
    names = NAMES if args.problems is None else list(args.problems)
    try:
        problems = [resolve_problem(n) for n in names]
    except (BilevelError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    bad = run_check(problems, args.tol, args.points, args.seed)
    if bad:
        print(f"{'problem':16s} {'item':14s} error")
        for name, item, err in bad:
            print(f"{name:16s} {item:14s} {err:.3e}")
        return 3
    print(f"{len(problems)} problems and the smoothing identities pass at tol {args.tol:g}")
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    return {"solve": cmd_solve, "batch": cmd_batch, "check": cmd_check}[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
