"""Evaluation measures for a computed bilevel point.

``value_function`` estimates the lower-level optimal value, ``infeasibility``
combines it with constraint violations into the Infease score, ``ratios``
normalizes objective errors and ``grid_oracle`` is a brute-force reference
solver for low-dimensional problems.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .errors import (
    IntractableDimension,
    NoFeasiblePoint,
    NonFiniteEvaluation,
    ValueFunctionFailure,
)
from .inner import InnerOptions, minimize_y
from .problem import BilevelProblem, eval_upper
from .smoothing import eval_zk

APPLICABLE_THRESHOLD = 0.1


# -- lower-level value function ----------------------------------------------

@dataclass(frozen=True)
class ValueFunctionOptions:
    starts: int = 5
    spread: float = 0.5
    seed: int = 0
    r0: float = 0.1
    r_min: float = 1e-10
    shrink: float = 0.1
    rho: float = 1.0
    feas_tol: float = 1e-8
    phi_tol: float = 1e-10
    phi_accept: float = 1e-6
    max_rounds: int = 80


def _lower_multiplier_loop(prob: BilevelProblem, x, y, opts: ValueFunctionOptions):
    """Barrier/multiplier iterations from one start; ``(y, converged)``."""
    s = np.zeros(prob.m)
    r = opts.r0
    inner_opts = InnerOptions()
    for _ in range(opts.max_rounds):
        res = minimize_y(prob, x, s, r, opts.rho, y, opts.phi_tol, inner_opts)
        y = res.y
        if not np.all(np.isfinite(y)):
            return y, False
        g = np.asarray(prob.g(x, y), dtype=float).reshape(prob.m)
        zk = eval_zk(g, s, r, opts.rho)
        feas = float(np.linalg.norm(zk.z + g))
        s = zk.kappa / opts.rho
        if feas <= opts.feas_tol and r <= opts.r_min and res.phi_norm <= opts.phi_accept:
            return y, True
        r = max(opts.shrink * r, opts.r_min)
    return y, False


def value_function(prob: BilevelProblem, x, opts: Optional[ValueFunctionOptions] = None) -> float:
    """Estimate ``min_y {f(x, y) : g(x, y) <= 0}`` by multistart.

    Starts are the problem's default ``y0`` plus ``starts - 1`` points
    perturbed by ``spread`` times standard normal draws from a fixed seed.
    """
    opts = opts or ValueFunctionOptions()
    x = np.asarray(x, dtype=float).reshape(prob.d)
    rng = np.random.default_rng(opts.seed)
    starts = [np.array(prob.y0, dtype=float)]
    starts += [prob.y0 + opts.spread * rng.standard_normal(prob.l) for _ in range(opts.starts - 1)]
    best = None
    for y0 in starts:
        try:
            y, ok = _lower_multiplier_loop(prob, x, y0, opts)
        except (NonFiniteEvaluation, FloatingPointError):
            continue
        if not ok:
            continue
        val = float(prob.f(x, y))
        if np.isfinite(val) and (best is None or val < best):
            best = val
    if best is None:
        raise ValueFunctionFailure(f"{prob.name}: no start converged at x={x}")
    return best


# -- Infease -----------------------------------------------------------------

@dataclass(frozen=True)
class InfeaseBreakdown:
    upper_ineq: float
    upper_eq: float
    lower_ineq: float
    optimality_gap: float
    total: float
    applicable: bool
    reliable: bool = True
    value: float = float("nan")


def _pos_inf_norm(v) -> float:
    v = np.asarray(v, dtype=float)
    return float(np.max(np.maximum(v, 0.0))) if v.size else 0.0


def _abs_inf_norm(v) -> float:
    v = np.asarray(v, dtype=float)
    return float(np.max(np.abs(v))) if v.size else 0.0


def infeasibility(prob: BilevelProblem, x, y, opts: Optional[ValueFunctionOptions] = None,
                  threshold: float = APPLICABLE_THRESHOLD) -> InfeaseBreakdown:
    """Four-part infeasibility plus suboptimality score of ``(x, y)``.

    ``total`` uses the raw gap; the applicable flag clamps a negative gap
    at zero. When the value function cannot be estimated the gap is NaN,
    the total covers the three constraint parts and the row is marked
    unreliable and not applicable.
    """
    x = np.asarray(x, dtype=float).reshape(prob.d)
    y = np.asarray(y, dtype=float).reshape(prob.l)
    _, G, H = eval_upper(prob, x, y)
    g = np.asarray(prob.g(x, y), dtype=float).reshape(prob.m)
    parts = (_pos_inf_norm(G), _abs_inf_norm(H), _pos_inf_norm(g))
    try:
        V = value_function(prob, x, opts)
    except ValueFunctionFailure:
        return InfeaseBreakdown(*parts, float("nan"), float(sum(parts)), False, False)
    gap = float(prob.f(x, y)) - V
    total = float(sum(parts) + gap)
    applicable = bool(sum(parts) + max(gap, 0.0) < threshold)
    return InfeaseBreakdown(*parts, gap, total, applicable, True, V)


def ratios(F_val: float, f_val: float, F_star: float, f_star: float) -> Tuple[float, float]:
    """Relative objective errors ``(R_F, R_f)``."""
    return ((F_val - F_star) / (1.0 + abs(F_star)), (f_val - f_star) / (1.0 + abs(f_star)))


# -- brute-force grid oracle -------------------------------------------------

@dataclass(frozen=True)
class OracleSolution:
    x: np.ndarray
    y: np.ndarray
    F_val: float
    f_val: float
    resolution: float
    xbox: np.ndarray
    ybox: np.ndarray


MAX_ORACLE_DIM = 4
_CHUNK = 400_000


def _values(fn, X, Y, rows: Optional[int] = None) -> np.ndarray:
    """Evaluate a problem callable on stacked points (rows of ``X`` and ``Y``)."""
    out = np.asarray(fn(X, Y), dtype=float)
    n = X.shape[0]
    if rows is None:
        return np.broadcast_to(out, (n,)).copy() if out.ndim <= 1 else out.reshape(n)
    return np.broadcast_to(out, (n, rows)).copy()


def _eval_points(prob: BilevelProblem, fn, X, Y, rows=None) -> np.ndarray:
    if prob.vectorized:
        parts = []
        for i in range(0, X.shape[0], _CHUNK):
            parts.append(_values(fn, X[i:i + _CHUNK], Y[i:i + _CHUNK], rows))
        if not parts:
            return np.zeros((0,) if rows is None else (0, rows))
        return np.concatenate(parts, axis=0)
    vals = [np.asarray(fn(a, b), dtype=float) for a, b in zip(X, Y)]
    if rows is None:
        return np.array([float(v) for v in vals])
    return np.array(vals, dtype=float).reshape(X.shape[0], rows)


def _offsets(n_per_dim: int, h: float, dim: int) -> np.ndarray:
    ticks = (np.arange(n_per_dim) - (n_per_dim - 1) / 2.0) * h
    return np.array(list(itertools.product(ticks, repeat=dim)), dtype=float).reshape(-1, dim)


def _box_grid(box: np.ndarray, n_per_dim: int):
    axes = [np.linspace(lo, hi, n_per_dim) for lo, hi in box]
    pts = np.array(list(itertools.product(*axes)), dtype=float).reshape(-1, len(box))
    h = float(max((hi - lo) / (n_per_dim - 1) for lo, hi in box)) if len(box) else 0.0
    return pts, h


def _in_box(P: np.ndarray, box: np.ndarray) -> np.ndarray:
    return np.all((P >= box[:, 0] - 1e-12) & (P <= box[:, 1] + 1e-12), axis=-1)


def lower_grid_min(prob: BilevelProblem, X, resolution: float, tol: Optional[float] = None,
                   budget: int = 2000):
    """Grid minimum of the lower problem for each row of ``X``.

    A coarse grid over ``ybox`` is refined around the best feasible point
    (window of two coarse cells, spacing divided by four) until the
    spacing is at most ``resolution / 2``. Returns ``(Y, f_min, feasible)``.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    tol = resolution if tol is None else tol
    N, l = X.shape[0], prob.l
    ybox = np.asarray(prob.ybox, dtype=float)
    if l == 0:
        Y = np.zeros((N, 0))
        return Y, _eval_points(prob, prob.f, X, Y), np.ones(N, dtype=bool)
    n0 = max(3, int(round(budget ** (1.0 / l))))
    base, h = _box_grid(ybox, n0)
    M = base.shape[0]
    Xr = np.repeat(X, M, axis=0)
    Yr = np.tile(base, (N, 1))
    best_y, best_f, feas = _pick_lower(prob, Xr, Yr, N, M, max(tol, h), ybox)
    while h > resolution / 2.0:
        h_new = h / 4.0
        offs = _offsets(17, h_new, l)
        M = offs.shape[0]
        Yr = (best_y[:, None, :] + offs[None, :, :]).reshape(-1, l)
        Xr = np.repeat(X, M, axis=0)
        cand_y, cand_f, cand_ok = _pick_lower(prob, Xr, Yr, N, M, max(tol, h_new), ybox)
        # keep the previous point when the window contains nothing feasible
        best_y = np.where(cand_ok[:, None], cand_y, best_y)
        best_f = np.where(cand_ok, cand_f, best_f)
        feas = feas | cand_ok
        h = h_new
    return best_y, best_f, feas


def _pick_lower(prob, Xr, Yr, N, M, tol, ybox):
    fv = _eval_points(prob, prob.f, Xr, Yr)
    gv = _eval_points(prob, prob.g, Xr, Yr, prob.m)
    ok = np.all(gv <= tol, axis=1) & _in_box(Yr, ybox) & np.isfinite(fv)
    key = np.where(ok, fv, np.inf).reshape(N, M)
    idx = np.argmin(key, axis=1)
    rows = np.arange(N)
    Yr = Yr.reshape(N, M, -1)
    return Yr[rows, idx], key[rows, idx], np.isfinite(key[rows, idx])


def _upper_eval(prob, X, resolution, lower_budget):
    Y, fmin, lfeas = lower_grid_min(prob, X, resolution, budget=lower_budget)
    Fv = _eval_points(prob, prob.F, X, Y)
    Gv = _eval_points(prob, prob.G, X, Y, prob.p)
    Hv = _eval_points(prob, prob.H, X, Y, prob.q)
    viol = np.zeros(X.shape[0])
    if prob.p:
        viol = np.maximum(viol, np.max(Gv, axis=1))
    if prob.q:
        viol = np.maximum(viol, np.max(np.abs(Hv), axis=1))
    viol = np.where(lfeas & np.isfinite(Fv), viol, np.inf)
    return Y, fmin, Fv, viol


def _slope(viol: np.ndarray, n: int, d: int, h: float) -> float:
    """Largest grid slope of the upper violation, for coarse-level tolerances."""
    grid = np.clip(viol, 0.0, None).reshape((n,) * d)
    finite = np.where(np.isfinite(grid), grid, np.nan)
    grads = np.gradient(finite, h) if d > 1 else [np.gradient(finite, h)]
    vals = np.concatenate([np.abs(g).ravel() for g in grads])
    vals = vals[np.isfinite(vals)]
    return float(vals.max()) if vals.size else 0.0


def grid_oracle(prob: BilevelProblem, resolution: float = 1e-3, keep: int = 8,
                upper_budget: int = 500, lower_budget: int = 800, window: int = 1) -> OracleSolution:
    """Brute-force bilevel solution on nested grids.

    Every upper grid point gets its own lower grid minimum ``y*(x)``; the
    upper objective is then minimized over points with ``G <= tol`` and
    ``|H| <= tol`` (``tol = resolution``). The upper grid is refined
    around the ``keep`` best coarse points, each window spanning
    ``window`` coarse cells on either side with a four times finer spacing.
    Coarse levels loosen the tolerance by the grid slope of the violation
    times the spacing so that thin feasible sets are not lost.
    """
    if prob.d + prob.l > MAX_ORACLE_DIM:
        raise IntractableDimension(f"{prob.name}: d + l = {prob.d + prob.l} > {MAX_ORACLE_DIM}")
    if not resolution > 0:
        raise ValueError("resolution must be positive")
    xbox = np.asarray(prob.xbox, dtype=float)
    ybox = np.asarray(prob.ybox, dtype=float)
    if not (np.all(np.isfinite(xbox)) and np.all(np.isfinite(ybox))):
        raise ValueError("grid oracle needs a finite box")
    tol = resolution
    d = prob.d
    n0 = max(3, int(round(upper_budget ** (1.0 / d))))
    X, h = _box_grid(xbox, n0)
    Y, fmin, Fv, viol = _upper_eval(prob, X, resolution, lower_budget)
    lip = _slope(viol, n0, d, h)
    level_tol = tol + lip * h
    ok = viol <= level_tol
    if not np.any(ok):
        raise NoFeasiblePoint(f"{prob.name}: no grid point satisfies the upper constraints")
    order = np.lexsort(tuple(X[:, j] for j in reversed(range(d))) + (np.where(ok, Fv, np.inf),))
    centers = X[order[:min(keep, int(ok.sum()))]]
    while h > resolution / 2.0:
        h_new = h / 4.0
        offs = _offsets(8 * window + 1, h_new, d)
        cand = (centers[:, None, :] + offs[None, :, :]).reshape(-1, d)
        cand = np.unique(cand[_in_box(cand, xbox)], axis=0)
        Y, fmin, Fv, viol = _upper_eval(prob, cand, resolution, lower_budget)
        h = h_new
        level_tol = tol + lip * h if h > resolution / 2.0 else tol
        ok = viol <= level_tol
        if not np.any(ok):
            raise NoFeasiblePoint(f"{prob.name}: feasible set lost during refinement")
        order = np.lexsort(tuple(cand[:, j] for j in reversed(range(d))) + (np.where(ok, Fv, np.inf),))
        X = cand
        centers = cand[order[:min(keep, int(ok.sum()))]]
    i = order[0]
    return OracleSolution(X[i].copy(), Y[i].copy(), float(Fv[i]), float(fmin[i]), resolution,
                          xbox, ybox)


# -- constraint qualification ------------------------------------------------

def check_licq(prob: BilevelProblem, x, y, tol: float = 1e-8):
    """Numerical rank of the near-active lower constraint gradients.

    Constraints with ``g_i >= -tol`` count as active. Returns
    ``(rank, active_count, holds)``.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    x = np.asarray(x, dtype=float).reshape(prob.d)
    y = np.asarray(y, dtype=float).reshape(prob.l)
    g = np.asarray(prob.g(x, y), dtype=float).reshape(prob.m)
    active = g >= -tol
    A = np.asarray(prob.g_y(x, y), dtype=float).reshape(prob.m, prob.l)[active]
    n_act = int(active.sum())
    if n_act == 0:
        return 0, 0, True
    sv = np.linalg.svd(A, compute_uv=False)
    rank = int(np.sum(sv > 1e-8 * sv[0])) if sv.size and sv[0] > 0 else 0
    return rank, n_act, rank == n_act
