"""Outer loop: gradient steps on the smoothed upper augmented Lagrangian.

The lower-level solution map ``y(x)`` is replaced by the smoothing path
``y_r(x)``. Each pass solves the smoothed lower problem at the current
``x``, updates the multiplier estimate ``s`` and the barrier/penalty
parameters, differentiates ``y_r`` implicitly and takes an Armijo step on

    theta(x, y) = F + 1/(2c) sum(max(0, lam + c G)^2 - lam^2)
                    + sum(mu H + c/2 H^2)

while an outer augmented-Lagrangian loop updates ``(lam, mu, c)``.
"""
from __future__ import annotations

import enum
import time
from dataclasses import asdict, dataclass, field, fields
from typing import List, Optional, Tuple

import numpy as np

from .errors import InvalidParameter, ShapeMismatch, SingularSensitivity
from .inner import InnerOptions, minimize_y
from .problem import BilevelProblem, eval_upper
from .smoothing import eval_zk, sensitivity


@dataclass(frozen=True)
class SolverConfig:
    """Algorithm parameters; defaults are the published experimental settings."""

    eps: float = 1e-9
    r1: float = 1.0
    rho1: float = 2.0
    c1: float = 50.0
    beta: float = 0.7
    delta0: float = 0.05
    delta1: float = 0.8
    delta2: float = 0.95
    rho_bar: float = 1e-7
    gamma1: float = 0.1
    eps1: float = 0.01
    tau1: float = 0.8
    lambda_max: float = 1e8
    mu_min: float = -1e8
    mu_max: float = 1e8
    max_outer: int = 1000
    max_backtracks: int = 50
    max_failure_cycles: int = 50
    max_inner_failures: int = 25
    inner_max_iter: int = 200
    gamma_min: float = 1e-12
    # stopping rules, checked at the top of each pass that enters step 2
    res_tol: float = 1e-9
    k_cap: int = 1000
    flat_k: int = 200
    flat_tol: float = 1e-18
    blowup_k: int = 300
    blowup_res: float = 1e3
    slow_k: int = 300
    slow_tol: float = 1e-9
    late_k: int = 800
    late_res: float = 1e-2

    def validate(self) -> "SolverConfig":
        for name in ("beta", "delta1", "delta2"):
            v = getattr(self, name)
            if not 0 <= v < 1:
                raise InvalidParameter(f"{name} must lie in [0, 1), got {v}")
        if not self.delta1 < self.delta2:
            raise InvalidParameter("delta1 must be smaller than delta2")
        for name in ("eps", "r1", "rho1", "c1", "delta0", "gamma1", "eps1", "tau1", "lambda_max", "mu_max"):
            if not getattr(self, name) > 0:
                raise InvalidParameter(f"{name} must be positive")
        if not 0 < self.rho_bar < self.rho1:
            raise InvalidParameter("rho_bar must satisfy 0 < rho_bar < rho1")
        if not self.mu_min < 0:
            raise InvalidParameter("mu_min must be negative")
        return self

    @classmethod
    def field_names(cls) -> List[str]:
        return [f.name for f in fields(cls)]


class Status(str, enum.Enum):
    RES_CONVERGED = "ResConverged"
    ITERATION_CAP = "IterationCap"
    STALLED = "Stalled"
    SINGULAR_SENSITIVITY = "SingularSensitivity"
    INNER_FAILURE = "InnerFailure"


@dataclass
class IterateState:
    k: int
    x: np.ndarray
    y: np.ndarray
    s: np.ndarray
    lam: np.ndarray
    mu: np.ndarray
    r: float
    rho: float
    c: float
    gamma: float
    tau: float
    eps_k: float
    last_d: np.ndarray
    last_res: float = float("nan")


@dataclass(frozen=True)
class TraceRow:
    k: int
    event: str
    res: float
    d_norm: float
    sigma: float
    theta: float
    r: float
    rho: float
    c: float
    gamma: float
    tau: float
    eps_k: float
    alpha: float
    inner_iters: int
    time: float
    x: Tuple[float, ...]
    y: Tuple[float, ...]


TRACE_COLUMNS = [f.name for f in fields(TraceRow)]


@dataclass
class SolveReport:
    status: Status
    stop_rule: str
    x: np.ndarray
    y: np.ndarray
    s: np.ndarray
    lam: np.ndarray
    mu: np.ndarray
    history: List[TraceRow]
    wall_time: float
    events: List[str] = field(default_factory=list)

    @property
    def iterations(self) -> int:
        return len(self.history)

    def res_history(self) -> List[float]:
        return [row.res for row in self.history]


# -- upper-level augmented Lagrangian ---------------------------------------

def theta(prob: BilevelProblem, x, y, lam_bar, mu_bar, c: float) -> float:
    F, G, H = eval_upper(prob, x, y)
    lam_bar = np.asarray(lam_bar, dtype=float)
    mu_bar = np.asarray(mu_bar, dtype=float)
    hinge = np.maximum(0.0, lam_bar + c * G)
    return float(F + np.sum(hinge ** 2 - lam_bar ** 2) / (2.0 * c) + np.sum(mu_bar * H + 0.5 * c * H ** 2))


def grad_theta(prob: BilevelProblem, x, y, lam_bar, mu_bar, c: float):
    """Partial gradients ``(d theta/dx, d theta/dy)`` at explicit ``(x, y)``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    _, G, H = eval_upper(prob, x, y)
    hinge = np.maximum(0.0, np.asarray(lam_bar, dtype=float) + c * G)
    eq = np.asarray(mu_bar, dtype=float) + c * H
    gx = (np.asarray(prob.F_x(x, y), dtype=float).reshape(prob.d)
          + np.asarray(prob.G_x(x, y)).reshape(prob.p, prob.d).T @ hinge
          + np.asarray(prob.H_x(x, y)).reshape(prob.q, prob.d).T @ eq)
    gy = (np.asarray(prob.F_y(x, y), dtype=float).reshape(prob.l)
          + np.asarray(prob.G_y(x, y)).reshape(prob.p, prob.l).T @ hinge
          + np.asarray(prob.H_y(x, y)).reshape(prob.q, prob.l).T @ eq)
    return gx, gy


def sigma(prob: BilevelProblem, x, y, lam) -> float:
    """Infeasibility/complementarity residual ``max(|H_j|, |min(lam_i, -G_i)|)``."""
    _, G, H = eval_upper(prob, x, y)
    parts = np.concatenate([np.abs(H), np.abs(np.minimum(np.asarray(lam, dtype=float), -G))])
    return float(np.max(parts)) if parts.size else 0.0


def project_multipliers(lam, mu, cfg: SolverConfig):
    return (np.clip(lam, 0.0, cfg.lambda_max), np.clip(mu, cfg.mu_min, cfg.mu_max))


# -- individual update rules -------------------------------------------------

def update_s_feasible(kappa, rho: float) -> np.ndarray:
    return np.asarray(kappa, dtype=float) / rho


def update_s_infeasible(kappa, g_new, r: float, rho: float, eps: float, cfg: SolverConfig):
    """Multiplier, barrier and penalty updates after a failed feasibility test.

    Returns ``(s_next, r_next, rho_next)``. Coordinates with ``g_i < -eps``
    are reset to ``-r/g_i``.
    """
    g_new = np.asarray(g_new, dtype=float)
    s_next = update_s_feasible(kappa, rho)
    slack = g_new < -eps
    s_next = np.where(slack, -r / np.where(slack, g_new, -1.0), s_next)
    return s_next, cfg.delta2 * r, max(cfg.rho_bar, cfg.delta2 * rho)


def direction(V, gx, gy) -> np.ndarray:
    V = np.asarray(V, dtype=float)
    gx = np.asarray(gx, dtype=float)
    gy = np.asarray(gy, dtype=float)
    if V.shape != (gy.size, gx.size):
        raise ShapeMismatch(f"V has shape {V.shape}, expected ({gy.size}, {gx.size})")
    return -(gx + V.T @ gy)


@dataclass(frozen=True)
class LineSearchResult:
    alpha: float
    x_next: np.ndarray
    y_tilde: np.ndarray
    theta0: float
    theta_new: float
    trials: int
    status: str  # "ok", "best" (stall, best decreasing trial kept) or "stall"

    @property
    def stalled(self) -> bool:
        return self.status == "stall"


def line_search(prob: BilevelProblem, x, y, d, V, lam_bar, mu_bar, c: float,
                cfg: SolverConfig, theta_fn=None) -> LineSearchResult:
    """First ``alpha`` in ``1, beta, beta^2, ...`` with sufficient decrease.

    The trial lower point moves along the sensitivity, ``y + alpha V d``.
    ``theta_fn`` overrides the merit function (tests use it).
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    d = np.asarray(d, dtype=float)
    Vd = np.asarray(V, dtype=float) @ d
    merit = theta_fn or (lambda xx, yy: theta(prob, xx, yy, lam_bar, mu_bar, c))
    th0 = merit(x, y)
    dd = float(d @ d)
    best = None
    alpha = 1.0
    for trial in range(1, cfg.max_backtracks + 1):
        xt, yt = x + alpha * d, y + alpha * Vd
        th = merit(xt, yt)
        if np.isfinite(th) and th - th0 <= -alpha * cfg.delta0 * dd:
            return LineSearchResult(alpha, xt, yt, th0, th, trial, "ok")
        if np.isfinite(th) and (best is None or th < best[3]):
            best = (alpha, xt, yt, th)
        alpha *= cfg.beta
    if best is not None and best[3] < th0:
        return LineSearchResult(best[0], best[1], best[2], th0, best[3], cfg.max_backtracks, "best")
    return LineSearchResult(0.0, x, y, th0, th0, cfg.max_backtracks, "stall")


def update_multipliers(lam_bar, mu_bar, G_val, H_val, c: float):
    """New ``(lam, mu)`` from the projected ones; caller re-projects before use."""
    lam = np.maximum(0.0, np.asarray(lam_bar, dtype=float) + c * np.asarray(G_val, dtype=float))
    mu = np.asarray(mu_bar, dtype=float) + c * np.asarray(H_val, dtype=float)
    return lam, mu


def stop_rule(history: List[TraceRow], cfg: SolverConfig) -> Optional[Tuple[Status, str]]:
    """Published stopping tests on the Res sequence, or ``None`` to continue."""
    if not history:
        return None
    k = history[-1].k
    res = history[-1].res
    prev = history[-2].res if len(history) > 1 else None
    if res < cfg.res_tol:
        return Status.RES_CONVERGED, "res_tol"
    if k > cfg.k_cap:
        return Status.ITERATION_CAP, "k_cap"
    if prev is not None and k > cfg.flat_k and abs(res - prev) < cfg.flat_tol:
        return Status.STALLED, "flat_res"
    if k > cfg.blowup_k and abs(res) > cfg.blowup_res:
        return Status.STALLED, "res_blowup"
    if prev is not None and k > cfg.slow_k and abs(res - prev) < cfg.slow_tol:
        return Status.STALLED, "slow_res"
    if k > cfg.late_k and abs(res) < cfg.late_res:
        return Status.STALLED, "late_small_res"
    return None


# -- main loop ---------------------------------------------------------------

def initial_state(prob: BilevelProblem, cfg: SolverConfig, x0, y0, s0=None) -> IterateState:
    x0 = np.array(x0, dtype=float).reshape(prob.d)
    y0 = np.array(y0, dtype=float).reshape(prob.l)
    s0 = np.zeros(prob.m) if s0 is None else np.array(s0, dtype=float).reshape(prob.m)
    if np.any(s0 < 0):
        raise InvalidParameter("initial s must be nonnegative")
    _, G, H = eval_upper(prob, x0, y0)
    return IterateState(
        k=1, x=x0, y=y0, s=s0,
        lam=np.maximum(0.0, cfg.c1 * G), mu=cfg.c1 * H,
        r=cfg.r1, rho=cfg.rho1, c=cfg.c1, gamma=cfg.gamma1, tau=cfg.tau1, eps_k=cfg.eps1,
        last_d=np.full(prob.d, np.nan),
    )


def solve(prob: BilevelProblem, config: Optional[SolverConfig] = None, start=None, s0=None) -> SolveReport:
    """Run the smoothing algorithm from ``start = (x0, y0)`` (default: problem start)."""
    cfg = (config or SolverConfig()).validate()
    x0, y0 = start if start is not None else (prob.x0, prob.y0)
    st = initial_state(prob, cfg, x0, y0, s0)
    inner_opts = InnerOptions(max_iter=cfg.inner_max_iter)
    history: List[TraceRow] = []
    events: List[str] = []
    t0 = time.perf_counter()
    last_dn = float("nan")
    last_sigma = sigma(prob, st.x, st.y, st.lam)
    last_theta = float("nan")
    fail_cycles = 0
    inner_fails = 0
    enter_step2 = True
    status, rule = Status.ITERATION_CAP, "max_outer"
    out_x, out_y = st.x.copy(), st.y.copy()

    def record(event, res, dn, sig, th, alpha, inner_iters, x, y):
        history.append(TraceRow(
            st.k, event, float(res), float(dn), float(sig), float(th), st.r, st.rho, st.c,
            st.gamma, st.tau, st.eps_k, float(alpha), int(inner_iters),
            time.perf_counter() - t0, tuple(map(float, x)), tuple(map(float, y)),
        ))
        st.last_res = float(res)

    while True:
        if enter_step2:
            stop = stop_rule(history, cfg)
            if stop is not None:
                status, rule = stop
                break
        if st.k > cfg.max_outer:
            status, rule = Status.ITERATION_CAP, "max_outer"
            break

        # step 3: smoothed lower-level solve at the current x
        inner = minimize_y(prob, st.x, st.s, st.r, st.rho, st.y, st.gamma, inner_opts)
        if not np.all(np.isfinite(inner.y)):
            status, rule = Status.INNER_FAILURE, "non_finite_inner"
            break
        if inner.converged:
            inner_fails = 0
        else:
            inner_fails += 1
            events.append(f"k={st.k}: inner {inner.status.value} at |phi|={inner.phi_norm:.2e}")
            if inner_fails >= cfg.max_inner_failures:
                status, rule = Status.INNER_FAILURE, "inner_failures"
                break
        y_new = inner.y
        g_new = np.asarray(prob.g(st.x, y_new), dtype=float).reshape(prob.m)
        zk = eval_zk(g_new, st.s, st.r, st.rho)
        feas = float(np.linalg.norm(zk.z + g_new))

        # step 4: multiplier estimate and parameter schedule
        if feas > st.gamma:
            st.s, r_next, rho_next = update_s_infeasible(zk.kappa, g_new, st.r, st.rho, cfg.eps, cfg)
            st.r, st.rho = r_next, rho_next
            st.y = y_new
            res = max(last_dn, last_sigma) if np.isfinite(last_dn) else last_sigma
            record("feas_fail", res, last_dn, last_sigma, last_theta, 0.0, inner.iterations, st.x, y_new)
            st.k += 1
            fail_cycles += 1
            enter_step2 = False
            if fail_cycles > cfg.max_failure_cycles:
                status, rule = Status.STALLED, "feasibility_cycles"
                out_x, out_y = st.x.copy(), y_new.copy()
                break
            continue
        fail_cycles = 0
        r_k = st.r
        st.s = update_s_feasible(zk.kappa, st.rho)
        st.gamma = max(cfg.gamma_min, cfg.delta1 * st.gamma)
        st.r *= cfg.delta1
        try:
            V = sensitivity(prob, st.x, y_new, st.s, r_k, st.rho).V
        except SingularSensitivity:
            try:
                V = sensitivity(prob, st.x, y_new, st.s, 10.0 * r_k, st.rho).V
                events.append(f"k={st.k}: singular sensitivity, retried with 10r")
            except SingularSensitivity:
                V = np.zeros((prob.l, prob.d))
                events.append(f"k={st.k}: singular sensitivity, V set to 0")

        # step 5: direction and line search
        lam_bar, mu_bar = project_multipliers(st.lam, st.mu, cfg)
        gx, gy = grad_theta(prob, st.x, y_new, lam_bar, mu_bar, st.c)
        d = direction(V, gx, gy)
        dn = float(np.linalg.norm(d))
        if dn > 0:
            ls = line_search(prob, st.x, y_new, d, V, lam_bar, mu_bar, st.c, cfg)
        else:
            th = theta(prob, st.x, y_new, lam_bar, mu_bar, st.c)
            ls = LineSearchResult(0.0, st.x, y_new, th, th, 0, "ok")
        if ls.status == "best":
            events.append(f"k={st.k}: line search kept best trial alpha={ls.alpha:.3e}")
        x_k = st.x
        st.last_d = d

        # step 6: multiplier update when the step is short
        event = "step"
        if dn < st.tau:
            _, G, H = eval_upper(prob, x_k, y_new)
            lam, mu = update_multipliers(lam_bar, mu_bar, G, H, st.c)
            st.lam, st.mu = project_multipliers(lam, mu, cfg)
            st.tau *= cfg.delta1
            sig = sigma(prob, x_k, y_new, st.lam)
            # step 7
            if sig < st.eps_k:
                st.eps_k *= cfg.delta1
                event = "mult_ok"
                enter_step2 = True
            else:
                st.c /= cfg.delta1
                event = "mult_c_up"
                enter_step2 = False
        else:
            sig = sigma(prob, x_k, y_new, st.lam)
            enter_step2 = False
        res = max(dn, sig)
        last_dn, last_sigma, last_theta = dn, sig, ls.theta0
        record(event, res, dn, sig, ls.theta0, ls.alpha, inner.iterations, x_k, y_new)
        out_x, out_y = x_k.copy(), y_new.copy()
        st.k += 1
        if ls.stalled:
            status, rule = Status.STALLED, "line_search"
            break
        st.x = ls.x_next
        st.y = ls.y_tilde

    if history:
        out_x = np.array(history[-1].x)
        out_y = np.array(history[-1].y)
    return SolveReport(status, rule, out_x, out_y, st.s.copy(), st.lam.copy(), st.mu.copy(),
                       history, time.perf_counter() - t0, events)


def diagnose(report: SolveReport, window: int = 12) -> str:
    """One-line explanation of how a run ended, for flagged results."""
    parts = [f"{report.status.value}/{report.stop_rule}"]
    steps = [row for row in report.history if row.event != "feas_fail"][-window:]
    if len(steps) >= 4:
        xs = np.array([row.x for row in steps])
        even, odd = xs[0::2], xs[1::2]
        spread = float(np.max(np.abs(xs[:, None, :] - xs[None, :, :])))
        if (spread > 1e-6 and np.ptp(even, axis=0).max() <= 1e-9 * (1 + spread)
                and np.ptp(odd, axis=0).max() <= 1e-9 * (1 + spread)):
            parts.append(f"x alternates between two points {spread:.3g} apart "
                         "(linearized lower point in the line search crosses a kink)")
    fails = sum(row.event == "feas_fail" for row in report.history)
    if report.history and fails > len(report.history) // 2:
        parts.append(f"{fails} of {len(report.history)} passes failed the feasibility test")
    if report.history:
        parts.append(f"final Res {report.history[-1].res:.3g}")
    return "; ".join(parts)
