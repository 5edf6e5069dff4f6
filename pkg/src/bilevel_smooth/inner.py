"""Newton minimization of the smoothed lower-level function in ``y``."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .problem import BilevelProblem, eval_lower_derivs
from .smoothing import _check_params, _hess_y_phi, _phi_psi, eval_zk, sbal_value


class InnerStatus(str, enum.Enum):
    CONVERGED = "Converged"
    MAX_ITERATIONS = "MaxIterations"
    LINE_SEARCH_STALL = "LineSearchStall"
    SINGULAR_HESSIAN = "SingularHessian"


@dataclass(frozen=True)
class InnerOptions:
    max_iter: int = 200
    armijo: float = 1e-4
    backtrack: float = 0.5
    max_halvings: int = 60
    shift0: float = 1e-6
    shift_growth: float = 10.0
    max_shifts: int = 8


@dataclass
class InnerResult:
    y: np.ndarray
    phi_norm: float
    iterations: int
    status: InnerStatus
    last_step: float = 0.0
    values: List[float] = field(default_factory=list)

    @property
    def converged(self) -> bool:
        return self.status is InnerStatus.CONVERGED


def _phi_and_hessian(prob, x, y, s, r, rho):
    lo = eval_lower_derivs(prob, x, y)
    zk = eval_zk(lo.g, s, r, rho)
    phi, _ = _phi_psi(lo, zk, rho)
    return phi, _hess_y_phi(lo, zk, rho)


def _newton_direction(Hm: np.ndarray, phi: np.ndarray, opts: InnerOptions):
    """Cholesky-based Newton step, shifted by ``tau*I`` until it is a descent direction."""
    n = phi.size
    tau = 0.0
    for attempt in range(opts.max_shifts + 1):
        try:
            L = np.linalg.cholesky(Hm + tau * np.eye(n))
        except np.linalg.LinAlgError:
            L = None
        if L is not None:
            step = -np.linalg.solve(L.T, np.linalg.solve(L, phi))
            if np.all(np.isfinite(step)) and step @ phi < 0:
                return step, True
        tau = opts.shift0 if tau == 0.0 else tau * opts.shift_growth
    return -phi, False


def minimize_y(
    prob: BilevelProblem,
    x,
    s,
    r: float,
    rho: float,
    y_start,
    gamma: float,
    opts: Optional[InnerOptions] = None,
) -> InnerResult:
    """Drive ``||phi(x, ., s)||_2`` below ``gamma``.

    Steps are accepted by an Armijo test on the smoothed Lagrangian value.
    Once that value stops resolving the predicted decrease (differences
    at the level of rounding) a full Newton step is still accepted when it
    does not raise the value and shrinks ``||phi||``.
    """
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    _check_params(r, rho, smooth=True)
    opts = opts or InnerOptions()
    x = np.asarray(x, dtype=float)
    s = np.asarray(s, dtype=float)
    y = np.array(y_start, dtype=float)
    phi, Hm = _phi_and_hessian(prob, x, y, s, r, rho)
    val = sbal_value(prob, x, y, s, r, rho)
    values = [val]
    last = 0.0
    status = InnerStatus.MAX_ITERATIONS
    it = 0
    while True:
        pn = float(np.linalg.norm(phi))
        if pn <= gamma:
            status = InnerStatus.CONVERGED
            break
        if it >= opts.max_iter:
            break
        step, newton_ok = _newton_direction(Hm, phi, opts)
        slope = float(step @ phi)
        t = 1.0
        accepted = False
        for _ in range(opts.max_halvings):
            trial = y + t * step
            tv = sbal_value(prob, x, trial, s, r, rho)
            if np.isfinite(tv) and tv <= val + opts.armijo * t * slope and tv < val:
                accepted = True
                break
            t *= opts.backtrack
        if not accepted:
            trial = y + step
            tv = sbal_value(prob, x, trial, s, r, rho)
            noise = 64 * np.finfo(float).eps * max(1.0, abs(val))
            if newton_ok and np.isfinite(tv) and tv <= val + noise:
                tphi, _ = _phi_and_hessian(prob, x, trial, s, r, rho)
                if np.linalg.norm(tphi) < pn:
                    t = 1.0
                    accepted = True
        if not accepted:
            status = InnerStatus.SINGULAR_HESSIAN if not newton_ok else InnerStatus.LINE_SEARCH_STALL
            break
        last = float(t * np.linalg.norm(step))
        y = trial
        val = tv
        values.append(val)
        it += 1
        phi, Hm = _phi_and_hessian(prob, x, y, s, r, rho)
    return InnerResult(y, float(np.linalg.norm(phi)), it, status, last, values)


def inner_step_diagnostics(prob: BilevelProblem, x, y, s, r: float, rho: float):
    """Smallest eigenvalue of ``d phi / d y`` and the length of the Newton step there."""
    _check_params(r, rho, smooth=True)
    phi, Hm = _phi_and_hessian(prob, np.asarray(x, float), np.asarray(y, float),
                               np.asarray(s, float), r, rho)
    eig_min = float(np.linalg.eigvalsh(0.5 * (Hm + Hm.T))[0])
    try:
        step = np.linalg.solve(Hm, -phi)
        step_norm = float(np.linalg.norm(step))
    except np.linalg.LinAlgError:
        step_norm = float("inf")
    return eig_min, step_norm
