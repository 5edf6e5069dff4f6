"""Barrier augmented-Lagrangian smoothing of the lower-level KKT system.

For the lower problem ``min_y f(x,y) s.t. g(x,y) <= 0`` with barrier
parameter ``r >= 0``, penalty ``rho > 0`` and multiplier estimate ``s``,
each constraint gets a slack/multiplier pair

    t     = rho*s + g
    z     = (sqrt(t^2 + 4 r rho) - t) / 2
    kappa = (sqrt(t^2 + 4 r rho) + t) / 2

so that ``z*kappa = r*rho`` and ``z + g = kappa - rho*s``. The smoothed
residual is ``C = (phi, psi)`` with ``phi = f_y + g_y^T kappa/rho`` and
``psi = z + g``; its root in ``(y, s)`` traces a smooth path that tends
to the KKT pairs of the lower problem as ``r -> 0``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from . import numkit
from .errors import InvalidParameter, ShapeMismatch, SingularMatrix, SingularSensitivity
from .problem import BilevelProblem, LowerDerivs, eval_lower_derivs


@dataclass(frozen=True, eq=False)
class ZKPair:
    z: np.ndarray
    kappa: np.ndarray


@dataclass(frozen=True, eq=False)
class ZKGrads:
    z_xy: np.ndarray  # (m, d+l)
    kappa_xy: np.ndarray  # (m, d+l)
    z_s: np.ndarray  # (m, m) diagonal
    kappa_s: np.ndarray  # (m, m) diagonal


@dataclass(frozen=True, eq=False)
class SmoothingEval:
    zk: ZKPair
    phi: np.ndarray
    psi: np.ndarray
    W: np.ndarray
    jac_ys: np.ndarray
    jac_x: np.ndarray
    Btilde: np.ndarray
    btilde: np.ndarray


@dataclass(frozen=True, eq=False)
class Sensitivity:
    Vtilde: np.ndarray  # (l+m, d)
    V: np.ndarray  # (l, d)
    W: np.ndarray
    Btilde: np.ndarray
    btilde: np.ndarray


@dataclass(frozen=True, eq=False)
class LimitJacobians:
    A_mat: np.ndarray
    a_mat: np.ndarray
    W_choice: np.ndarray


def _check_params(r, rho, smooth: bool = False):
    r = np.asarray(r, dtype=float)
    rho = np.asarray(rho, dtype=float)
    if not np.all(rho > 0):
        raise InvalidParameter(f"rho must be positive, got {rho}")
    if smooth and not np.all(r > 0):
        raise InvalidParameter(f"r must be positive in the smooth regime, got {r}")
    if not np.all(r >= 0):
        raise InvalidParameter(f"r must be nonnegative, got {r}")


def eval_zk(g, s, r, rho) -> ZKPair:
    """Slack ``z`` and multiplier ``kappa`` for each constraint.

    ``r`` and ``rho`` may be scalars or arrays broadcasting against ``g``.

    Whichever of the two is the difference of nearly equal numbers is
    recovered from ``z*kappa = r*rho`` instead, so both keep full relative
    accuracy when ``|rho*s + g| >> sqrt(r*rho)``.
    """
    _check_params(r, rho)
    g = np.asarray(g, dtype=float)
    s = np.asarray(s, dtype=float)
    t = rho * s + g
    rr = r * rho
    root = np.hypot(t, 2.0 * np.sqrt(rr))
    big = root + np.abs(t)
    # small = 2 r rho / (root + |t|); zero only when r = 0
    with np.errstate(invalid="ignore", divide="ignore"):
        small = np.where(big > 0, 2.0 * rr / np.where(big > 0, big, 1.0), 0.0)
    half = 0.5 * big
    z = np.where(t > 0, small, half)
    kappa = np.where(t > 0, half, small)
    return ZKPair(z, kappa)


def _ratios(zk: ZKPair):
    tot = zk.z + zk.kappa
    return zk.z / tot, zk.kappa / tot


def eval_zk_grads(prob: BilevelProblem, x, y, s, r: float, rho: float) -> ZKGrads:
    _check_params(r, rho, smooth=True)
    lo = eval_lower_derivs(prob, x, y)
    zk = eval_zk(lo.g, s, r, rho)
    zr, kr = _ratios(zk)
    grad_g = np.hstack([lo.g_x, lo.g_y])
    return ZKGrads(
        z_xy=-zr[:, None] * grad_g,
        kappa_xy=kr[:, None] * grad_g,
        z_s=np.diag(-rho * zr),
        kappa_s=np.diag(rho * kr),
    )


def eval_sbal(prob: BilevelProblem, x, y, s, r: float, rho: float):
    """Smoothed augmented Lagrangian value with its y- and s-gradients."""
    _check_params(r, rho, smooth=True)
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    s = np.asarray(s, dtype=float)
    g = np.asarray(prob.g(x, y), dtype=float).reshape(prob.m)
    g_y = np.asarray(prob.g_y(x, y), dtype=float).reshape(prob.m, prob.l)
    zk = eval_zk(g, s, r, rho)
    res = zk.z + g
    value = float(prob.f(x, y)) + float(
        np.sum(-r * np.log(zk.z) + s * res + res ** 2 / (2.0 * rho))
    )
    grad_y = np.asarray(prob.f_y(x, y), dtype=float).reshape(prob.l) + g_y.T @ (zk.kappa / rho)
    return value, grad_y, res


def sbal_value(prob: BilevelProblem, x, y, s, r: float, rho: float) -> float:
    g = np.asarray(prob.g(x, y), dtype=float).reshape(prob.m)
    zk = eval_zk(g, s, r, rho)
    res = zk.z + g
    return float(prob.f(x, y)) + float(np.sum(-r * np.log(zk.z) + s * res + res ** 2 / (2.0 * rho)))


def _phi_psi(lo: LowerDerivs, zk: ZKPair, rho: float):
    phi = lo.f_y + lo.g_y.T @ (zk.kappa / rho)
    psi = zk.z + lo.g
    return phi, psi


def eval_C(prob: BilevelProblem, x, y, s, r: float, rho: float) -> np.ndarray:
    """Stacked residual ``(phi; psi)`` of length ``l + m``."""
    _check_params(r, rho)
    lo = eval_lower_derivs(prob, x, y)
    zk = eval_zk(lo.g, s, r, rho)
    return np.concatenate(_phi_psi(lo, zk, rho))


def _hess_y_phi(lo: LowerDerivs, zk: ZKPair, rho: float) -> np.ndarray:
    w_lin = zk.kappa / rho
    _, kr = _ratios(zk)
    Hyy = lo.f_yy + np.tensordot(w_lin, lo.g_yy, axes=1)
    return Hyy + (lo.g_y.T * (kr / rho)) @ lo.g_y


def _jacobians(lo: LowerDerivs, zk: ZKPair, rho: float):
    zr, kr = _ratios(zk)
    w_lin = zk.kappa / rho
    phi_y = _hess_y_phi(lo, zk, rho)
    phi_s = lo.g_y.T * kr
    psi_y = kr[:, None] * lo.g_y
    psi_s = np.diag(-rho * zr)
    phi_x = (
        lo.f_xy
        + np.tensordot(w_lin, lo.g_xy, axes=1)
        + (lo.g_y.T * (kr / rho)) @ lo.g_x
    )
    psi_x = kr[:, None] * lo.g_x
    jac_ys = np.block([[phi_y, phi_s], [psi_y, psi_s]])
    jac_x = np.vstack([phi_x, psi_x])
    return jac_ys, jac_x


def jac_C(prob: BilevelProblem, x, y, s, r: float, rho: float):
    """``(d C / d(y,s), d C / dx)`` with shapes ``(l+m, l+m)`` and ``(l+m, d)``."""
    _check_params(r, rho, smooth=True)
    lo = eval_lower_derivs(prob, x, y)
    zk = eval_zk(lo.g, s, r, rho)
    return _jacobians(lo, zk, rho)


def weights(zk: ZKPair, rho: float) -> np.ndarray:
    """Diagonal of ``W``: ``z / (z + kappa/rho)``, in ``[0, 1]``."""
    return zk.z / (zk.z + zk.kappa / rho)


def _sensitivity_system(lo: LowerDerivs, zk: ZKPair, rho: float):
    l = lo.f_y.size
    m = lo.g.size
    w = weights(zk, rho)
    w_lin = zk.kappa / rho
    upper = lo.f_yy + np.tensordot(w_lin, lo.g_yy, axes=1)
    upper = 0.5 * (upper + upper.T)
    B = np.block([
        [upper, lo.g_y.T],
        [(w - 1.0)[:, None] * lo.g_y, np.diag(w)],
    ])
    b = np.vstack([
        lo.f_xy + np.tensordot(w_lin, lo.g_xy, axes=1),
        (w - 1.0)[:, None] * lo.g_x,
    ])
    assert B.shape == (l + m, l + m)
    return w, B, b


def evaluate(prob: BilevelProblem, x, y, s, r: float, rho: float) -> SmoothingEval:
    """Everything the smoothing layer knows at one point."""
    _check_params(r, rho, smooth=True)
    lo = eval_lower_derivs(prob, x, y)
    zk = eval_zk(lo.g, s, r, rho)
    phi, psi = _phi_psi(lo, zk, rho)
    jac_ys, jac_x = _jacobians(lo, zk, rho)
    w, B, b = _sensitivity_system(lo, zk, rho)
    return SmoothingEval(zk, phi, psi, w, jac_ys, jac_x, B, b)


def sensitivity(prob: BilevelProblem, x, y, s, r: float, rho: float) -> Sensitivity:
    """Solve ``btilde + Btilde Vtilde = 0`` for the stacked ``(dy/dx; ds/dx)``.

    Raises :class:`SingularSensitivity` when ``Btilde`` is numerically
    singular; no regularization is attempted here.
    """
    _check_params(r, rho, smooth=True)
    lo = eval_lower_derivs(prob, x, y)
    zk = eval_zk(lo.g, s, r, rho)
    w, B, b = _sensitivity_system(lo, zk, rho)
    try:
        Vt = numkit.solve_dense(B, -b)
    except SingularMatrix as exc:
        raise SingularSensitivity(str(exc)) from exc
    return Sensitivity(Vt, Vt[: prob.l], w, B, b)


def limit_jacobians(prob: BilevelProblem, x, y, u, W_choice) -> LimitJacobians:
    """The matrices ``A(x, W)`` and ``a(x, W)`` at a KKT pair ``(y, u)``.

    ``-A^{-1} a`` is the derivative of the primal-dual solution map
    selected by the diagonal ``W_choice`` (1 = inactive, 0 = active).
    """
    u = np.asarray(u, dtype=float)
    W_choice = np.asarray(W_choice, dtype=float)
    if W_choice.ndim == 2:
        W_choice = np.diag(W_choice)
    if u.shape != (prob.m,) or W_choice.shape != (prob.m,):
        raise ShapeMismatch("u and W_choice must have length m")
    if np.any(W_choice < 0) or np.any(W_choice > 1):
        raise InvalidParameter("W_choice entries must lie in [0, 1]")
    lo = eval_lower_derivs(prob, x, y)
    upper = lo.f_yy + np.tensordot(u, lo.g_yy, axes=1)
    A = np.block([
        [upper, lo.g_y.T],
        [(W_choice - 1.0)[:, None] * lo.g_y, np.diag(W_choice)],
    ])
    a = np.vstack([
        lo.f_xy + np.tensordot(u, lo.g_xy, axes=1),
        (W_choice - 1.0)[:, None] * lo.g_x,
    ])
    return LimitJacobians(A, a, W_choice)


def kkt_residual_bound(prob: BilevelProblem, x, y, r: float, rho: float) -> float:
    """``(1 + m C / rho) sqrt(r rho)`` with ``C = max_i ||grad_y g_i||``."""
    lo = eval_lower_derivs(prob, x, y)
    C = float(np.max(np.linalg.norm(lo.g_y, axis=1))) if prob.m else 0.0
    return (1.0 + prob.m * C / rho) * np.sqrt(r * rho)


def solve_path(
    prob: BilevelProblem,
    x,
    r: float,
    rho: float,
    y0=None,
    s0=None,
    tol: float = 1e-13,
    max_iter: int = 200,
) -> Tuple[np.ndarray, np.ndarray]:
    """Root ``(y_r(x), s_r(x))`` of ``C`` by damped Newton in ``(y, s)``.

    Used as the reference smoothing path in tests and diagnostics; the
    outer algorithm never calls it.
    """
    _check_params(r, rho, smooth=True)
    l, m = prob.l, prob.m
    y = np.array(prob.y0 if y0 is None else y0, dtype=float)
    s = np.ones(m) if s0 is None else np.array(s0, dtype=float)
    v = np.concatenate([y, s])
    res = eval_C(prob, x, v[:l], v[l:], r, rho)
    for _ in range(max_iter):
        nrm = np.linalg.norm(res)
        if nrm <= tol * (1.0 + np.linalg.norm(v)):
            return v[:l], v[l:]
        J, _ = jac_C(prob, x, v[:l], v[l:], r, rho)
        step = numkit.solve_dense(J, -res)
        t = 1.0
        while t > 1e-12:
            trial = v + t * step
            new = eval_C(prob, x, trial[:l], trial[l:], r, rho)
            if np.linalg.norm(new) <= (1.0 - 1e-4 * t) * nrm:
                break
            t *= 0.5
        else:
            break
        v, res = trial, new
    if np.linalg.norm(res) <= 1e3 * tol * (1.0 + np.linalg.norm(v)):
        return v[:l], v[l:]
    raise RuntimeError(f"smoothing path solve stalled at ||C|| = {np.linalg.norm(res):.3e}")
