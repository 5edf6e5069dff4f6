"""Bilevel problem model.

Array conventions used everywhere in the package (``d`` upper variables,
``l`` lower variables, ``m`` lower inequalities, ``p``/``q`` upper
inequalities/equalities):

=========  ============  ===========================================
callable   shape         meaning
=========  ============  ===========================================
F          scalar        upper objective
F_x, F_y   (d,), (l,)    gradients
G, H       (p,), (q,)    upper constraints ``G <= 0``, ``H = 0``
G_x, G_y   (p,d), (p,l)  Jacobians (same for H)
f          scalar        lower objective
f_y        (l,)
f_yy       (l,l)
f_xy       (l,d)         ``d/dx`` of ``f_y``
g          (m,)          lower constraints ``g <= 0``
g_x, g_y   (m,d), (m,l)
g_yy       (m,l,l)
g_xy       (m,l,d)       ``d/dx`` of the rows of ``g_y``
=========  ============  ===========================================

Function values (``F, G, H, f, g``) of a problem flagged ``vectorized``
also accept stacked inputs ``x[..., d]``, ``y[..., l]``; the grid oracle
relies on this.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import numkit
from .errors import NonFiniteEvaluation, ShapeMismatch
from .polynomial import PolySystem, Polynomial, parse_problem_text


@dataclass(frozen=True)
class Reference:
    """Known bilevel solution and objective values of a corpus entry."""

    x: np.ndarray
    y: np.ndarray
    F: float
    f: float
    note: str = ""


@dataclass(frozen=True, eq=False)
class BilevelProblem:
    name: str
    d: int
    l: int
    m: int
    p: int
    q: int
    F: Callable
    F_x: Callable
    F_y: Callable
    G: Callable
    G_x: Callable
    G_y: Callable
    H: Callable
    H_x: Callable
    H_y: Callable
    f: Callable
    f_y: Callable
    f_yy: Callable
    f_xy: Callable
    g: Callable
    g_x: Callable
    g_y: Callable
    g_yy: Callable
    g_xy: Callable
    x0: np.ndarray
    y0: np.ndarray
    xbox: np.ndarray
    ybox: np.ndarray
    reference: Optional[Reference] = None
    vectorized: bool = True
    description: str = ""

    def __post_init__(self):
        for key in ("x0", "y0", "xbox", "ybox"):
            arr = np.array(getattr(self, key), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, key, arr)
        if self.x0.shape != (self.d,) or self.y0.shape != (self.l,):
            raise ShapeMismatch(f"{self.name}: default start does not match d={self.d}, l={self.l}")
        if self.xbox.shape != (self.d, 2) or self.ybox.shape != (self.l, 2):
            raise ShapeMismatch(f"{self.name}: box must be (d,2) and (l,2)")

    def replace(self, **changes) -> "BilevelProblem":
        return dataclasses.replace(self, **changes)


def empty_block(k_rows: int = 0) -> Tuple[Callable, Callable, Callable]:
    """Value/Jacobian callables for an absent constraint block."""

    def val(x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        shape = np.broadcast_shapes(x.shape[:-1], y.shape[:-1])
        return np.zeros(shape + (0,))

    def jx(x, y):
        return np.zeros((0, np.asarray(x).shape[-1]))

    def jy(x, y):
        return np.zeros((0, np.asarray(y).shape[-1]))

    return val, jx, jy


def _vec(x, n: int, label: str) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape != (n,):
        raise ShapeMismatch(f"{label} has shape {x.shape}, expected ({n},)")
    return x


def _finite(label: str, *arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NonFiniteEvaluation(f"non-finite value from {label}")


def eval_upper(prob: BilevelProblem, x, y):
    """Raw values ``(F, G, H)`` at ``(x, y)``."""
    x = _vec(x, prob.d, "x")
    y = _vec(y, prob.l, "y")
    F = float(prob.F(x, y))
    G = np.asarray(prob.G(x, y), dtype=float).reshape(prob.p)
    H = np.asarray(prob.H(x, y), dtype=float).reshape(prob.q)
    _finite("upper level", F, G, H)
    return F, G, H


@dataclass(frozen=True, eq=False)
class LowerDerivs:
    f_y: np.ndarray
    f_yy: np.ndarray
    f_xy: np.ndarray
    g: np.ndarray
    g_x: np.ndarray
    g_y: np.ndarray
    g_yy: np.ndarray
    g_xy: np.ndarray


def eval_lower_derivs(prob: BilevelProblem, x, y) -> LowerDerivs:
    x = _vec(x, prob.d, "x")
    y = _vec(y, prob.l, "y")
    d, l, m = prob.d, prob.l, prob.m
    out = LowerDerivs(
        f_y=np.asarray(prob.f_y(x, y), dtype=float).reshape(l),
        f_yy=np.asarray(prob.f_yy(x, y), dtype=float).reshape(l, l),
        f_xy=np.asarray(prob.f_xy(x, y), dtype=float).reshape(l, d),
        g=np.asarray(prob.g(x, y), dtype=float).reshape(m),
        g_x=np.asarray(prob.g_x(x, y), dtype=float).reshape(m, d),
        g_y=np.asarray(prob.g_y(x, y), dtype=float).reshape(m, l),
        g_yy=np.asarray(prob.g_yy(x, y), dtype=float).reshape(m, l, l),
        g_xy=np.asarray(prob.g_xy(x, y), dtype=float).reshape(m, l, d),
    )
    _finite("lower level", *dataclasses.astuple(out))
    return out


@dataclass(frozen=True)
class LagrangianEval:
    value: float
    grad_y: np.ndarray


def lagrangian(prob: BilevelProblem, x, y, u) -> LagrangianEval:
    """``f + u.g`` and its y-gradient."""
    x = _vec(x, prob.d, "x")
    y = _vec(y, prob.l, "y")
    u = _vec(u, prob.m, "u")
    g = np.asarray(prob.g(x, y), dtype=float).reshape(prob.m)
    g_y = np.asarray(prob.g_y(x, y), dtype=float).reshape(prob.m, prob.l)
    value = float(prob.f(x, y)) + float(u @ g)
    grad = np.asarray(prob.f_y(x, y), dtype=float).reshape(prob.l) + g_y.T @ u
    return LagrangianEval(value, grad)


# -- derivative validation -------------------------------------------------

@dataclass
class DerivativeReport:
    tol: float
    errors: Dict[str, float]
    passed: Dict[str, bool]
    points: List[Tuple[np.ndarray, np.ndarray]]

    @property
    def ok(self) -> bool:
        return all(self.passed.values())

    def failures(self) -> List[str]:
        return [k for k, v in self.passed.items() if not v]


def _derivative_checks(prob: BilevelProblem):
    """(name, analytic(x,y)->2-D array, fn(x,y)->1-D array, block) tuples."""
    d, l, m, p, q = prob.d, prob.l, prob.m, prob.p, prob.q

    def scal(fn):
        return lambda x, y: np.atleast_1d(float(fn(x, y)))

    def as2(fn, rows, cols):
        return lambda x, y: np.asarray(fn(x, y), dtype=float).reshape(rows, cols)

    def flat(fn, size):
        return lambda x, y: np.asarray(fn(x, y), dtype=float).reshape(size)

    return [
        ("F_x", as2(prob.F_x, 1, d), scal(prob.F), "x"),
        ("F_y", as2(prob.F_y, 1, l), scal(prob.F), "y"),
        ("G_x", as2(prob.G_x, p, d), flat(prob.G, p), "x"),
        ("G_y", as2(prob.G_y, p, l), flat(prob.G, p), "y"),
        ("H_x", as2(prob.H_x, q, d), flat(prob.H, q), "x"),
        ("H_y", as2(prob.H_y, q, l), flat(prob.H, q), "y"),
        ("f_y", as2(prob.f_y, 1, l), scal(prob.f), "y"),
        ("f_yy", as2(prob.f_yy, l, l), flat(prob.f_y, l), "y"),
        ("f_xy", as2(prob.f_xy, l, d), flat(prob.f_y, l), "x"),
        ("g_x", as2(prob.g_x, m, d), flat(prob.g, m), "x"),
        ("g_y", as2(prob.g_y, m, l), flat(prob.g, m), "y"),
        ("g_yy", as2(prob.g_yy, m * l, l), flat(prob.g_y, m * l), "y"),
        ("g_xy", as2(prob.g_xy, m * l, d), flat(prob.g_y, m * l), "x"),
    ]


def validate_derivatives(prob: BilevelProblem, points, tol: float = 1e-5) -> DerivativeReport:
    """Compare every supplied derivative against central differences.

    The error of one derivative is the worst, over ``points``, of
    ``||analytic - fd||_inf / max(1, ||fd||_inf)``.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    pts = [(np.asarray(x, dtype=float), np.asarray(y, dtype=float)) for x, y in points]
    errors: Dict[str, float] = {}
    for name, analytic, fn, block in _derivative_checks(prob):
        worst = 0.0
        for x, y in pts:
            if block == "x":
                fd = numkit.central_diff_jacobian(lambda v: fn(v, y), x)
            else:
                fd = numkit.central_diff_jacobian(lambda v: fn(x, v), y)
            a = analytic(x, y)
            if a.size == 0:
                continue
            if not np.all(np.isfinite(a)):
                worst = np.inf
                break
            worst = max(worst, numkit.rel_error(a, fd.reshape(a.shape)))
        errors[name] = worst
    passed = {k: bool(v <= tol) for k, v in errors.items()}
    return DerivativeReport(tol, errors, passed, pts)


def hessian_asymmetry(prob: BilevelProblem, x, y) -> float:
    """Largest ``||A - A^T||_inf`` over ``f_yy`` and every ``g_yy[i]``."""
    lo = eval_lower_derivs(prob, x, y)
    worst = numkit.inf_norm(lo.f_yy - lo.f_yy.T)
    for Hi in lo.g_yy:
        worst = max(worst, numkit.inf_norm(Hi - Hi.T))
    return worst


def random_points(prob: BilevelProblem, n: int, rng: np.random.Generator):
    """``n`` uniform points inside the problem's box."""
    xs = rng.uniform(prob.xbox[:, 0], prob.xbox[:, 1], size=(n, prob.d))
    ys = rng.uniform(prob.ybox[:, 0], prob.ybox[:, 1], size=(n, prob.l))
    return list(zip(xs, ys))


# -- constructors ------------------------------------------------------------

def from_polynomials(spec: dict) -> BilevelProblem:
    """Build a problem from the dictionary produced by ``parse_problem_text``."""
    d, l = spec["d"], spec["l"]
    parse = lambda s: Polynomial.parse(s, d, l)  # noqa: E731
    Fs = PolySystem([parse(spec["F"])], d, l)
    fs = PolySystem([parse(spec["f"])], d, l)
    Gs = PolySystem([parse(s) for s in spec.get("G", [])], d, l)
    Hs = PolySystem([parse(s) for s in spec.get("H", [])], d, l)
    gs = PolySystem([parse(s) for s in spec.get("g", [])], d, l)

    xbox = spec.get("xbox")
    ybox = spec.get("ybox")
    if xbox is None:
        xbox = np.tile([-10.0, 10.0], (d, 1))
    if ybox is None:
        ybox = np.tile([-10.0, 10.0], (l, 1))
    ref = None
    if "x_star" in spec and "y_star" in spec:
        ref = Reference(
            np.array(spec["x_star"], dtype=float),
            np.array(spec["y_star"], dtype=float),
            float(spec.get("F_star", np.nan)),
            float(spec.get("f_star", np.nan)),
        )
    return BilevelProblem(
        name=spec["name"], d=d, l=l, m=len(gs.polys), p=len(Gs.polys), q=len(Hs.polys),
        F=lambda x, y: Fs.value(x, y)[..., 0],
        F_x=lambda x, y: Fs.jac(x, y, "x")[0],
        F_y=lambda x, y: Fs.jac(x, y, "y")[0],
        G=Gs.value, G_x=lambda x, y: Gs.jac(x, y, "x"), G_y=lambda x, y: Gs.jac(x, y, "y"),
        H=Hs.value, H_x=lambda x, y: Hs.jac(x, y, "x"), H_y=lambda x, y: Hs.jac(x, y, "y"),
        f=lambda x, y: fs.value(x, y)[..., 0],
        f_y=lambda x, y: fs.jac(x, y, "y")[0],
        f_yy=lambda x, y: fs.second(x, y, "yy")[0],
        f_xy=lambda x, y: fs.second(x, y, "xy")[0],
        g=gs.value,
        g_x=lambda x, y: gs.jac(x, y, "x"),
        g_y=lambda x, y: gs.jac(x, y, "y"),
        g_yy=lambda x, y: gs.second(x, y, "yy"),
        g_xy=lambda x, y: gs.second(x, y, "xy"),
        x0=spec["x0"], y0=spec["y0"], xbox=xbox, ybox=ybox,
        reference=ref, vectorized=True, description=spec.get("description", ""),
    )


def load_problem_file(path) -> BilevelProblem:
    path = Path(path)
    return from_polynomials(parse_problem_text(path.read_text(), source=str(path)))


def _fd_grad(fn, v, steps=None):
    return numkit.central_diff_jacobian(fn, v, steps)


def from_values(
    name: str,
    d: int,
    l: int,
    F: Callable,
    f: Callable,
    G: Optional[Callable] = None,
    H: Optional[Callable] = None,
    g: Optional[Callable] = None,
    p: int = 0,
    q: int = 0,
    m: int = 0,
    x0: Optional[Sequence[float]] = None,
    y0: Optional[Sequence[float]] = None,
    xbox=None,
    ybox=None,
    reference: Optional[Reference] = None,
    vectorized: bool = False,
) -> BilevelProblem:
    """Lift value-only callables into a full problem by central differences.

    First derivatives use steps ``1e-6*max(1,|v|)``; second derivatives
    difference the finite-difference gradient with steps ``1e-4*max(1,|v|)``
    and are symmetrized.
    """
    Gv, Gx0, Gy0 = (G, None, None) if G is not None else empty_block()
    Hv, Hx0, Hy0 = (H, None, None) if H is not None else empty_block()
    gv = g if g is not None else empty_block()[0]

    def hstep(v):
        return 1e-4 * np.maximum(1.0, np.abs(v))

    def jac_x(fn, rows):
        return lambda x, y: _fd_grad(lambda v: fn(v, y), x).reshape(rows, d)

    def jac_y(fn, rows):
        return lambda x, y: _fd_grad(lambda v: fn(x, v), y).reshape(rows, l)

    f_y = lambda x, y: jac_y(f, 1)(x, y)[0]  # noqa: E731
    g_y = jac_y(gv, m)

    def f_yy(x, y):
        Hm = _fd_grad(lambda v: f_y(x, v), y, hstep(y))
        return 0.5 * (Hm + Hm.T)

    def f_xy(x, y):
        return _fd_grad(lambda v: f_y(v, y), x, hstep(x)).reshape(l, d)

    def g_yy(x, y):
        out = _fd_grad(lambda v: g_y(x, v).ravel(), y, hstep(y)).reshape(m, l, l)
        return 0.5 * (out + out.transpose(0, 2, 1))

    def g_xy(x, y):
        return _fd_grad(lambda v: g_y(v, y).ravel(), x, hstep(x)).reshape(m, l, d)

    scal = lambda fn: (lambda x, y: np.atleast_1d(fn(x, y)))  # noqa: E731
    return BilevelProblem(
        name=name, d=d, l=l, m=m, p=p, q=q,
        F=F, F_x=lambda x, y: jac_x(scal(F), 1)(x, y)[0], F_y=lambda x, y: jac_y(scal(F), 1)(x, y)[0],
        G=Gv, G_x=Gx0 or jac_x(Gv, p), G_y=Gy0 or jac_y(Gv, p),
        H=Hv, H_x=Hx0 or jac_x(Hv, q), H_y=Hy0 or jac_y(Hv, q),
        f=f, f_y=lambda x, y: jac_y(scal(f), 1)(x, y)[0], f_yy=f_yy, f_xy=f_xy,
        g=gv, g_x=jac_x(gv, m), g_y=g_y, g_yy=g_yy, g_xy=g_xy,
        x0=np.zeros(d) if x0 is None else x0,
        y0=np.zeros(l) if y0 is None else y0,
        xbox=np.tile([-10.0, 10.0], (d, 1)) if xbox is None else xbox,
        ybox=np.tile([-10.0, 10.0], (l, 1)) if ybox is None else ybox,
        reference=reference, vectorized=vectorized,
    )
