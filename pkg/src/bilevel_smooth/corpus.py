"""In-repo corpus of analytic bilevel test problems.

Every entry carries a box for the grid oracle and a reference solution
obtained by reducing the lower level analytically (substituting its
closed-form solution map and minimizing the resulting one- or
two-dimensional upper problem by hand).

=================  ===  ===  ===  ===  ===  ==========================================
name               d    l    m    p    q    what it exercises
=================  ===  ===  ===  ===  ===  ==========================================
qp_kink            1    1    1    0    0    y(x)=max(x,0), kink at x=0
lin_upper_con      1    1    1    1    0    active upper inequality, lambda > 0
eq_coupled         1    1    1    0    1    upper equality through (1,1)
inactive_lower     1    1    1    0    0    lower constraint never active
active_lower       1    1    1    0    0    lower constraint strictly active
box_lower          1    1    2    0    0    two-sided lower bounds, upper one active
y_capped           1    1    1    1    0    upper inequality in y only
kink_solution      1    1    1    0    0    optimum sits on the kink (SC fails)
quartic_lower      1    1    1    0    0    non-quadratic convex lower level
eq_binding         2    1    1    0    1    binding upper equality, mu != 0
two_sided          1    2    2    0    0    one bound active, one inactive
quad_2x2           2    2    2    0    0    d = l = 2, mixed activity
=================  ===  ===  ===  ===  ===  ==========================================
"""
from __future__ import annotations

from functools import lru_cache
from typing import Dict, List

import numpy as np

from .errors import UnknownProblem
from .problem import BilevelProblem, Reference, empty_block, from_polynomials


def _qp_kink_base(name, G=None, H=None, reference=None, description=""):
    # F = (x-1)^2 + (y-1)^2, f = y^2/2 - x y, g = -y
    def F(x, y):
        return (x[..., 0] - 1.0) ** 2 + (y[..., 0] - 1.0) ** 2

    def F_x(x, y):
        return np.array([2.0 * (x[0] - 1.0)])

    def F_y(x, y):
        return np.array([2.0 * (y[0] - 1.0)])

    def f(x, y):
        return 0.5 * y[..., 0] ** 2 - x[..., 0] * y[..., 0]

    def f_y(x, y):
        return np.array([y[0] - x[0]])

    def g(x, y):
        return -np.asarray(y, dtype=float)[..., :1]

    Gv, Gx, Gy = G if G is not None else empty_block()
    Hv, Hx, Hy = H if H is not None else empty_block()
    return BilevelProblem(
        name=name, d=1, l=1, m=1,
        p=0 if G is None else 1, q=0 if H is None else 1,
        F=F, F_x=F_x, F_y=F_y,
        G=Gv, G_x=Gx, G_y=Gy, H=Hv, H_x=Hx, H_y=Hy,
        f=f, f_y=f_y,
        f_yy=lambda x, y: np.array([[1.0]]),
        f_xy=lambda x, y: np.array([[-1.0]]),
        g=g,
        g_x=lambda x, y: np.zeros((1, 1)),
        g_y=lambda x, y: np.array([[-1.0]]),
        g_yy=lambda x, y: np.zeros((1, 1, 1)),
        g_xy=lambda x, y: np.zeros((1, 1, 1)),
        x0=[0.5], y0=[0.5], xbox=[[-2.0, 2.0]], ybox=[[-2.0, 2.0]],
        reference=reference, vectorized=True, description=description,
    )


def _qp_kink():
    return _qp_kink_base(
        "qp_kink",
        reference=Reference(np.array([1.0]), np.array([1.0]), 0.0, -0.5,
                            "y(x)=max(x,0); min (x-1)^2+(max(x,0)-1)^2 at x=1"),
        description="kinked lower solution map, unconstrained upper level",
    )


def _lin_upper_con():
    G = (
        lambda x, y: np.asarray(x, dtype=float)[..., :1] - 0.75,
        lambda x, y: np.array([[1.0]]),
        lambda x, y: np.array([[0.0]]),
    )
    return _qp_kink_base(
        "lin_upper_con", G=G,
        reference=Reference(np.array([0.75]), np.array([0.75]), 0.125, -0.28125,
                            "2(x-1)^2 decreasing on (0,0.75]; lambda=1"),
        description="qp_kink plus x <= 0.75",
    )


def _eq_coupled():
    H = (
        lambda x, y: (np.asarray(x, dtype=float)[..., 0] + np.asarray(y, dtype=float)[..., 0] - 2.0)[..., None],
        lambda x, y: np.array([[1.0]]),
        lambda x, y: np.array([[1.0]]),
    )
    return _qp_kink_base(
        "eq_coupled", H=H,
        reference=Reference(np.array([1.0]), np.array([1.0]), 0.0, -0.5,
                            "x + max(x,0) = 2 forces x = 1"),
        description="qp_kink plus x + y = 2",
    )


_POLY_SPECS: Dict[str, dict] = {
    "inactive_lower": dict(
        d=1, l=1,
        F="x1^2 - 4*x1 + 4 + y1^2 - 2*y1 + 1",
        f="y1^2 - 2*x1*y1 + x1^2",
        g=["y1 - 10"],
        x0=[0.0], y0=[0.0], xbox=[[-3, 3]], ybox=[[-3, 3]],
        x_star=[1.5], y_star=[1.5], F_star=0.5, f_star=0.0,
    ),
    "active_lower": dict(
        d=1, l=1,
        F="x1^2 - 2*x1 + 1 + y1^2 - 4*y1 + 4",
        f="y1^2 - 2*x1*y1 - 2*y1 + x1^2 + 2*x1 + 1",
        g=["y1 - 1"],
        x0=[0.0], y0=[0.0], xbox=[[-2, 3]], ybox=[[-2, 3]],
        x_star=[1.0], y_star=[1.0], F_star=1.0, f_star=1.0,
    ),
    "box_lower": dict(
        d=1, l=1,
        F="x1^2 - 4*x1 + 4 + 2*y1^2 - 2*y1 + 0.5",
        f="0.5*y1^2 - x1*y1 + 0.5*x1^2",
        g=["-y1", "y1 - 1"],
        x0=[0.5], y0=[0.5], xbox=[[-1, 3]], ybox=[[-1, 2]],
        x_star=[2.0], y_star=[1.0], F_star=0.5, f_star=0.5,
    ),
    "y_capped": dict(
        d=1, l=1,
        F="x1^2 - 2*x1 + 1 + y1^2 - 2*y1 + 1",
        f="0.5*y1^2 - x1*y1",
        g=["-y1"],
        G=["y1 - 0.5"],
        x0=[0.0], y0=[0.0], xbox=[[-2, 2]], ybox=[[-2, 2]],
        x_star=[0.5], y_star=[0.5], F_star=0.5, f_star=-0.125,
    ),
    "kink_solution": dict(
        d=1, l=1,
        F="x1^2 - x1 + 0.25 + y1^2 + 2*y1 + 1",
        f="0.5*y1^2 - x1*y1",
        g=["-y1"],
        x0=[0.5], y0=[0.5], xbox=[[-2, 2]], ybox=[[-2, 2]],
        x_star=[0.0], y_star=[0.0], F_star=1.25, f_star=0.0,
    ),
    "quartic_lower": dict(
        d=1, l=1,
        F="x1^2 - 4*x1 + 4 + y1^2 - 2*y1 + 1",
        f="0.25*y1^4 + 0.5*y1^2 - x1*y1",
        g=["-y1"],
        x0=[0.5], y0=[0.5], xbox=[[-1, 3]], ybox=[[-1, 3]],
        x_star=[2.0], y_star=[1.0], F_star=0.0, f_star=-1.25,
    ),
    "eq_binding": dict(
        d=2, l=1,
        F="x1^2 - 2*x1 + 1 + x2^2 - 2*x2 + 1 + y1^2 - 2*y1 + 1",
        f="0.5*y1^2 - x1*y1",
        g=["-y1"],
        H=["x1 + x2 - 1"],
        x0=[0.5, 0.5], y0=[0.5], xbox=[[-1, 2], [-1, 2]], ybox=[[-1, 2]],
        x_star=[2 / 3, 1 / 3], y_star=[2 / 3], F_star=2 / 3, f_star=-2 / 9,
    ),
    "two_sided": dict(
        d=1, l=2,
        F="x1^2 - x1 + 0.25 + y1^2 - 2*y1 + 1 + y2^2 - 2*y2 + 1",
        f="0.5*y1^2 - x1*y1 + 0.5*y2^2 + x1*y2 + x1^2",
        g=["-y1", "-y2"],
        x0=[0.5], y0=[0.5, 0.5], xbox=[[-2, 2]], ybox=[[-2, 2], [-2, 2]],
        x_star=[0.75], y_star=[0.75, 0.0], F_star=1.125, f_star=0.28125,
    ),
    "quad_2x2": dict(
        d=2, l=2,
        F="x1^2 - 2*x1 + 1 + x2^2 + 2*x2 + 1 + y1^2 - 2*y1 + 1 + y2^2 - 2*y2 + 1",
        f="0.5*y1^2 + 0.5*y2^2 - x1*y1 - x2*y2",
        g=["-y1", "-y2"],
        x0=[0.5, 0.5], y0=[0.5, 0.5], xbox=[[-2, 2], [-2, 2]], ybox=[[-2, 2], [-2, 2]],
        x_star=[1.0, -1.0], y_star=[1.0, 0.0], F_star=1.0, f_star=-0.5,
    ),
}


def _from_spec(name: str) -> BilevelProblem:
    spec = dict(_POLY_SPECS[name], name=name)
    spec["xbox"] = np.array(spec["xbox"], dtype=float)
    spec["ybox"] = np.array(spec["ybox"], dtype=float)
    return from_polynomials(spec)


_BUILDERS = {
    "qp_kink": _qp_kink,
    "lin_upper_con": _lin_upper_con,
    "eq_coupled": _eq_coupled,
}
for _name in _POLY_SPECS:
    _BUILDERS[_name] = (lambda n: (lambda: _from_spec(n)))(_name)

NAMES: List[str] = [
    "qp_kink", "lin_upper_con", "eq_coupled", "inactive_lower", "active_lower",
    "box_lower", "y_capped", "kink_solution", "quartic_lower", "eq_binding",
    "two_sided", "quad_2x2",
]


@lru_cache(maxsize=None)
def corpus_get(name: str) -> BilevelProblem:
    """Return the registered problem ``name`` (cached, immutable)."""
    try:
        builder = _BUILDERS[name]
    except KeyError:
        raise UnknownProblem(f"unknown corpus problem {name!r}") from None
    return builder()


def corpus_names() -> List[str]:
    return list(NAMES)
