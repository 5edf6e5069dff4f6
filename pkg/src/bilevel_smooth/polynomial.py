"""Sparse multivariate polynomials in ``x1..xd, y1..yl`` and the problem-file reader.

Expression grammar (whitespace ignored, no parentheses)::

    expr    := ["+"|"-"] term (("+"|"-") term)*
    term    := factor ("*" factor)*
    factor  := number | var ["^" integer]
    var     := "x" index | "y" index          (1-based)

so ``0.5*y1^2 - x1*y1 + 3`` is valid while ``(x1-1)^2`` is not.

A problem file is a list of ``key = value`` lines; ``#`` starts a comment.
Keys ``G``, ``H`` and ``g`` may repeat, one line per component::

    name = quartic_lower
    d = 1
    l = 1
    F = x1^2 - 4*x1 + 4 + y1^2 - 2*y1 + 1
    f = 0.25*y1^4 + 0.5*y1^2 - x1*y1
    g = -y1
    x0 = 0.5
    y0 = 0.5
    xbox = -1 3            # lo hi per x coordinate
    ybox = -1 3
    F_star = 0             # optional reference values
    f_star = -1.25
    x_star = 2
    y_star = 1
"""
from __future__ import annotations

import re
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .errors import ProblemFormatError

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<var>[xy]\d+)|(?P<op>[-+*^]))"
)


class Polynomial:
    """Immutable sparse polynomial over ``n`` variables.

    Evaluation accepts any array whose last axis has length ``n`` and
    broadcasts over the leading axes.
    """

    __slots__ = ("n", "exps", "coeffs")

    def __init__(self, n: int, terms: Dict[Tuple[int, ...], float]):
        kept = {e: c for e, c in terms.items() if c != 0.0}
        self.n = n
        if kept:
            keys = sorted(kept)
            self.exps = np.array(keys, dtype=int).reshape(len(keys), n)
            self.coeffs = np.array([kept[k] for k in keys], dtype=float)
        else:
            self.exps = np.zeros((0, n), dtype=int)
            self.coeffs = np.zeros(0)

    @classmethod
    def parse(cls, text: str, d: int, l: int) -> "Polynomial":
        n = d + l
        pos = 0
        tokens = []
        text = text.strip()
        while pos < len(text):
            m = _TOKEN.match(text, pos)
            if m is None or m.end() == pos:
                raise ProblemFormatError(f"cannot parse {text[pos:]!r} in {text!r}")
            tokens.append((m.lastgroup, m.group(m.lastgroup)))
            pos = m.end()
            while pos < len(text) and text[pos].isspace():
                pos += 1
        if not tokens:
            raise ProblemFormatError("empty polynomial expression")

        terms: Dict[Tuple[int, ...], float] = {}
        i = 0
        while i < len(tokens):
            sign = 1.0
            while i < len(tokens) and tokens[i] in (("op", "+"), ("op", "-")):
                if tokens[i][1] == "-":
                    sign = -sign
                i += 1
            coeff = sign
            exps = [0] * n
            expect_factor = True
            while i < len(tokens):
                kind, val = tokens[i]
                if expect_factor:
                    if kind == "num":
                        coeff *= float(val)
                        i += 1
                    elif kind == "var":
                        j = int(val[1:]) - 1
                        limit = d if val[0] == "x" else l
                        if not 0 <= j < limit:
                            raise ProblemFormatError(f"variable {val} out of range")
                        idx = j if val[0] == "x" else d + j
                        power = 1
                        i += 1
                        if i < len(tokens) and tokens[i] == ("op", "^"):
                            if i + 1 >= len(tokens) or tokens[i + 1][0] != "num":
                                raise ProblemFormatError(f"bad exponent after {val}")
                            p = float(tokens[i + 1][1])
                            if p != int(p) or p < 0:
                                raise ProblemFormatError(f"exponent {p} not a natural number")
                            power = int(p)
                            i += 2
                        exps[idx] += power
                    else:
                        raise ProblemFormatError(f"unexpected {val!r} in {text!r}")
                    expect_factor = False
                elif (kind, val) == ("op", "*"):
                    expect_factor = True
                    i += 1
                elif kind == "op" and val in "+-":
                    break
                else:
                    raise ProblemFormatError(f"unexpected {val!r} in {text!r}")
            if expect_factor:
                raise ProblemFormatError(f"dangling operator in {text!r}")
            key = tuple(exps)
            terms[key] = terms.get(key, 0.0) + coeff
        return cls(n, terms)

    def __call__(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        if self.coeffs.size == 0:
            return np.zeros(v.shape[:-1])
        # (..., T, n) -> product over n
        mono = np.prod(v[..., None, :] ** self.exps, axis=-1)
        return mono @ self.coeffs

    def diff(self, j: int) -> "Polynomial":
        terms: Dict[Tuple[int, ...], float] = {}
        for e, c in zip(self.exps, self.coeffs):
            if e[j] == 0:
                continue
            k = list(e)
            k[j] -= 1
            key = tuple(int(t) for t in k)
            terms[key] = terms.get(key, 0.0) + c * e[j]
        return Polynomial(self.n, terms)

    def __repr__(self) -> str:
        return f"Polynomial(n={self.n}, terms={len(self.coeffs)})"


class PolySystem:
    """A stack of polynomials sharing one variable layout ``(x, y)``.

    Provides values, first derivatives in ``x``/``y`` and second
    derivatives ``yy``/``xy`` with the package's array conventions.
    """

    def __init__(self, polys: Sequence[Polynomial], d: int, l: int):
        self.polys = list(polys)
        self.d, self.l = d, l
        n = d + l
        self.grad = [[p.diff(j) for j in range(n)] for p in self.polys]
        self.hess = [[[gj.diff(k) for k in range(n)] for gj in row] for row in self.grad]

    @staticmethod
    def _stack(x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        shape = np.broadcast_shapes(x.shape[:-1], y.shape[:-1])
        x = np.broadcast_to(x, shape + x.shape[-1:])
        y = np.broadcast_to(y, shape + y.shape[-1:])
        return np.concatenate([x, y], axis=-1)

    def value(self, x, y) -> np.ndarray:
        v = self._stack(x, y)
        if not self.polys:
            return np.zeros(v.shape[:-1] + (0,))
        return np.stack([p(v) for p in self.polys], axis=-1)

    def jac(self, x, y, block: str) -> np.ndarray:
        v = self._stack(x, y)
        cols = range(self.d) if block == "x" else range(self.d, self.d + self.l)
        return np.array([[self.grad[i][j](v) for j in cols] for i in range(len(self.polys))],
                        dtype=float).reshape(len(self.polys), len(cols))

    def second(self, x, y, block: str) -> np.ndarray:
        """``(k, l, l)`` for ``yy`` or ``(k, l, d)`` for ``xy``."""
        v = self._stack(x, y)
        rows = range(self.d, self.d + self.l)
        cols = range(self.d) if block == "xy" else rows
        out = np.array(
            [[[self.hess[i][a][b](v) for b in cols] for a in rows] for i in range(len(self.polys))],
            dtype=float,
        )
        return out.reshape(len(self.polys), self.l, len(cols))


def _floats(text: str) -> List[float]:
    try:
        return [float(t) for t in text.replace(",", " ").split()]
    except ValueError as exc:
        raise ProblemFormatError(f"expected numbers, got {text!r}") from exc


def parse_problem_text(text: str, source: str = "<string>") -> dict:
    """Parse the ``key = value`` format into a raw dictionary.

    Returns polynomial strings untouched; :func:`problem.from_polynomials`
    builds the actual problem.
    """
    raw: Dict[str, List[str]] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ProblemFormatError(f"{source}:{lineno}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        raw.setdefault(key, []).append(val)

    def one(key, default=None):
        vals = raw.get(key)
        if vals is None:
            if default is None:
                raise ProblemFormatError(f"{source}: missing required key {key!r}")
            return default
        if len(vals) > 1:
            raise ProblemFormatError(f"{source}: key {key!r} given more than once")
        return vals[0]

    try:
        d = int(one("d"))
        l = int(one("l"))
    except ValueError as exc:
        raise ProblemFormatError(f"{source}: d and l must be integers") from exc
    spec = {
        "name": one("name", Path(source).stem),
        "d": d,
        "l": l,
        "F": one("F"),
        "f": one("f"),
        "G": raw.get("G", []),
        "H": raw.get("H", []),
        "g": raw.get("g", []),
        "x0": _floats(one("x0", " ".join(["0"] * d))),
        "y0": _floats(one("y0", " ".join(["0"] * l))),
    }
    for key, dim in (("xbox", d), ("ybox", l)):
        if key in raw:
            vals = _floats(one(key))
            if len(vals) == 2 and dim > 1:
                vals = vals * dim
            if len(vals) != 2 * dim:
                raise ProblemFormatError(f"{source}: {key} needs {2 * dim} numbers")
            spec[key] = np.array(vals).reshape(dim, 2)
    for key in ("F_star", "f_star"):
        if key in raw:
            spec[key] = float(one(key))
    for key in ("x_star", "y_star"):
        if key in raw:
            spec[key] = _floats(one(key))
    if len(spec["x0"]) != d or len(spec["y0"]) != l:
        raise ProblemFormatError(f"{source}: start point does not match d={d}, l={l}")
    return spec
