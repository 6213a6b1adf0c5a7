"""Model problems: source terms and known stresses.

Both problems are posed with the convention ``div sigma = f``.  For Poisson
``sigma = grad u``; for Stokes ``sigma = grad u - p I`` is the pseudostress
of a divergence-free velocity, stored row by row (row i is the gradient of
u_i minus p e_i).
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Callable

import numpy as np
import sympy as sym

from .elements import ElementFamily, Family
from .spaces import KINDS

__all__ = ["Problem", "SOURCES", "make_problem", "stokes_manufactured"]


@dataclass(frozen=True)
class Problem:
    """A model problem on a fixed element family.

    ``source(x, y)`` returns an array shaped like ``x`` (Poisson) or
    ``(2, *x.shape)`` (Stokes).  ``exact_sigma(x, y)`` returns ``(2, ...)``
    or ``(2, 2, ...)`` and is ``None`` when unknown.
    """

    kind: str
    element: ElementFamily
    source: Callable
    exact_sigma: Callable | None = None
    name: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown problem kind {self.kind!r}")

    @property
    def n_components(self) -> int:
        return 2 if self.kind == "stokes" else 1


def _shaped(value, x, kind):
    z = np.zeros_like(np.asarray(x, float))
    if kind == "poisson":
        return z + value
    return np.stack([z + value[0], z + value[1]])


def _poisson_sigma(x, y):
    pi = np.pi
    return np.stack([pi * np.cos(pi * x) * np.sin(pi * y), pi * np.sin(pi * x) * np.cos(pi * y)])


def _poisson_source(x, y):
    return -2.0 * np.pi**2 * np.sin(np.pi * x) * np.sin(np.pi * y)


@lru_cache(maxsize=None)
def stokes_manufactured() -> tuple[Callable, Callable]:
    """Pseudostress and load of a smooth divergence-free flow on the unit square.

    The velocity is the curl of ``(sin(pi x) sin(pi y))^2`` (vanishing with
    its gradient on the boundary) and the pressure ``sin(pi x) cos(pi y)``
    has zero mean.
    """
    x, y = sym.symbols("x y")
    psi = (sym.sin(sym.pi * x) * sym.sin(sym.pi * y)) ** 2
    u = (sym.diff(psi, y), -sym.diff(psi, x))
    p = sym.sin(sym.pi * x) * sym.cos(sym.pi * y)
    sig = [[sym.diff(u[i], v) - (p if i == j else 0) for j, v in enumerate((x, y))] for i in range(2)]
    f = [sym.simplify(sym.diff(sig[i][0], x) + sym.diff(sig[i][1], y)) for i in range(2)]
    sig_fn = sym.lambdify((x, y), sig, "numpy")
    f_fn = sym.lambdify((x, y), f, "numpy")

    def sigma(xx, yy):
        z = np.zeros_like(np.asarray(xx, float))
        return np.array([[z + c for c in row] for row in sig_fn(xx, yy)])

    def source(xx, yy):
        z = np.zeros_like(np.asarray(xx, float))
        return np.array([z + c for c in f_fn(xx, yy)])

    return sigma, source


def _src_manufactured(kind):
    if kind == "poisson":
        return _poisson_source, _poisson_sigma
    sigma, source = stokes_manufactured()
    return source, sigma


def _src_constant(kind, value=1.0):
    v = value if kind == "poisson" else (value, value)
    return (lambda x, y: _shaped(v, x, kind)), None


def _src_zero(kind):
    z = 0.0 if kind == "poisson" else (0.0, 0.0)
    return (lambda x, y: _shaped(z, x, kind)), (lambda x, y: np.zeros((2,) * (1 if kind == "poisson" else 2) + np.shape(x)))


def _src_linear_x(kind):
    if kind == "poisson":
        return (lambda x, y: np.asarray(x, float) + 0.0), None
    return (lambda x, y: np.stack([np.asarray(x, float) + 0.0, np.zeros_like(np.asarray(x, float))])), None


def _src_rotational(kind):
    if kind == "poisson":
        raise ValueError("the rotational source is vector valued (Stokes only)")
    return (lambda x, y: np.stack([-np.asarray(y, float), np.asarray(x, float) + 0.0])), None


SOURCES: dict[str, Callable] = {
    "manufactured": _src_manufactured,
    "constant": _src_constant,
    "zero": _src_zero,
    "linear_x": _src_linear_x,
    "rotational": _src_rotational,
}


def make_problem(kind: str = "poisson", family: str | Family = "rt", order: int = 0,
                 source: str = "manufactured", **params) -> Problem:
    """Build a problem from registry names."""
    if source not in SOURCES:
        raise ValueError(f"unknown source {source!r}; choose from {sorted(SOURCES)}")
    if kind not in KINDS:
        raise ValueError(f"unknown problem kind {kind!r}")
    f, sigma = SOURCES[source](kind, **params)
    return Problem(kind, ElementFamily(Family(family), order), f, sigma, name=source)
