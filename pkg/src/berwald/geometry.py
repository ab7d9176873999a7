"""Pseudo-Riemannian backbone: metric, Christoffel symbols, covariant derivative.

All x-derivatives of metric data come from jet evaluation of the component
expressions; there is no finite differencing and no symbolic differentiation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .expressions import Expr, Num, evaluate, free_symbols, parse
from .jets import EPS_DET, fiber_name, jet_space

__all__ = [
    "MetricModel",
    "TensorField",
    "NearSingularMetricError",
    "MissingOneFormError",
    "constant_tensor",
    "zero_tensor",
    "metric_at",
    "christoffel",
    "nabla_beta",
    "quadratic_form",
    "oneform_value",
]

TensorField = Callable[[np.ndarray], np.ndarray]
"""Map from a base point to T^a_bc components, symmetric in (b, c)."""


class NearSingularMetricError(ArithmeticError):
    pass


class MissingOneFormError(ValueError):
    pass


def _as_expr(value) -> Expr:
    if isinstance(value, str):
        return parse(value)
    if isinstance(value, (int, float)):
        return Num(float(value))
    return value


@dataclass
class MetricModel:
    """A metric (and optional 1-form) given by component expressions.

    The component matrix is symmetric by construction; entries reference only
    the base coordinates.
    """

    coords: tuple[str, ...]
    g: list[list[Expr]]
    beta: list[Expr] | None = None
    name: str = ""
    _nonzero: list[tuple[int, int]] = field(init=False, repr=False)

    def __post_init__(self):
        self.coords = tuple(self.coords)
        n = len(self.coords)
        if len(self.g) != n or any(len(row) != n for row in self.g):
            raise ValueError(f"metric must be {n}x{n} for {n} coordinates")
        self.g = [[_as_expr(entry) for entry in row] for row in self.g]
        for a in range(n):
            for b in range(a):
                if self.g[a][b] != self.g[b][a]:
                    raise ValueError(f"metric entries ({a},{b}) and ({b},{a}) differ")
        if self.beta is not None:
            if len(self.beta) != n:
                raise ValueError("1-form must have one component per coordinate")
            self.beta = [_as_expr(entry) for entry in self.beta]
        allowed = set(self.coords)
        for expr in [e for row in self.g for e in row] + list(self.beta or []):
            unknown = free_symbols(expr) - allowed
            if unknown:
                raise ValueError(f"expression references unknown symbols {sorted(unknown)}")
        self._nonzero = [
            (a, b)
            for a in range(n)
            for b in range(a + 1)
            if self.g[a][b] != Num(0.0)
        ]

    @property
    def n(self) -> int:
        return len(self.coords)

    @classmethod
    def from_lower_triangle(
        cls,
        coords: Sequence[str],
        entries: Mapping[tuple[int, int], Expr | str | float],
        beta=None,
        name: str = "",
    ) -> "MetricModel":
        n = len(coords)
        g: list[list[Expr]] = [[Num(0.0)] * n for _ in range(n)]
        for (a, b), expr in entries.items():
            expr = _as_expr(expr)
            g[a][b] = expr
            g[b][a] = expr
        if beta is not None:
            beta = [_as_expr(entry) for entry in beta]
        return cls(tuple(coords), g, beta, name)


def constant_tensor(array: np.ndarray) -> TensorField:
    array = np.asarray(array, dtype=float)
    return lambda x: array


def zero_tensor(n: int) -> TensorField:
    return constant_tensor(np.zeros((n, n, n)))


def _point_bindings(model: MetricModel, x: np.ndarray) -> dict:
    return {name: float(x[i]) for i, name in enumerate(model.coords)}


def metric_values(model: MetricModel, bindings: Mapping) -> list:
    """Evaluate the component matrix over arbitrary bindings (floats or jets)."""
    n = model.n
    g = [[0.0] * n for _ in range(n)]
    for a, b in model._nonzero:
        value = evaluate(model.g[a][b], bindings)
        g[a][b] = value
        g[b][a] = value
    return g


def metric_at(model: MetricModel, x: np.ndarray, eps_det: float = EPS_DET):
    """Metric component matrix and its inverse at ``x``."""
    g = np.array(metric_values(model, _point_bindings(model, x)), dtype=float)
    det = np.linalg.det(g)
    if not np.isfinite(det) or abs(det) <= eps_det:
        raise NearSingularMetricError(f"|det g| = {abs(det):.3e} at x = {x!r}")
    ginv = np.linalg.inv(g)
    return g, ginv


def _metric_base_derivatives(model: MetricModel, x: np.ndarray) -> np.ndarray:
    """dg[m, a, b] = d g_ab / d x^m, by one base-seeded pass per direction."""
    n = model.n
    space = jet_space(0, 0, 1)
    dg = np.zeros((n, n, n))
    for m in range(n):
        bindings = {
            name: space.variable(float(x[i]), base_seed=1.0 if i == m else 0.0)
            for i, name in enumerate(model.coords)
        }
        for a, b in model._nonzero:
            value = evaluate(model.g[a][b], bindings)
            d = value.partial(base_deg=1) if hasattr(value, "partial") else 0.0
            dg[m, a, b] = d
            dg[m, b, a] = d
    return dg


def christoffel(model: MetricModel, x: np.ndarray, eps_det: float = EPS_DET) -> np.ndarray:
    """Levi-Civita connection coefficients, indexed as gamma[b, a, c]."""
    _, ginv = metric_at(model, x, eps_det)
    dg = _metric_base_derivatives(model, x)
    # gamma^b_ac = 1/2 g^{bq} (d_a g_qc + d_c g_qa - d_q g_ac)
    return 0.5 * np.einsum(
        "bq,aqc->bac", ginv, dg + np.transpose(dg, (2, 1, 0)) - np.transpose(dg, (1, 0, 2))
    )


def nabla_beta(model: MetricModel, x: np.ndarray, eps_det: float = EPS_DET) -> np.ndarray:
    """Levi-Civita covariant derivative of the 1-form: out[a, b] = nabla_a beta_b."""
    if model.beta is None:
        raise MissingOneFormError("model has no 1-form")
    n = model.n
    space = jet_space(0, 0, 1)
    dbeta = np.zeros((n, n))
    beta_values = np.zeros(n)
    for m in range(n):
        bindings = {
            name: space.variable(float(x[i]), base_seed=1.0 if i == m else 0.0)
            for i, name in enumerate(model.coords)
        }
        for b in range(n):
            value = evaluate(model.beta[b], bindings)
            if hasattr(value, "partial"):
                dbeta[m, b] = value.partial(base_deg=1)
                if m == 0:
                    beta_values[b] = value.value
            elif m == 0:
                beta_values[b] = float(value)
    gamma = christoffel(model, x, eps_det)
    return dbeta - np.einsum("cab,c->ab", gamma, beta_values)


def oneform_components(model: MetricModel, x: np.ndarray) -> np.ndarray:
    if model.beta is None:
        raise MissingOneFormError("model has no 1-form")
    bindings = _point_bindings(model, x)
    return np.array([evaluate(entry, bindings) for entry in model.beta], dtype=float)


def quadratic_form(model: MetricModel, bindings: Mapping):
    """A = g_ab(x) dx^a dx^b over plain or jet bindings."""
    velocities = [bindings[fiber_name(name)] for name in model.coords]
    total = 0.0
    for a, b in model._nonzero:
        term = evaluate(model.g[a][b], bindings) * velocities[a] * velocities[b]
        total = total + (term if a == b else 2.0 * term)
    return total


def oneform_value(model: MetricModel, bindings: Mapping):
    """B = beta_a(x) dx^a over plain or jet bindings."""
    if model.beta is None:
        raise MissingOneFormError("model has no 1-form")
    total = 0.0
    for a, name in enumerate(model.coords):
        if model.beta[a] == Num(0.0):
            continue
        total = total + evaluate(model.beta[a], bindings) * bindings[fiber_name(name)]
    return total
