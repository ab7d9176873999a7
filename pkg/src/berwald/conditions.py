"""Residual evaluators for the first-order Berwald condition.

A Finsler Lagrangian L = Omega * A (with A the quadratic form of a metric g)
is Berwald exactly when a symmetric (1,2)-tensor T on the base exists with

    d Omega/dx^a - Gamma^b_ac v^c dOmega/dv^b
        = T^b_ac v^c (dOmega/dv^b + 2 v_b Omega / A).

This module evaluates that residual pointwise, the special case of a
velocity-independent conformal factor, and extracts T from the affine
coefficients of a geometry already classified as Berwald.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from .expressions import Expr, evaluate, free_symbols, parse
from .finsler import FinslerLagrangian, affine_coefficients
from .geometry import MetricModel, TensorField, christoffel, metric_at, quadratic_form
from .jets import TangentPoint, seed

__all__ = [
    "OmegaField",
    "omega_from_lagrangian",
    "theorem1_residual",
    "tavakol_residual",
    "extract_T",
]


@dataclass
class OmegaField:
    """A 0-homogeneous factor on the tangent bundle, evaluable over jets."""

    evaluate: Callable[[Mapping], Any]
    zero_homogeneous: bool = True


def omega_from_lagrangian(L: FinslerLagrangian, m: MetricModel) -> OmegaField:
    """Omega = L / A; every Lagrangian factors through the metric this way."""

    def evaluate_omega(bindings):
        return L.evaluate(bindings) / quadratic_form(m, bindings)

    return OmegaField(evaluate_omega)


def _omega_derivatives(omega: OmegaField, m: MetricModel, p: TangentPoint):
    """Value, base gradient and fiber gradient of Omega, one pass per direction."""
    n = m.n
    d_base = np.zeros(n)
    d_fiber = np.zeros(n)
    value = 0.0
    for direction in range(n):
        bindings = seed(p, m.coords, base_dirs=(direction,), orders=(1, 1))
        jet = omega.evaluate(bindings)
        d_base[direction] = jet.partial(base_deg=1)
        if direction == 0:
            value = jet.value
            for b in range(n):
                alpha = tuple(1 if q == b else 0 for q in range(n))
                d_fiber[b] = jet.partial(alpha)
    return value, d_base, d_fiber


def theorem1_residual(omega: OmegaField, m: MetricModel, T: TensorField,
                      p: TangentPoint) -> np.ndarray:
    """Residual vector of the necessary-and-sufficient Berwald condition."""
    value, d_base, d_fiber = _omega_derivatives(omega, m, p)
    gamma = christoffel(m, p.x)
    g, _ = metric_at(m, p.x)
    xdot = np.asarray(p.xdot, float)
    xdot_low = g @ xdot
    A = float(xdot @ xdot_low)
    Tx = T(p.x)
    weight = d_fiber + 2.0 * xdot_low * value / A
    return (
        d_base
        - np.einsum("bac,c,b->a", gamma, xdot, d_fiber)
        - np.einsum("bac,c,b->a", Tx, xdot, weight)
    )


def tavakol_residual(sigma_conf: Expr | str, m: MetricModel, p: TangentPoint) -> np.ndarray:
    """Residual for the conformal family L = exp(2 sigma) A with T = 0.

    sigma is a function on the base, so its fiber gradient vanishes and the
    connection term drops out; what remains is the plain gradient of sigma.
    """
    expr = parse(sigma_conf) if isinstance(sigma_conf, str) else sigma_conf
    unknown = free_symbols(expr) - set(m.coords)
    if unknown:
        raise ValueError(f"conformal factor references unknown symbols {sorted(unknown)}")
    n = m.n
    out = np.zeros(n)
    for direction in range(n):
        bindings = seed(p, m.coords, base_dirs=(direction,), orders=(1, 0))
        jet = evaluate(expr, bindings)
        out[direction] = jet.partial(base_deg=1) if hasattr(jet, "partial") else 0.0
    return out


def extract_T(L: FinslerLagrangian, m: MetricModel, x: np.ndarray,
              fiber_samples: Sequence[np.ndarray]):
    """Mean of xi - Gamma over fiber samples, with a consistency score.

    The score is the largest deviation of any sample from the mean; for a
    Berwald geometry it is at round-off level, otherwise it doubles as the
    witness magnitude of direction dependence.
    """
    gamma = christoffel(m, x)
    diffs = [affine_coefficients(L, m, x, xdot) - gamma for xdot in fiber_samples]
    stack = np.stack(diffs)
    mean = stack.mean(axis=0)
    score = float(np.max(np.abs(stack - mean))) if len(diffs) > 1 else 0.0
    return mean, score
