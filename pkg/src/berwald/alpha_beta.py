"""Geometries built from a metric and a 1-form: L = Omega(B^2/A) * A.

Profiles carry the 0-homogeneous factor Omega as an expression in the single
variable ``s = B^2/A`` together with their own admissibility predicate (each
profile's smooth locus differs).  The residual evaluators specialize the
first-order Berwald condition to a condition on the Levi-Civita covariant
derivative of the 1-form.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np

from .expressions import (
    Add,
    EvaluationError,
    Expr,
    Mul,
    Num,
    Pow,
    Sym,
    evaluate,
    free_symbols,
    parse,
)
from .finsler import FinslerLagrangian
from .geometry import (
    MetricModel,
    MissingOneFormError,
    TensorField,
    metric_at,
    nabla_beta,
    oneform_components,
    oneform_value,
    quadratic_form,
)
from .jets import JetDomainError, TangentPoint, jet_space

__all__ = [
    "OmegaProfile",
    "StructuredTParams",
    "KropinaParams",
    "ProfileDegenerateError",
    "UndefinedQError",
    "profile_randers",
    "profile_exponential",
    "profile_generalized_kropina",
    "profile_from_expression",
    "profile_derivatives",
    "build_ab_lagrangian",
    "corollary2_residual",
    "corollary2_pointwise_residual",
    "structured_T",
    "corollary3_residual",
    "solve_q",
    "omega_ode_residual",
]

_EPS_STRUCTURAL = 1e-9


class ProfileDegenerateError(ArithmeticError):
    """Omega' vanishes where the residual formulas divide by it."""


class UndefinedQError(ArithmeticError):
    """Both basis terms of the covariant-derivative condition vanish."""


@dataclass
class OmegaProfile:
    """The factor Omega as a function of s = B^2/A, with its smooth domain."""

    name: str
    expr: Expr
    admissible: Callable[[float, float], bool]
    params: dict = field(default_factory=dict)

    def omega(self, s):
        return evaluate(self.expr, {"s": s})


def profile_derivatives(profile: OmegaProfile, s: float, order: int = 2):
    """Omega and its first ``order`` derivatives at s, via a univariate jet."""
    space = jet_space(1, order, 0)
    jet = profile.omega(space.variable(float(s), fiber_dir=0))
    return tuple(jet.partial((k,)) for k in range(order + 1))


def profile_randers() -> OmegaProfile:
    def admissible(A: float, B: float) -> bool:
        return A > 0.0 and B * B / A > 1e-6

    return OmegaProfile("randers", parse("(1 + sqrt(s))^2"), admissible)


# Conditioning window: outside s in [-0.5, 2.0] the velocity Hessian of the
# exponential family runs into near-degenerate bands and exp-scale blowup,
# which turns exact jets into noise amplifiers.
_EXP_S_WINDOW = (-0.5, 2.0)


def profile_exponential() -> OmegaProfile:
    def admissible(A: float, B: float) -> bool:
        if A == 0.0:
            return False
        s = B * B / A
        return _EXP_S_WINDOW[0] <= s <= _EXP_S_WINDOW[1]

    return OmegaProfile("exponential", parse("exp(-s)"), admissible)


@dataclass
class KropinaParams:
    n: float
    m: float
    c: float

    def __post_init__(self):
        if self.m == 0.0 and self.c <= 0.0:
            raise ValueError("profile admits no s-range: need c > 0 when m = 0")
        if self.m == 0.0 and self.n == 0.0:
            raise ValueError("n = m = 0 degenerates to a constant profile")

    def warnings(self) -> list[str]:
        notes = []
        if self.n == 1.0:
            notes.append("n = 1 kills the beta x beta term of the covariant-derivative "
                         "condition; q is then constrained only through g_ab")
        if self.n == 0.0:
            notes.append("n = 0 yields a quadratic Lagrangian (metric geometry)")
        return notes


def profile_generalized_kropina(p: KropinaParams) -> OmegaProfile:
    """Omega(s) = s^(-n) (c + m s)^(n + 1)."""
    s = Sym("s")
    expr = Mul(
        Pow(s, Num(-float(p.n))),
        Pow(Add(Num(float(p.c)), Mul(Num(float(p.m)), s)), Num(float(p.n) + 1.0)),
    )
    integer_exponents = float(p.n).is_integer()

    def admissible(A: float, B: float) -> bool:
        if A == 0.0:
            return False
        s_val = B * B / A
        # stay away from the s = 0 and c + m s = 0 poles by a relative margin,
        # where the negative powers wreck the conditioning of the pipeline
        if abs(s_val) <= 1e-2:
            return False
        if p.c + p.m * s_val <= 0.1 * max(abs(p.c), abs(p.m * s_val)):
            return False
        return integer_exponents or s_val > 0.0

    return OmegaProfile(
        "generalized_kropina", expr, admissible, {"n": p.n, "m": p.m, "c": p.c}
    )


def profile_from_expression(source: Expr | str, name: str = "custom") -> OmegaProfile:
    expr = parse(source) if isinstance(source, str) else source
    unknown = free_symbols(expr) - {"s"}
    if unknown:
        raise ValueError(f"profile may only reference 's', found {sorted(unknown)}")

    def admissible(A: float, B: float) -> bool:
        if A == 0.0:
            return False
        try:
            evaluate(expr, {"s": B * B / A})
        except (EvaluationError, JetDomainError, ZeroDivisionError, OverflowError):
            return False
        return True

    return OmegaProfile(name, expr, admissible)


def build_ab_lagrangian(model: MetricModel, profile: OmegaProfile) -> FinslerLagrangian:
    """L(x, v) = Omega(B^2/A) A with A = g(v, v) and B = beta(v)."""
    if model.beta is None:
        raise MissingOneFormError("alpha-beta construction needs a 1-form")

    def evaluate_l(bindings):
        A = quadratic_form(model, bindings)
        B = oneform_value(model, bindings)
        return profile.omega(B * B / A) * A

    return FinslerLagrangian(model, evaluate_l, "alpha_beta",
                             admissible=profile.admissible, profile=profile)


def _ab_scalars(model: MetricModel, profile: OmegaProfile, p: TangentPoint, order: int):
    xdot = np.asarray(p.xdot, float)
    g, _ = metric_at(model, p.x)
    beta = oneform_components(model, p.x)
    A = float(xdot @ g @ xdot)
    B = float(beta @ xdot)
    if A == 0.0:
        raise ZeroDivisionError("A vanishes; point is inadmissible")
    derivs = profile_derivatives(profile, B * B / A, order)
    return xdot, g, beta, A, B, derivs


def corollary2_residual(model: MetricModel, profile: OmegaProfile, T: TensorField,
                        p: TangentPoint) -> float:
    """Sup-norm residual of the contracted covariant-derivative condition

    v^c nabla_a beta_c = T^b_ac v^c beta_b + T^b_ac v^c v_b (Omega/(Omega' B) - B/A).
    """
    xdot, g, beta, A, B, (omega, omega1) = _ab_scalars(model, profile, p, order=1)
    if abs(omega1) <= 1e-14 * max(1.0, abs(omega)):
        raise ProfileDegenerateError(f"Omega' = {omega1!r} at s = {B * B / A!r}")
    nb = nabla_beta(model, p.x)
    Tx = T(p.x)
    xdot_low = g @ xdot
    h = omega / (omega1 * B) - B / A
    residual = (
        nb @ xdot
        - np.einsum("bac,c,b->a", Tx, xdot, beta)
        - np.einsum("bac,c,b->a", Tx, xdot, xdot_low) * h
    )
    return float(np.max(np.abs(residual)))


def corollary2_pointwise_residual(model: MetricModel, profile: OmegaProfile,
                                  T: TensorField, p: TangentPoint) -> np.ndarray:
    """Matrix residual of the once-more-differentiated condition.

    Equals the velocity derivative of the contracted residual, which the
    tests cross-check with jets.
    """
    xdot, g, beta, A, B, (omega, omega1, omega2) = _ab_scalars(model, profile, p, order=2)
    if abs(omega1) <= 1e-14 * max(1.0, abs(omega)):
        raise ProfileDegenerateError(f"Omega' = {omega1!r} at s = {B * B / A!r}")
    nb = nabla_beta(model, p.x)
    Tx = T(p.x)
    xdot_low = g @ xdot
    h = omega / (omega1 * B) - B / A
    t_contract = np.einsum("bac,c,b->a", Tx, xdot, xdot_low)
    ratio = omega * omega2 / omega1**2
    bracket = (
        np.outer(np.ones(model.n), xdot_low) * (2.0 * B / A**2) * ratio
        - np.outer(np.ones(model.n), beta)
        * (-1.0 / A + omega / (omega1 * B**2) + 2.0 * ratio / A)
    )
    return (
        nb
        - np.einsum("bad,b->ad", Tx, beta)
        - (np.einsum("bad,b->ad", Tx, xdot_low) + np.einsum("bac,c,db->ad", Tx, xdot, g)) * h
        - t_contract[:, None] * bracket
    )


@dataclass
class StructuredTParams:
    """Coefficients of the T ansatz built from beta and g alone."""

    lambda_T: Union[Expr, str, float]
    rho_T: Union[Expr, str, float]
    sigma_T: Union[Expr, str, float]


def _scalar_field(value: Union[Expr, str, float]) -> Callable[[MetricModel, np.ndarray], float]:
    if isinstance(value, (int, float)):
        constant = float(value)
        return lambda model, x: constant
    expr = parse(value) if isinstance(value, str) else value

    def at(model: MetricModel, x: np.ndarray) -> float:
        bindings = {name: float(x[i]) for i, name in enumerate(model.coords)}
        return float(evaluate(expr, bindings))

    return at


def structured_T(params: StructuredTParams, model: MetricModel) -> TensorField:
    """T^a_bc = lambda b^a b_b b_c + rho (b_c d^a_b + b_b d^a_c) + sigma b^a g_bc."""
    if model.beta is None:
        raise MissingOneFormError("structured T needs a 1-form")
    lam = _scalar_field(params.lambda_T)
    rho = _scalar_field(params.rho_T)
    sig = _scalar_field(params.sigma_T)
    n = model.n
    eye = np.eye(n)

    def T(x: np.ndarray) -> np.ndarray:
        g, ginv = metric_at(model, x)
        beta = oneform_components(model, x)
        beta_up = ginv @ beta
        lam_x, rho_x, sig_x = lam(model, x), rho(model, x), sig(model, x)
        return (
            lam_x * np.einsum("a,b,c->abc", beta_up, beta, beta)
            + rho_x * (np.einsum("c,ab->abc", beta, eye) + np.einsum("b,ac->abc", beta, eye))
            + sig_x * np.einsum("a,bc->abc", beta_up, g)
        )

    return T


def _design_tensor(model: MetricModel, p_k: KropinaParams, x: np.ndarray) -> np.ndarray:
    g, ginv = metric_at(model, x)
    beta = oneform_components(model, x)
    beta_sq = float(beta @ ginv @ beta)
    return (
        (p_k.c * (1.0 - p_k.n) + p_k.m * beta_sq) * np.outer(beta, beta)
        + p_k.c * p_k.n * beta_sq * g
    )


def corollary3_residual(model: MetricModel, p_k: KropinaParams,
                        q: Union[Expr, str, float], x: np.ndarray) -> np.ndarray:
    """Residual of nabla beta = q([c(1-n) + m g^-1(b,b)] b x b + c n g^-1(b,b) g)."""
    q_at = _scalar_field(q)
    return nabla_beta(model, x) - q_at(model, x) * _design_tensor(model, p_k, x)


def solve_q(model: MetricModel, p_k: KropinaParams, x: np.ndarray) -> tuple[float, float]:
    """Least-squares q(x) for the covariant-derivative condition, plus its residual."""
    design = _design_tensor(model, p_k, x)
    nb = nabla_beta(model, x)
    denom = float(np.sum(design * design))
    if denom <= 1e-30:
        raise UndefinedQError("design tensor vanishes; q is undetermined at this point")
    q = float(np.sum(nb * design)) / denom
    residual = float(np.linalg.norm(nb - q * design))
    return q, residual


def omega_ode_residual(p_k: KropinaParams, lambda_T: float, sigma_T: float,
                       s: float) -> float:
    """Residual of the profile ODE sigma Om Om' + s Om Om'' (sigma - lambda s) = sigma s Om'^2.

    Written division-free so points with Omega' = 0 evaluate cleanly.  The
    generalized Kropina profile solves it exactly when sigma/lambda = n c / m.
    """
    profile = profile_generalized_kropina(p_k)
    omega, omega1, omega2 = profile_derivatives(profile, s, order=2)
    return float(
        sigma_T * omega * omega1
        + s * omega * omega2 * (sigma_T - lambda_T * s)
        - sigma_T * s * omega1**2
    )
