"""Core Finsler pipeline: Lagrangian, nonlinear connection, spray, classification.

Everything here is driven by one kernel, :func:`_connection_jets`, which runs
one jet pass per base direction and assembles the connection coefficients

    N^a_b = 1/4 d/dv^b [ gL^{aq} ( v^m d^2 L/dx^m dv^q - dL/dx^q ) ]

entirely inside the jet ring, so its velocity derivatives (needed both for
the affine coefficients and the torsion check) stay exact.  The fiber order
of the pass is 3 for connection values plus one per extra velocity
derivative requested.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from .expressions import EvaluationError, Expr, free_symbols, parse
from .geometry import MetricModel, christoffel, oneform_value, quadratic_form
from .jets import (
    EPS_DET,
    Jet,
    JetDomainError,
    SingularJetMatrixError,
    TangentPoint,
    fiber_name,
    jet_linear_solve,
    jet_space,
    plain_bindings,
    seed,
)

__all__ = [
    "FinslerLagrangian",
    "DegenerateLMetricError",
    "AdmissibleSampler",
    "SampleSet",
    "BaseSample",
    "BasePointResult",
    "BerwaldReport",
    "from_metric",
    "from_expression",
    "l_metric",
    "nonlinear_connection",
    "geodesic_spray",
    "affine_coefficients",
    "identity_residuals",
    "is_admissible",
    "classify_berwald",
]

VERDICT_BERWALD = "berwald"
VERDICT_NOT_BERWALD = "not-berwald"
VERDICT_INCONCLUSIVE = "inconclusive"


class DegenerateLMetricError(ArithmeticError):
    """The velocity Hessian of L is not invertible at the requested point."""


def _always_admissible(A: float, B: float | None) -> bool:
    return True


@dataclass
class FinslerLagrangian:
    """A 2-homogeneous scalar on the tangent bundle, evaluable over jets.

    ``evaluate`` maps bindings (coordinates plus ``d``-prefixed velocities)
    to a scalar of the same ring.  ``admissible`` is the structural domain
    predicate of the construction, expressed through the metric scalars A
    and B; quantitative thresholds live in :class:`AdmissibleSampler`.
    """

    model: MetricModel
    evaluate: Callable[[Mapping], Any]
    kind: str
    admissible: Callable[[float, float | None], bool] = _always_admissible
    profile: Any = None


def from_metric(model: MetricModel) -> FinslerLagrangian:
    """The quadratic Lagrangian L = A of the metric itself."""
    return FinslerLagrangian(model, lambda b: quadratic_form(model, b), "quadratic")


def from_expression(model: MetricModel, source: Expr | str) -> FinslerLagrangian:
    expr = parse(source) if isinstance(source, str) else source
    allowed = set(model.coords) | {fiber_name(c) for c in model.coords}
    unknown = free_symbols(expr) - allowed
    if unknown:
        raise ValueError(f"Lagrangian references unknown symbols {sorted(unknown)}")

    def evaluate_expr(bindings):
        from .expressions import evaluate
        return evaluate(expr, bindings)

    return FinslerLagrangian(model, evaluate_expr, "expression")


def _unit(n: int, *dirs: int) -> tuple[int, ...]:
    alpha = [0] * n
    for d in dirs:
        alpha[d] += 1
    return tuple(alpha)


def l_metric(L: FinslerLagrangian, p: TangentPoint, eps_det: float = EPS_DET) -> np.ndarray:
    """The metric gL_ab = 1/2 d^2 L / dv^a dv^b from a fiber-order-2 pass."""
    n = L.model.n
    bindings = seed(p, L.model.coords, base_dirs=(), orders=(0, 2))
    value = L.evaluate(bindings)
    g = np.zeros((n, n))
    for a in range(n):
        for b in range(a + 1):
            g[a, b] = g[b, a] = 0.5 * value.partial(_unit(n, a, b))
    det = np.linalg.det(g)
    if not np.isfinite(det) or abs(det) <= eps_det:
        raise DegenerateLMetricError(f"|det gL| = {abs(det):.3e}")
    return g


@dataclass
class _ConnectionJets:
    """Jets of the connection pipeline at one tangent point (internal)."""

    n: int
    L_f: Jet                 # L as a fiber jet
    dL: list                 # dL[m]: x^m-derivative of L as a fiber jet
    xdot: list               # velocity variable jets
    gL: list                 # gL[a][b] jets (2 fiber orders consumed)
    N: list                  # N[a][b] jets (3 fiber orders consumed)
    G: list                  # spray jets


def _connection_jets(L: FinslerLagrangian, p: TangentPoint, reserve: int = 0,
                     eps_det: float = EPS_DET) -> _ConnectionJets:
    model = L.model
    n = model.n
    kv = 3 + reserve
    L_f = None
    dL = []
    for m in range(n):
        bindings = seed(p, model.coords, base_dirs=(m,), orders=(1, kv))
        jet = L.evaluate(bindings)
        if L_f is None:
            L_f = jet.restrict_fiber(0)
        dL.append(jet.restrict_fiber(1))
    space = jet_space(n, kv, 0)
    xdot = [space.variable(float(p.xdot[i]), fiber_dir=i) for i in range(n)]

    gL = [[None] * n for _ in range(n)]
    for a in range(n):
        da = L_f.fiber_derivative(a)
        for b in range(a + 1):
            gL[a][b] = gL[b][a] = 0.5 * da.fiber_derivative(b)

    # V_q = v^m d(dL/dx^m)/dv^q - dL/dx^q
    V = []
    for q in range(n):
        acc = xdot[0] * dL[0].fiber_derivative(q)
        for m in range(1, n):
            acc = acc + xdot[m] * dL[m].fiber_derivative(q)
        V.append(acc - dL[q])

    try:
        W = jet_linear_solve(gL, V, eps_det=eps_det)
    except SingularJetMatrixError as exc:
        raise DegenerateLMetricError(str(exc)) from exc

    N = [[0.25 * W[a].fiber_derivative(b) for b in range(n)] for a in range(n)]
    G = []
    for a in range(n):
        acc = N[a][0] * xdot[0]
        for b in range(1, n):
            acc = acc + N[a][b] * xdot[b]
        G.append(0.5 * acc)
    return _ConnectionJets(n, L_f, dL, xdot, gL, N, G)


def nonlinear_connection(L: FinslerLagrangian, m: MetricModel, p: TangentPoint) -> np.ndarray:
    """Cartan nonlinear connection coefficients N^a_b at ``p``."""
    data = _connection_jets(L, p)
    return np.array([[data.N[a][b].value for b in range(data.n)] for a in range(data.n)])


def geodesic_spray(L: FinslerLagrangian, m: MetricModel, p: TangentPoint) -> np.ndarray:
    """Spray components G^a with 2 G^a = N^a_b v^b."""
    data = _connection_jets(L, p)
    return np.array([g.value for g in data.G])


def _xi_from(data: _ConnectionJets) -> np.ndarray:
    n = data.n
    xi = np.zeros((n, n, n))
    for a in range(n):
        for b in range(n):
            for c in range(b + 1):
                value = data.G[a].partial(_unit(n, b, c))
                xi[a, b, c] = xi[a, c, b] = value
    return xi


def affine_coefficients(L: FinslerLagrangian, m: MetricModel,
                        x: np.ndarray, xdot: np.ndarray) -> np.ndarray:
    """xi^a_bc = d^2 G^a / dv^b dv^c, exact through the whole pipeline."""
    data = _connection_jets(L, TangentPoint(np.asarray(x, float), np.asarray(xdot, float)),
                            reserve=2)
    return _xi_from(data)


def _identity_from(data: _ConnectionJets) -> dict[str, np.ndarray]:
    n = data.n
    Nv = np.array([[data.N[a][b].value for b in range(n)] for a in range(n)])
    gLv = np.array([[data.gL[a][b].value for b in range(n)] for a in range(n)])
    xdv = np.array([v.value for v in data.xdot])
    dfL = np.array([data.L_f.partial(_unit(n, b)) for b in range(n)])
    dxL = np.array([data.dL[a].value for a in range(n)])

    delta_l = dxL - Nv.T @ dfL

    dx_gL = np.zeros((n, n, n))   # d gL_ab / d x^c
    df_gL = np.zeros((n, n, n))   # d gL_ab / d v^d
    for a in range(n):
        for b in range(a + 1):
            for c in range(n):
                dx_gL[c, a, b] = dx_gL[c, b, a] = 0.5 * data.dL[c].partial(_unit(n, a, b))
                df_gL[c, a, b] = df_gL[c, b, a] = 0.5 * data.L_f.partial(_unit(n, a, b, c))
    compat = (
        np.einsum("c,cab->ab", xdv, dx_gL)
        - np.einsum("dc,c,dab->ab", Nv, xdv, df_gL)
        - np.einsum("ca,cb->ab", Nv, gLv)
        - np.einsum("cb,ca->ab", Nv, gLv)
    )

    torsion = np.zeros((n, n, n))
    for a in range(n):
        dN = [[data.N[a][c].partial(_unit(n, b)) for c in range(n)] for b in range(n)]
        for b in range(n):
            for c in range(n):
                torsion[a, b, c] = dN[b][c] - dN[c][b]
    return {"deltaL": delta_l, "compat": compat, "torsion": torsion}


def identity_residuals(L: FinslerLagrangian, m: MetricModel, p: TangentPoint) -> dict[str, np.ndarray]:
    """Structural identities of the connection; all vanish for a correct pipeline.

    deltaL_a = dL/dx^a - N^b_a dL/dv^b, the metric-compatibility combination,
    and the velocity-antisymmetrized connection derivative (torsion).
    """
    data = _connection_jets(L, p, reserve=1)
    return _identity_from(data)


# -- sampling and classification -------------------------------------------


def is_admissible(L: FinslerLagrangian, p: TangentPoint,
                  eps_a: float = 1e-6, eps_b: float = 1e-6,
                  eps_det: float = EPS_DET, cond_max: float = 1e6,
                  eps_a_rel: float = 0.0) -> bool:
    """Threshold and domain filter standing in for the smooth conic subbundle.

    ``eps_a_rel`` additionally bounds |A| below relative to the Euclidean
    velocity norm, keeping samples away from the null cone where inverse
    powers of A amplify round-off; the velocity Hessian must also be
    well-conditioned, since any spread observed later reflects only round-off
    scaled by that condition number.
    """
    model = L.model
    bindings = plain_bindings(p, model.coords)
    try:
        A = float(quadratic_form(model, bindings))
        if abs(A) <= eps_a:
            return False
        if eps_a_rel > 0.0 and abs(A) < eps_a_rel * float(np.dot(p.xdot, p.xdot)):
            return False
        B = None
        if model.beta is not None:
            B = float(oneform_value(model, bindings))
            if abs(B) <= eps_b:
                return False
        if not L.admissible(A, B):
            return False
        gl = l_metric(L, p, eps_det=eps_det)
        if np.linalg.cond(gl) > cond_max:
            return False
    except (JetDomainError, EvaluationError, DegenerateLMetricError, OverflowError, ZeroDivisionError):
        return False
    return True


@dataclass
class BaseSample:
    x: np.ndarray
    fibers: list


@dataclass
class SampleSet:
    base_samples: list
    proposed: int
    accepted: int
    starved_base_points: int

    @property
    def rejected_fraction(self) -> float:
        return 1.0 - self.accepted / self.proposed if self.proposed else 1.0


@dataclass
class AdmissibleSampler:
    """Seeded rejection sampler over a coordinate box and fiber shells.

    Fiber directions are drawn isotropically (signs included) and scaled to
    alternating shell radii; every emitted point passed the admissibility
    filter of :func:`is_admissible` plus the Lagrangian's own predicate.
    """

    box: tuple
    base_points: int = 16
    fiber_samples: int = 8
    shells: tuple = (1.0, 2.0)
    seed: int = 0
    eps_a: float = 1e-6
    eps_b: float = 1e-6
    eps_det: float = EPS_DET
    cond_max: float = 1e6
    eps_a_rel: float = 0.0
    max_rejection_factor: int = 64

    def sample(self, L: FinslerLagrangian) -> SampleSet:
        n = L.model.n
        if len(self.box) != n:
            raise ValueError(f"box must give a range per coordinate ({n} expected)")
        rng = np.random.default_rng(self.seed)
        lows = np.array([lo for lo, _ in self.box])
        highs = np.array([hi for _, hi in self.box])
        base_samples = []
        proposed = accepted = starved = 0
        for _ in range(self.base_points):
            x = lows + rng.random(n) * (highs - lows)
            fibers = []
            budget = self.fiber_samples * self.max_rejection_factor
            while len(fibers) < self.fiber_samples and budget > 0:
                direction = rng.normal(size=n)
                norm = np.linalg.norm(direction)
                if norm == 0.0:
                    continue
                radius = self.shells[len(fibers) % len(self.shells)]
                xdot = direction / norm * radius
                proposed += 1
                budget -= 1
                if is_admissible(L, TangentPoint(x, xdot), self.eps_a, self.eps_b,
                                 self.eps_det, self.cond_max, self.eps_a_rel):
                    fibers.append(xdot)
                    accepted += 1
            if len(fibers) >= 2:
                base_samples.append(BaseSample(x, fibers))
            else:
                starved += 1
        return SampleSet(base_samples, proposed, accepted, starved)


@dataclass
class BasePointResult:
    x: np.ndarray
    spread: float
    xi: np.ndarray          # fiber-averaged affine coefficients
    T: np.ndarray           # xi minus the Levi-Civita coefficients
    fiber_count: int


@dataclass
class BerwaldReport:
    verdict: str
    spread_max: float
    tol: float
    base_results: list
    residual_max: dict
    sampling: dict

    @property
    def is_berwald(self) -> bool:
        return self.verdict == VERDICT_BERWALD


def _classify_base_point(L, sample: BaseSample, with_identities: bool):
    gamma = christoffel(L.model, sample.x)
    xis = []
    residuals = {"deltaL": 0.0, "compat": 0.0, "torsion": 0.0}
    for xdot in sample.fibers:
        data = _connection_jets(L, TangentPoint(sample.x, xdot), reserve=2)
        xis.append(_xi_from(data))
        if with_identities:
            ident = _identity_from(data)
            for key in residuals:
                residuals[key] = max(residuals[key], float(np.max(np.abs(ident[key]))))
    stack = np.stack(xis)
    spread = float(np.max(stack.max(axis=0) - stack.min(axis=0)))
    xi_mean = stack.mean(axis=0)
    return BasePointResult(sample.x, spread, xi_mean, xi_mean - gamma, len(xis)), residuals


def classify_berwald(L: FinslerLagrangian, m: MetricModel, sampler: AdmissibleSampler,
                     tol: float = 1e-7, jobs: int = 1,
                     with_identities: bool = True) -> BerwaldReport:
    """Decide Berwald-ness by the spread of the affine coefficients.

    At every admissible base point the coefficients xi^a_bc are evaluated for
    several fiber directions; the geometry is Berwald exactly when they do
    not depend on the direction, so the maximal componentwise spread against
    ``tol`` is the verdict.  The verdict is inconclusive when more than half
    of the proposed samples were inadmissible or too few base points filled.
    """
    samples = sampler.sample(L)
    results: list[BasePointResult] = []
    residual_max = {"deltaL": 0.0, "compat": 0.0, "torsion": 0.0}
    if samples.base_samples:
        if jobs > 1:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                outcomes = list(pool.map(
                    lambda s: _classify_base_point(L, s, with_identities), samples.base_samples))
        else:
            outcomes = [_classify_base_point(L, s, with_identities) for s in samples.base_samples]
        for result, residuals in outcomes:
            results.append(result)
            for key in residual_max:
                residual_max[key] = max(residual_max[key], residuals[key])
    spread_max = max((r.spread for r in results), default=float("inf"))
    if samples.rejected_fraction > 0.5 or len(results) < min(8, sampler.base_points):
        verdict = VERDICT_INCONCLUSIVE
    elif spread_max < tol:
        verdict = VERDICT_BERWALD
    else:
        verdict = VERDICT_NOT_BERWALD
    sampling = {
        "seed": sampler.seed,
        "base_points_requested": sampler.base_points,
        "base_points_kept": len(results),
        "fiber_samples": sampler.fiber_samples,
        "shells": list(sampler.shells),
        "proposed": samples.proposed,
        "accepted": samples.accepted,
        "rejected_fraction": samples.rejected_fraction,
        "eps_a": sampler.eps_a,
        "eps_b": sampler.eps_b,
        "eps_det": sampler.eps_det,
        "cond_max": sampler.cond_max,
        "eps_a_rel": sampler.eps_a_rel,
    }
    return BerwaldReport(verdict, spread_max, tol, results, residual_max, sampling)
