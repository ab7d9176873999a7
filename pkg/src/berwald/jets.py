"""Truncated multivariate Taylor arithmetic (jets) over tangent-bundle points.

A jet stores the Taylor coefficients of a scalar field at a point, up to a
configurable total degree in the fiber directions (velocities) and at most
first degree in a single base direction per evaluation pass.  Arithmetic on
jets propagates those coefficients exactly, so every derivative extracted
from a jet is exact up to round-off; there is no step-size error anywhere.

Coefficients are stored densely against an enumerated multi-index basis in
Taylor normalization: ``c[alpha] = d^alpha f / alpha!``.  Products are a
single sparse convolution driven by a precomputed index table; that table is
what makes the pure-numpy implementation fast enough for sampling pipelines.
"""

from __future__ import annotations

import itertools
import math
from functools import lru_cache
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

__all__ = [
    "MAX_BASE_ORDER",
    "MAX_FIBER_ORDER",
    "EPS_DET",
    "JetDomainError",
    "SingularJetMatrixError",
    "TangentPoint",
    "JetSpace",
    "Jet",
    "jet_space",
    "seed",
    "jet_linear_solve",
]

MAX_BASE_ORDER = 1
# 3 fiber orders feed the nonlinear connection; one more gives its fiber
# derivative, two more the fiber Hessian of the spray.
MAX_FIBER_ORDER = 5
EPS_DET = 1e-10

_SPARSE_MAX = 6  # operands with at most this many nonzeros use the monomial path


class JetDomainError(ArithmeticError):
    """A scalar primitive was applied outside its smooth domain."""


class SingularJetMatrixError(ArithmeticError):
    """The value part of a jet matrix is numerically singular."""


class TangentPoint(NamedTuple):
    x: np.ndarray
    xdot: np.ndarray


def _multi_indices(n: int, order: int) -> list[tuple[int, ...]]:
    out = []
    for total in range(order + 1):
        for alpha in itertools.combinations_with_replacement(range(n), total):
            idx = [0] * n
            for d in alpha:
                idx[d] += 1
            out.append(tuple(idx))
    return out


class JetSpace:
    """Shared index tables for all jets of a given shape.

    Spaces are cached and compared by identity; jets from different spaces
    cannot be mixed.
    """

    def __init__(self, n_fiber: int, fiber_order: int, base_order: int):
        if not (0 <= base_order <= MAX_BASE_ORDER):
            raise ValueError(f"base order {base_order} exceeds cap {MAX_BASE_ORDER}")
        if not (0 <= fiber_order <= MAX_FIBER_ORDER):
            raise ValueError(f"fiber order {fiber_order} exceeds cap {MAX_FIBER_ORDER}")
        self.n_fiber = n_fiber
        self.fiber_order = fiber_order
        self.base_order = base_order
        self.fiber_indices = _multi_indices(n_fiber, fiber_order)
        self._fiber_slot = {alpha: i for i, alpha in enumerate(self.fiber_indices)}
        self._nf = len(self.fiber_indices)
        self.size = self._nf * (base_order + 1)
        self._build_product_table()
        self._build_derivative_tables()
        self._monomial_maps: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def _build_product_table(self):
        pairs_i, pairs_j, pairs_k = [], [], []
        degrees = [sum(a) for a in self.fiber_indices]
        for i, alpha in enumerate(self.fiber_indices):
            for j, beta in enumerate(self.fiber_indices):
                if degrees[i] + degrees[j] > self.fiber_order:
                    continue
                gamma = tuple(a + b for a, b in zip(alpha, beta))
                pairs_i.append(i)
                pairs_j.append(j)
                pairs_k.append(self._fiber_slot[gamma])
        rows_i, rows_j, rows_k = [], [], []
        nf = self._nf
        for bi in range(self.base_order + 1):
            for bj in range(self.base_order + 1 - bi):
                for i, j, k in zip(pairs_i, pairs_j, pairs_k):
                    rows_i.append(bi * nf + i)
                    rows_j.append(bj * nf + j)
                    rows_k.append((bi + bj) * nf + k)
        self._prod_i = np.asarray(rows_i, dtype=np.intp)
        self._prod_j = np.asarray(rows_j, dtype=np.intp)
        self._prod_k = np.asarray(rows_k, dtype=np.intp)

    def _build_derivative_tables(self):
        nf = self._nf
        self._fiber_deriv = []
        for d in range(self.n_fiber):
            src, dst, factor = [], [], []
            for i, alpha in enumerate(self.fiber_indices):
                bumped = tuple(a + (1 if q == d else 0) for q, a in enumerate(alpha))
                j = self._fiber_slot.get(bumped)
                if j is None:
                    continue
                for b in range(self.base_order + 1):
                    src.append(b * nf + j)
                    dst.append(b * nf + i)
                    factor.append(float(alpha[d] + 1))
            self._fiber_deriv.append(
                (np.asarray(src, dtype=np.intp), np.asarray(dst, dtype=np.intp), np.asarray(factor))
            )
        src, dst = [], []
        for b in range(self.base_order):
            lo = b * nf
            src.extend(range(lo + nf, lo + 2 * nf))
            dst.extend(range(lo, lo + nf))
        self._base_deriv = (np.asarray(src, dtype=np.intp), np.asarray(dst, dtype=np.intp))

    def _monomial_map(self, slot: int) -> tuple[np.ndarray, np.ndarray]:
        cached = self._monomial_maps.get(slot)
        if cached is not None:
            return cached
        nf = self._nf
        b_mono, f_mono = divmod(slot, nf)
        mono = self.fiber_indices[f_mono]
        deg_mono = sum(mono)
        src, dst = [], []
        for j, beta in enumerate(self.fiber_indices):
            if sum(beta) + deg_mono > self.fiber_order:
                continue
            k = self._fiber_slot[tuple(a + b for a, b in zip(mono, beta))]
            for bj in range(self.base_order + 1 - b_mono):
                src.append(bj * nf + j)
                dst.append((bj + b_mono) * nf + k)
        table = (np.asarray(src, dtype=np.intp), np.asarray(dst, dtype=np.intp))
        self._monomial_maps[slot] = table
        return table

    def fiber_slot(self, alpha: tuple[int, ...], base_deg: int = 0) -> int:
        return base_deg * self._nf + self._fiber_slot[alpha]

    def constant(self, value: float) -> "Jet":
        c = np.zeros(self.size)
        c[0] = value
        return Jet(self, c, self.fiber_order, self.base_order)

    def variable(self, value: float, fiber_dir: int | None = None, base_seed: float = 0.0) -> "Jet":
        """A coordinate jet: value plus a unit seed in its own direction."""
        c = np.zeros(self.size)
        c[0] = value
        if fiber_dir is not None:
            if not 0 <= fiber_dir < self.n_fiber:
                raise ValueError(f"fiber direction {fiber_dir} out of range")
            unit = tuple(1 if q == fiber_dir else 0 for q in range(self.n_fiber))
            c[self._fiber_slot[unit]] = 1.0
        if base_seed != 0.0:
            if self.base_order < 1:
                raise ValueError("space has no base direction")
            c[self._nf] = base_seed
        return Jet(self, c, self.fiber_order, self.base_order)

    def __repr__(self):
        return f"JetSpace(n_fiber={self.n_fiber}, fiber_order={self.fiber_order}, base_order={self.base_order})"


@lru_cache(maxsize=None)
def jet_space(n_fiber: int, fiber_order: int, base_order: int = 0) -> JetSpace:
    return JetSpace(n_fiber, fiber_order, base_order)


class Jet:
    """One scalar value with its truncated Taylor expansion.

    ``fiber_valid`` / ``base_valid`` track how many derivative orders are
    still trustworthy: extracting a derivative consumes an order, and any
    arithmetic propagates the minimum.  Reading past the valid order raises
    instead of silently returning truncation garbage.
    """

    __slots__ = ("space", "c", "fiber_valid", "base_valid")

    def __init__(self, space: JetSpace, c: np.ndarray, fiber_valid: int, base_valid: int):
        self.space = space
        self.c = c
        self.fiber_valid = fiber_valid
        self.base_valid = base_valid

    @property
    def value(self) -> float:
        return float(self.c[0])

    def coefficient(self, alpha: tuple[int, ...] = (), base_deg: int = 0) -> float:
        """Taylor coefficient for fiber multi-index ``alpha`` at base degree."""
        alpha = tuple(alpha) if alpha else (0,) * self.space.n_fiber
        if sum(alpha) > self.fiber_valid or base_deg > self.base_valid:
            raise ValueError(f"coefficient {alpha}/{base_deg} beyond valid truncation order")
        return float(self.c[self.space.fiber_slot(alpha, base_deg)])

    def partial(self, alpha: tuple[int, ...] = (), base_deg: int = 0) -> float:
        """Partial derivative: the coefficient times the multi-index factorial."""
        alpha = tuple(alpha) if alpha else (0,) * self.space.n_fiber
        scale = 1.0
        for a in alpha:
            scale *= math.factorial(a)
        return self.coefficient(alpha, base_deg) * scale

    def fiber_derivative(self, d: int) -> "Jet":
        if self.fiber_valid < 1:
            raise ValueError("no fiber order left to differentiate")
        src, dst, factor = self.space._fiber_deriv[d]
        c = np.zeros(self.space.size)
        c[dst] = self.c[src] * factor
        return Jet(self.space, c, self.fiber_valid - 1, self.base_valid)

    def base_derivative(self) -> "Jet":
        if self.base_valid < 1:
            raise ValueError("no base order left to differentiate")
        src, dst = self.space._base_deriv
        c = np.zeros(self.space.size)
        c[dst] = self.c[src]
        return Jet(self.space, c, self.fiber_valid, self.base_valid - 1)

    def restrict_fiber(self, base_deg: int = 0) -> "Jet":
        """Project onto one base degree, as a jet of the fiber-only space."""
        if base_deg > self.base_valid:
            raise ValueError("base block beyond valid truncation order")
        space = jet_space(self.space.n_fiber, self.space.fiber_order, 0)
        nf = self.space._nf
        c = self.c[base_deg * nf:(base_deg + 1) * nf].copy()
        return Jet(space, c, self.fiber_valid, 0)

    # -- ring operations ---------------------------------------------------

    def _check(self, other: "Jet"):
        if other.space is not self.space:
            raise ValueError("jets from different spaces cannot be combined")

    def __add__(self, other):
        if isinstance(other, Jet):
            self._check(other)
            return Jet(self.space, self.c + other.c,
                       min(self.fiber_valid, other.fiber_valid),
                       min(self.base_valid, other.base_valid))
        c = self.c.copy()
        c[0] += other
        return Jet(self.space, c, self.fiber_valid, self.base_valid)

    __radd__ = __add__

    def __sub__(self, other):
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __neg__(self):
        return Jet(self.space, -self.c, self.fiber_valid, self.base_valid)

    def __mul__(self, other):
        if not isinstance(other, Jet):
            return Jet(self.space, self.c * other, self.fiber_valid, self.base_valid)
        self._check(other)
        fv = min(self.fiber_valid, other.fiber_valid)
        bv = min(self.base_valid, other.base_valid)
        a, b = self.c, other.c
        nza = np.flatnonzero(a)
        if len(nza) <= _SPARSE_MAX:
            return Jet(self.space, self._sparse_product(nza, a, b), fv, bv)
        nzb = np.flatnonzero(b)
        if len(nzb) <= _SPARSE_MAX:
            return Jet(self.space, self._sparse_product(nzb, b, a), fv, bv)
        space = self.space
        w = a[space._prod_i] * b[space._prod_j]
        return Jet(space, np.bincount(space._prod_k, weights=w, minlength=space.size), fv, bv)

    def _sparse_product(self, nz, sparse_c, dense_c):
        out = np.zeros(self.space.size)
        for slot in nz:
            src, dst = self.space._monomial_map(int(slot))
            out[dst] += sparse_c[slot] * dense_c[src]
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Jet):
            return self * other._reciprocal()
        if other == 0.0:
            raise ZeroDivisionError("jet divided by zero scalar")
        return self * (1.0 / other)

    def __rtruediv__(self, other):
        return self._reciprocal() * other

    def __pow__(self, exponent):
        if isinstance(exponent, Jet):
            return (exponent * self.log()).exp()
        if float(exponent).is_integer():
            k = int(exponent)
            if k < 0:
                return self._reciprocal() ** (-k)
            result = self.space.constant(1.0)
            result.fiber_valid = self.fiber_valid
            result.base_valid = self.base_valid
            acc = self
            while k:
                if k & 1:
                    result = result * acc
                k >>= 1
                if k:
                    acc = acc * acc
            return result
        return self.pow_real(float(exponent))

    def __rpow__(self, base):
        if base <= 0.0:
            raise JetDomainError(f"jet exponent of non-positive base {base!r}")
        return (self * math.log(base)).exp()

    def __abs__(self):
        v = self.value
        if v == 0.0:
            raise JetDomainError("abs is not differentiable at 0")
        return self if v > 0.0 else -self

    # -- composition with analytic primitives -------------------------------

    def _budget(self) -> int:
        return self.fiber_valid + self.base_valid

    def _compose(self, series: Sequence[float]) -> "Jet":
        """Evaluate sum_k series[k] * (self - value)^k by Horner."""
        h = Jet(self.space, self.c.copy(), self.fiber_valid, self.base_valid)
        h.c[0] = 0.0
        result = self.space.constant(series[-1])
        result.fiber_valid = self.fiber_valid
        result.base_valid = self.base_valid
        for coeff in reversed(series[:-1]):
            result = result * h + coeff
        return result

    def _reciprocal(self) -> "Jet":
        v = self.value
        if v == 0.0:
            raise JetDomainError("division by a jet with zero value part")
        series = [1.0 / v]
        for _ in range(self._budget()):
            series.append(-series[-1] / v)
        return self._compose(series)

    def sqrt(self) -> "Jet":
        v = self.value
        if v <= 0.0:
            raise JetDomainError(f"sqrt of non-positive jet value {v!r}")
        series = [math.sqrt(v)]
        for k in range(1, self._budget() + 1):
            series.append(series[-1] * (0.5 - (k - 1)) / (k * v))
        return self._compose(series)

    def exp(self) -> "Jet":
        try:
            e = math.exp(self.value)
        except OverflowError as exc:
            raise JetDomainError(f"exp overflow at {self.value!r}") from exc
        series = [e]
        for k in range(1, self._budget() + 1):
            series.append(series[-1] / k)
        return self._compose(series)

    def log(self) -> "Jet":
        v = self.value
        if v <= 0.0:
            raise JetDomainError(f"log of non-positive jet value {v!r}")
        series = [math.log(v)]
        for k in range(1, self._budget() + 1):
            series.append((-1.0) ** (k - 1) / (k * v**k))
        return self._compose(series)

    def sin(self) -> "Jet":
        v = self.value
        cycle = [math.sin(v), math.cos(v), -math.sin(v), -math.cos(v)]
        series = [cycle[k % 4] / math.factorial(k) for k in range(self._budget() + 1)]
        return self._compose(series)

    def cos(self) -> "Jet":
        v = self.value
        cycle = [math.cos(v), -math.sin(v), -math.cos(v), math.sin(v)]
        series = [cycle[k % 4] / math.factorial(k) for k in range(self._budget() + 1)]
        return self._compose(series)

    def pow_real(self, p: float) -> "Jet":
        v = self.value
        if v <= 0.0:
            raise JetDomainError(f"real power of non-positive jet value {v!r}")
        series = [v**p]
        for k in range(1, self._budget() + 1):
            series.append(series[-1] * (p - (k - 1)) / (k * v))
        return self._compose(series)

    def __repr__(self):
        return f"Jet(value={self.value!r}, space={self.space!r})"


FIBER_PREFIX = "d"


def fiber_name(coord: str) -> str:
    """Binding name of the velocity component attached to a coordinate."""
    return FIBER_PREFIX + coord


def seed(
    point: TangentPoint,
    coords: Sequence[str],
    base_dirs: Iterable[int] = (),
    fiber_dirs: Iterable[int] | None = None,
    orders: tuple[int, int] = (1, 3),
) -> dict:
    """Bindings where each seeded coordinate carries a unit first-order seed.

    Evaluating any expression of the coordinates (``u``, ...) and velocities
    (``du``, ...) over the returned bindings yields its Taylor coefficients at
    ``point``.  At most one base direction can be seeded per pass; full
    tensors are assembled by looping over passes.
    """
    kx, kv = orders
    n = len(coords)
    base_dirs = tuple(base_dirs)
    fiber_dirs = tuple(range(n)) if fiber_dirs is None else tuple(fiber_dirs)
    if len(base_dirs) > 1:
        raise ValueError("at most one base direction may be seeded per pass")
    for d in base_dirs + fiber_dirs:
        if not 0 <= d < n:
            raise ValueError(f"direction index {d} out of range for dimension {n}")
    space = jet_space(n, kv, kx if base_dirs else 0)
    bindings: dict = {}
    for i, name in enumerate(coords):
        bindings[name] = space.variable(
            float(point.x[i]), base_seed=1.0 if i in base_dirs else 0.0
        )
        bindings[fiber_name(name)] = space.variable(
            float(point.xdot[i]), fiber_dir=i if i in fiber_dirs else None
        )
    return bindings


def plain_bindings(point: TangentPoint, coords: Sequence[str]) -> dict:
    bindings: dict = {}
    for i, name in enumerate(coords):
        bindings[name] = float(point.x[i])
        bindings[fiber_name(name)] = float(point.xdot[i])
    return bindings


def _as_jet(value, space: JetSpace) -> Jet:
    if isinstance(value, Jet):
        return value
    return space.constant(float(value))


def jet_linear_solve(matrix, rhs, eps_det: float = EPS_DET) -> list[Jet]:
    """Solve ``matrix @ z = rhs`` for jet-valued entries, exactly in the ring.

    The value part is solved with plain linear algebra; the higher Taylor
    blocks then follow by forward substitution, one residual degree at a
    time.  The residual's minimal degree rises with every sweep, so after
    ``fiber_order + base_order`` sweeps the truncated solution is exact.
    """
    space = None
    for row in list(matrix) + [rhs]:
        for entry in row if not isinstance(row, Jet) else [row]:
            if isinstance(entry, Jet):
                space = entry.space
                break
        if space is not None:
            break
    if space is None:
        raise ValueError("jet_linear_solve needs at least one jet entry")
    n = len(rhs)
    M = [[_as_jet(matrix[i][j], space) for j in range(n)] for i in range(n)]
    b = [_as_jet(rhs[i], space) for i in range(n)]

    values = np.array([[M[i][j].value for j in range(n)] for i in range(n)])
    det = np.linalg.det(values)
    if not np.isfinite(det) or abs(det) <= eps_det:
        raise SingularJetMatrixError(f"value part is singular (|det| = {abs(det):.3e})")
    inv = np.linalg.inv(values)

    def apply_inv(vec: list[Jet]) -> list[Jet]:
        out = []
        for i in range(n):
            acc = vec[0] * inv[i, 0]
            for j in range(1, n):
                acc = acc + vec[j] * inv[i, j]
            out.append(acc)
        return out

    def residual(z: list[Jet]) -> list[Jet]:
        out = []
        for i in range(n):
            acc = b[i] - M[i][0] * z[0]
            for j in range(1, n):
                acc = acc - M[i][j] * z[j]
            out.append(acc)
        return out

    z = apply_inv(b)
    for _ in range(space.fiber_order + space.base_order):
        r = residual(z)
        if all(not r[i].c.any() for i in range(n)):
            break
        correction = apply_inv(r)
        z = [z[i] + correction[i] for i in range(n)]
    return z
