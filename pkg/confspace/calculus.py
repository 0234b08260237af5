"""
Differential calculus on configuration space, lifted from the base torus.

Smooth test functions are compactly supported bumps and their linear
combinations. Cylinder functions compose them with a symbolic outer function
whose partial derivatives are exact, so gradients, divergences and Laplacians
on configurations are closed-form sums over the points.
"""

import functools
import logging
import math
import operator
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from confspace.configuration import Configuration, pair
from confspace.domain import TorusDomain, displacement, wrap
from confspace.intensity import IntensityMeasure
from confspace.potential import PotentialBase, neighbour_pairs, pair_forces

LOG = logging.getLogger("confspace")

# exp(-1/u) underflows below this u; the bump and all its derivatives are 0 there.
_BUMP_EDGE = 1.0 / 700.0

FLOW_STEP = 1e-3


class BumpFunction(BaseModel):
    """
    amplitude * exp(-1 / (1 - s^2)) with s = distance(x, center) / radius,
    zero for s >= 1.
    """

    model_config = ConfigDict(frozen=True)

    center: Tuple[float, ...]
    radius: float
    amplitude: float = 1.0
    dom: TorusDomain

    @model_validator(mode="after")
    def _check_support(self) -> "BumpFunction":
        if len(self.center) != self.dom.d:
            raise ValueError(f"bump center must have {self.dom.d} coordinates")
        if not 0 < self.radius < 0.5 * self.dom.L:
            raise ValueError(f"bump radius must lie in (0, L/2), got {self.radius}")
        if not math.isfinite(self.amplitude):
            raise ValueError("bump amplitude must be finite")
        return self

    def _parts(self, X: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        X = np.asarray(X, dtype=float).reshape(-1, self.dom.d)
        v = displacement(X, np.asarray(self.center), self.dom)
        r2 = np.sum(v**2, axis=-1)
        u = 1.0 - r2 / self.radius**2
        inside = u > _BUMP_EDGE
        safe_u = np.where(inside, u, 1.0)
        value = np.where(inside, self.amplitude * np.exp(-1.0 / safe_u), 0.0)
        return v, r2, safe_u, value

    def __call__(self, X: np.ndarray) -> np.ndarray:
        return self._parts(X)[3]

    def gradient(self, X: np.ndarray) -> np.ndarray:
        v, _, u, value = self._parts(X)
        R2 = self.radius**2
        return (value * -2.0 / (R2 * u**2))[:, None] * v

    def laplacian(self, X: np.ndarray) -> np.ndarray:
        _, r2, u, value = self._parts(X)
        R2 = self.radius**2
        d = self.dom.d
        return value * (
            4.0 * r2 / (R2**2 * u**4) - 2.0 * d / (R2 * u**2) - 8.0 * r2 / (R2**2 * u**3)
        )


class BumpCombination(BaseModel):
    """
    constant + sum_k c_k * bump_k. Compactly supported when constant == 0.
    """

    model_config = ConfigDict(frozen=True)

    terms: Tuple[Tuple[float, BumpFunction], ...] = ()
    constant: float = 0.0

    @classmethod
    def of(cls, bump: BumpFunction, coefficient: float = 1.0) -> "BumpCombination":
        return cls(terms=((coefficient, bump),))

    def __add__(self, other: "SmoothField") -> "BumpCombination":
        other = as_combination(other)
        return BumpCombination(terms=self.terms + other.terms, constant=self.constant + other.constant)

    def scaled(self, c: float) -> "BumpCombination":
        return BumpCombination(
            terms=tuple((c * coef, bump) for coef, bump in self.terms), constant=c * self.constant
        )

    def __call__(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        out = np.full(len(X), self.constant)
        for coef, bump in self.terms:
            out += coef * bump(X)
        return out

    def gradient(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        out = np.zeros_like(X)
        for coef, bump in self.terms:
            out += coef * bump.gradient(X)
        return out

    def laplacian(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        out = np.zeros(len(X))
        for coef, bump in self.terms:
            out += coef * bump.laplacian(X)
        return out


SmoothField = Union[BumpFunction, BumpCombination]


def as_combination(f: SmoothField) -> BumpCombination:
    return f if isinstance(f, BumpCombination) else BumpCombination.of(f)


class BumpVectorField(BaseModel):
    """
    Compactly supported vector field with one bump combination per axis.
    """

    model_config = ConfigDict(frozen=True)

    components: Tuple[BumpCombination, ...]

    @classmethod
    def along(cls, f: SmoothField, direction: Sequence[float]) -> "BumpVectorField":
        """
        v(x) = f(x) * direction.
        """
        f = as_combination(f)
        return cls(components=tuple(f.scaled(float(c)) for c in direction))

    @classmethod
    def zero(cls, d: int) -> "BumpVectorField":
        return cls(components=(BumpCombination(),) * d)

    def __add__(self, other: "BumpVectorField") -> "BumpVectorField":
        if len(other.components) != len(self.components):
            raise ValueError("vector fields of different dimension")
        return BumpVectorField(
            components=tuple(a + b for a, b in zip(self.components, other.components))
        )

    def __call__(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if len(X) == 0:
            return np.zeros((0, len(self.components)))
        return np.stack([c(X) for c in self.components], axis=-1)

    def divergence(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        out = np.zeros(len(X))
        for k, c in enumerate(self.components):
            out += c.gradient(X)[:, k]
        return out


class GradientField(BaseModel):
    """
    The field grad f of a smooth function, with divergence Laplacian f.
    """

    model_config = ConfigDict(frozen=True)

    f: BumpCombination

    def __call__(self, X: np.ndarray) -> np.ndarray:
        return self.f.gradient(X)

    def divergence(self, X: np.ndarray) -> np.ndarray:
        return self.f.laplacian(X)


VectorField = Union[BumpVectorField, GradientField]


class Outer:
    """
    Symbolic smooth function g of `n_args` real arguments.

    Subclasses provide `value` and `_partial`; partial derivatives are cached,
    so Hessians of an expression are built once.
    """

    n_args: int

    def __init__(self) -> None:
        self._partials: Dict[int, "Outer"] = {}

    def value(self, a: np.ndarray) -> np.ndarray:
        """
        g at a, where the last axis of `a` holds the N arguments.
        """
        raise NotImplementedError

    def _partial(self, i: int) -> "Outer":
        raise NotImplementedError

    def embed(self, offset: int, n_args: int) -> "Outer":
        """
        Same function with its arguments moved to positions offset.. of n_args.
        """
        raise NotImplementedError

    def partial(self, i: int) -> "Outer":
        if not 0 <= i < self.n_args:
            raise ValueError(f"argument index {i} out of range for {self.n_args} arguments")
        if i not in self._partials:
            self._partials[i] = self._partial(i)
        return self._partials[i]

    def gradient(self, a: np.ndarray) -> np.ndarray:
        return np.array([float(self.partial(i).value(a)) for i in range(self.n_args)])

    def hessian(self, a: np.ndarray) -> np.ndarray:
        n = self.n_args
        out = np.empty((n, n))
        for i in range(n):
            for j in range(i, n):
                out[i, j] = out[j, i] = float(self.partial(i).partial(j).value(a))
        return out

    def _lift(self, other: Union["Outer", float]) -> "Outer":
        if isinstance(other, Outer):
            if other.n_args != self.n_args:
                raise ValueError("outer functions of different arity")
            return other
        return Polynomial.constant(float(other), self.n_args)

    def __add__(self, other: Union["Outer", float]) -> "Outer":
        return Sum((self, self._lift(other)))

    __radd__ = __add__

    def __sub__(self, other: Union["Outer", float]) -> "Outer":
        return Sum((self, Product((Polynomial.constant(-1.0, self.n_args), self._lift(other)))))

    def __mul__(self, other: Union["Outer", float]) -> "Outer":
        return Product((self, self._lift(other)))

    __rmul__ = __mul__

    def __neg__(self) -> "Outer":
        return self * -1.0

    def tanh(self) -> "Outer":
        return Tanh(self)


class Polynomial(Outer):
    def __init__(self, terms: Dict[Tuple[int, ...], float], n_args: int):
        super().__init__()
        if n_args < 1:
            raise ValueError("outer functions need at least one argument")
        for exponents in terms:
            if len(exponents) != n_args or any(e < 0 for e in exponents):
                raise ValueError(f"bad exponent tuple {exponents} for {n_args} arguments")
        self.terms = {e: c for e, c in terms.items() if c != 0.0}
        self.n_args = n_args

    @classmethod
    def constant(cls, c: float, n_args: int = 1) -> "Polynomial":
        return cls({(0,) * n_args: c}, n_args)

    @classmethod
    def variable(cls, i: int, n_args: int = 1) -> "Polynomial":
        exponents = [0] * n_args
        exponents[i] = 1
        return cls({tuple(exponents): 1.0}, n_args)

    def value(self, a: np.ndarray) -> np.ndarray:
        a = np.asarray(a, dtype=float)
        out = np.zeros(a.shape[:-1])
        for e, c in self.terms.items():
            out = out + c * np.prod(a ** np.array(e), axis=-1)
        return out

    def _partial(self, i: int) -> "Outer":
        out: Dict[Tuple[int, ...], float] = {}
        for e, c in self.terms.items():
            if e[i] == 0:
                continue
            lowered = e[:i] + (e[i] - 1,) + e[i + 1 :]
            out[lowered] = out.get(lowered, 0.0) + c * e[i]
        return Polynomial(out, self.n_args)

    def embed(self, offset: int, n_args: int) -> "Outer":
        tail = n_args - offset - self.n_args
        return Polynomial(
            {(0,) * offset + e + (0,) * tail: c for e, c in self.terms.items()}, n_args
        )

    def __repr__(self) -> str:
        return f"Polynomial({self.terms}, n_args={self.n_args})"


class Sum(Outer):
    def __init__(self, terms: Sequence[Outer]):
        super().__init__()
        self.terms = tuple(terms)
        self.n_args = self.terms[0].n_args

    def value(self, a: np.ndarray) -> np.ndarray:
        return functools.reduce(operator.add, (t.value(a) for t in self.terms))

    def _partial(self, i: int) -> "Outer":
        return Sum([t.partial(i) for t in self.terms])

    def embed(self, offset: int, n_args: int) -> "Outer":
        return Sum([t.embed(offset, n_args) for t in self.terms])


class Product(Outer):
    def __init__(self, factors: Sequence[Outer]):
        super().__init__()
        self.factors = tuple(factors)
        self.n_args = self.factors[0].n_args

    def value(self, a: np.ndarray) -> np.ndarray:
        return functools.reduce(operator.mul, (f.value(a) for f in self.factors))

    def _partial(self, i: int) -> "Outer":
        terms = []
        for k, f in enumerate(self.factors):
            df = f.partial(i)
            if isinstance(df, Polynomial) and not df.terms:
                continue
            terms.append(Product(self.factors[:k] + (df,) + self.factors[k + 1 :]))
        return Sum(terms) if terms else Polynomial({}, self.n_args)

    def embed(self, offset: int, n_args: int) -> "Outer":
        return Product([f.embed(offset, n_args) for f in self.factors])


class Tanh(Outer):
    def __init__(self, inner: Outer):
        super().__init__()
        self.inner = inner
        self.n_args = inner.n_args

    def value(self, a: np.ndarray) -> np.ndarray:
        return np.tanh(self.inner.value(a))

    def _partial(self, i: int) -> "Outer":
        sech2 = Polynomial.constant(1.0, self.n_args) - Product((self, self))
        return Product((sech2, self.inner.partial(i)))

    def embed(self, offset: int, n_args: int) -> "Outer":
        return Tanh(self.inner.embed(offset, n_args))


class TangentVector:
    """
    One d-vector per point of a configuration, in the configuration's point order.
    """

    __slots__ = ("vectors",)

    def __init__(self, vectors: np.ndarray):
        self.vectors = np.asarray(vectors, dtype=float)

    @classmethod
    def zero(cls, gamma: Configuration) -> "TangentVector":
        return cls(np.zeros_like(gamma.points))

    def __len__(self) -> int:
        return len(self.vectors)

    def inner(self, other: Union["TangentVector", np.ndarray]) -> float:
        """
        <V, W> = sum over points of the Euclidean inner products.
        """
        w = other.vectors if isinstance(other, TangentVector) else np.asarray(other, dtype=float)
        if w.shape != self.vectors.shape:
            raise ValueError(f"tangent vectors of different shape {self.vectors.shape} vs {w.shape}")
        return float(np.sum(self.vectors * w))

    def __add__(self, other: "TangentVector") -> "TangentVector":
        return TangentVector(self.vectors + other.vectors)

    def scaled(self, c: float) -> "TangentVector":
        return TangentVector(c * self.vectors)


class CylinderFunction:
    """
    F(gamma) = g(<f_1, gamma>, ..., <f_N, gamma>).
    """

    def __init__(self, outer: Outer, inner: Sequence[SmoothField]):
        if len(inner) < 1:
            raise ValueError("cylinder function needs at least one inner function")
        if outer.n_args != len(inner):
            raise ValueError(
                f"outer function takes {outer.n_args} arguments but {len(inner)} inner functions given"
            )
        self.outer = outer
        self.inner: Tuple[BumpCombination, ...] = tuple(as_combination(f) for f in inner)

    @classmethod
    def linear(cls, f: SmoothField) -> "CylinderFunction":
        """
        F = <f, .>.
        """
        return cls(Polynomial.variable(0, 1), [f])

    def args(self, gamma: Configuration) -> np.ndarray:
        return np.array([pair(f, gamma) for f in self.inner])

    def __call__(self, gamma: Configuration) -> float:
        return float(self.outer.value(self.args(gamma)))

    def with_insertions(self, gamma: Configuration, X: np.ndarray) -> np.ndarray:
        """
        F(gamma + delta_x) for every row x of X.
        """
        X = np.atleast_2d(np.asarray(X, dtype=float))
        shifted = self.args(gamma)[None, :] + np.stack([f(X) for f in self.inner], axis=-1)
        return np.asarray(self.outer.value(shifted), dtype=float)

    def _join(self, other: "CylinderFunction") -> Tuple[Outer, Outer, List[SmoothField]]:
        n = self.outer.n_args + other.outer.n_args
        left = self.outer.embed(0, n)
        right = other.outer.embed(self.outer.n_args, n)
        return left, right, list(self.inner) + list(other.inner)

    def __add__(self, other: Union["CylinderFunction", float]) -> "CylinderFunction":
        if not isinstance(other, CylinderFunction):
            return CylinderFunction(self.outer + float(other), self.inner)
        left, right, inner = self._join(other)
        return CylinderFunction(left + right, inner)

    def __mul__(self, other: Union["CylinderFunction", float]) -> "CylinderFunction":
        if not isinstance(other, CylinderFunction):
            return CylinderFunction(self.outer * float(other), self.inner)
        left, right, inner = self._join(other)
        return CylinderFunction(left * right, inner)

    __rmul__ = __mul__

    def tanh(self) -> "CylinderFunction":
        return CylinderFunction(self.outer.tanh(), self.inner)

    def partial(self, i: int) -> "CylinderFunction":
        return CylinderFunction(self.outer.partial(i), self.inner)

    def inner_gradients(self, gamma: Configuration) -> np.ndarray:
        """
        grad f_i at every point, shape (N, n, d).
        """
        return np.stack([f.gradient(gamma.points) for f in self.inner])

    def gradient(self, gamma: Configuration) -> TangentVector:
        if gamma.n == 0:
            return TangentVector.zero(gamma)
        dg = self.outer.gradient(self.args(gamma))
        return TangentVector(np.einsum("i,ind->nd", dg, self.inner_gradients(gamma)))

    def gradient_representation(self) -> List[Tuple["CylinderFunction", GradientField]]:
        """
        grad F written as the finite sum of (partial_i g)(...) * grad f_i.
        """
        return [(self.partial(i), GradientField(f=f)) for i, f in enumerate(self.inner)]


def eval_cyl(F: CylinderFunction, gamma: Configuration) -> float:
    return F(gamma)


def grad_gamma(F: CylinderFunction, gamma: Configuration) -> TangentVector:
    return F.gradient(gamma)


def lift_flow(
    v: VectorField, t: float, gamma: Configuration, max_step: float = FLOW_STEP
) -> Configuration:
    """
    Move every point along the flow of v for time t (classic RK4, step at most
    `max_step`). Points outside the support of v stay where they are.
    """
    if t == 0.0 or gamma.n == 0:
        return gamma
    steps = max(1, math.ceil(abs(t) / max_step))
    h = t / steps
    x = np.array(gamma.points)
    for _ in range(steps):
        k1 = v(x)
        k2 = v(x + 0.5 * h * k1)
        k3 = v(x + 0.5 * h * k2)
        k4 = v(x + h * k3)
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return gamma.with_points(wrap(x, gamma.dom))


def directional_derivative(F: CylinderFunction, v: VectorField, gamma: Configuration) -> float:
    """
    <grad F(gamma), v> = d/dt F(flow_t(gamma)) at t = 0.
    """
    if gamma.n == 0:
        return 0.0
    return F.gradient(gamma).inner(v(gamma.points))


def divergence_pairing(
    v: VectorField, gamma: Configuration, sigma: Optional[IntensityMeasure] = None
) -> float:
    """
    <div v, gamma>, or <div v + <beta, v>, gamma> with beta = grad(rho)/rho when
    an intensity measure is given.
    """
    if gamma.n == 0:
        return 0.0
    values = v.divergence(gamma.points)
    if sigma is not None:
        values = values + np.sum(sigma.log_gradient(gamma.points) * v(gamma.points), axis=-1)
    return float(np.sum(values))


def div_gamma(
    V: Sequence[Tuple[CylinderFunction, VectorField]],
    gamma: Configuration,
    sigma: Optional[IntensityMeasure] = None,
) -> float:
    """
    Divergence of the finitely based field sum_i F_i * v_i:
    sum_i <grad F_i, v_i> + F_i * <div v_i, gamma>.
    """
    total = 0.0
    for F, v in V:
        total += directional_derivative(F, v, gamma) + F(gamma) * divergence_pairing(v, gamma, sigma)
    return total


def laplacian_gamma(
    F: CylinderFunction, gamma: Configuration, sigma: Optional[IntensityMeasure] = None
) -> float:
    """
    sum_ij d_i d_j g * <<grad f_i, grad f_j>, gamma> + sum_i d_i g * <Laplacian f_i, gamma>
    (plus sum_i d_i g * <<beta, grad f_i>, gamma> for an intensity measure).
    """
    a = F.args(gamma)
    if gamma.n == 0:
        return 0.0
    grads = F.inner_gradients(gamma)
    gram = np.einsum("ind,jnd->ij", grads, grads)
    lap = np.array([pair(f.laplacian, gamma) for f in F.inner])
    if sigma is not None:
        beta = sigma.log_gradient(gamma.points)
        lap = lap + np.einsum("ind,nd->i", grads, beta)
    return float(np.sum(F.outer.hessian(a) * gram) + F.outer.gradient(a) @ lap)


def L_v_phi(
    phi: PotentialBase, v: VectorField, gamma: Configuration, method: str = "auto"
) -> float:
    """
    -sum over unordered pairs {x, y} of <grad phi(x - y), v(x) - v(y)>.

    Pairs on which v agrees contribute nothing and are skipped.
    """
    if gamma.n < 2:
        return 0.0
    i, j, disp, _ = neighbour_pairs(gamma.points, gamma.dom, phi.cutoff, method)
    if len(i) == 0:
        return 0.0
    field = v(gamma.points)
    diff = field[i] - field[j]
    active = np.any(diff != 0.0, axis=1)
    if not np.any(active):
        return 0.0
    g = phi.grad(disp[active])
    return -float(np.sum(g * diff[active]))


def B_v_phi(
    phi: PotentialBase,
    v: VectorField,
    gamma: Configuration,
    sigma: Optional[IntensityMeasure] = None,
    method: str = "auto",
) -> float:
    """
    L_v_phi + <div v, gamma> (the sigma-divergence when sigma is given).
    """
    return L_v_phi(phi, v, gamma, method) + divergence_pairing(v, gamma, sigma)


def generator_apply(
    phi: PotentialBase, F: CylinderFunction, gamma: Configuration, method: str = "auto"
) -> float:
    """
    LF = Laplacian F + sum_x <b(x), grad F(x)>, b(x) = -sum_{y != x} grad phi(x - y).
    """
    lap = laplacian_gamma(F, gamma)
    if gamma.n < 2:
        return lap
    return lap + F.gradient(gamma).inner(pair_forces(phi, gamma, method))


def bump(center: Sequence[float], radius: float, dom: TorusDomain, amplitude: float = 1.0) -> BumpFunction:
    return BumpFunction(center=tuple(float(c) for c in center), radius=radius, amplitude=amplitude, dom=dom)
