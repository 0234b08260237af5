from itertools import product

import numpy as np
import pytest
from pydantic import ValidationError

from confspace.calculus import (
    B_v_phi,
    BumpCombination,
    BumpVectorField,
    CylinderFunction,
    GradientField,
    L_v_phi,
    Polynomial,
    TangentVector,
    bump,
    directional_derivative,
    div_gamma,
    divergence_pairing,
    eval_cyl,
    generator_apply,
    grad_gamma,
    laplacian_gamma,
    lift_flow,
)
from confspace.configuration import Configuration, pair
from confspace.domain import TorusDomain, distance
from confspace.intensity import DensityIntensity
from confspace.potential import LennardJonesPotential, ZeroPotential, pair_forces, total_energy

DOM = TorusDomain(d=2, L=4.0)
H = 1e-5

F1 = bump((2.0, 2.0), 1.5, DOM)
F2 = bump((1.5, 2.5), 1.2, DOM, amplitude=2.0)
GAMMA = Configuration(np.array([[2.1, 1.8], [1.2, 2.6], [2.5, 2.9], [0.3, 0.3]]), DOM)


def _cylinder() -> CylinderFunction:
    a = CylinderFunction.linear(F1)
    b = CylinderFunction.linear(F2)
    return a.tanh() * b + a * a + 0.5


def _nudged(gamma: Configuration, k: int, axis: int, h: float) -> Configuration:
    points = np.array(gamma.points)
    points[k, axis] += h
    return gamma.with_points(points)


@pytest.mark.parametrize("d, amplitude", product([1, 2, 3], [1.0, -0.5]))
def test_bump_derivatives_match_finite_differences(d: int, amplitude: float):
    dom = TorusDomain(d=d, L=4.0)
    f = bump((2.0,) * d, 1.3, dom, amplitude=amplitude)
    rng = np.random.default_rng(d)
    X = 2.0 + 1.2 * (rng.random((20, d)) - 0.5)
    h = 1e-4
    grad = np.stack([(f(X + h * e) - f(X - h * e)) / (2 * h) for e in np.eye(d)], axis=-1)
    lap = sum((f(X + h * e) - 2 * f(X) + f(X - h * e)) / h**2 for e in np.eye(d))
    np.testing.assert_allclose(f.gradient(X), grad, rtol=1e-5, atol=1e-8)
    np.testing.assert_allclose(f.laplacian(X), lap, rtol=1e-4, atol=1e-5)


def test_bump_vanishes_outside_its_support():
    X = np.array([[2.0 + 1.5, 2.0], [0.0, 0.0]])
    assert np.all(F1(X) == 0.0)
    assert np.all(F1.gradient(X) == 0.0)
    assert np.all(F1.laplacian(X) == 0.0)


@pytest.mark.parametrize(
    "kwargs, message",
    [
        ({"center": (1.0,), "radius": 1.0}, "bump center must have 2 coordinates"),
        ({"center": (1.0, 1.0), "radius": 2.0}, r"bump radius must lie in \(0, L/2\), got 2.0"),
        ({"center": (1.0, 1.0), "radius": 1.0, "amplitude": float("inf")}, "bump amplitude must be finite"),
    ],
)
def test_bump_validation(kwargs, message: str):
    with pytest.raises(ValidationError, match=message):
        bump(dom=DOM, **kwargs)


def test_combination_arithmetic():
    combo = BumpCombination.of(F1, 2.0) + F2
    X = GAMMA.points
    np.testing.assert_allclose(combo(X), 2.0 * F1(X) + F2(X))
    np.testing.assert_allclose(combo.scaled(-1.0).gradient(X), -(2.0 * F1.gradient(X) + F2.gradient(X)))
    assert BumpCombination(constant=3.0)(X).tolist() == [3.0] * 4


def test_outer_partials_and_hessian():
    x = Polynomial.variable(0, 2)
    y = Polynomial.variable(1, 2)
    g = (x * y + x * x).tanh() + 3.0 * y
    a = np.array([0.3, -0.7])
    h = 1e-5
    numeric = [(g.value(a + h * e) - g.value(a - h * e)) / (2 * h) for e in np.eye(2)]
    np.testing.assert_allclose(g.gradient(a), numeric, rtol=1e-7)
    hess = g.hessian(a)
    np.testing.assert_allclose(hess, hess.T)
    numeric_hess = np.array(
        [[(g.partial(i).value(a + h * e) - g.partial(i).value(a - h * e)) / (2 * h) for e in np.eye(2)] for i in range(2)]
    )
    np.testing.assert_allclose(hess, numeric_hess, rtol=1e-6, atol=1e-8)
    with pytest.raises(ValueError, match="argument index 2 out of range for 2 arguments"):
        g.partial(2)
    with pytest.raises(ValueError, match="outer functions of different arity"):
        g + Polynomial.variable(0, 1)


def test_cylinder_arity_errors():
    with pytest.raises(ValueError, match="outer function takes 2 arguments but 1 inner functions given"):
        CylinderFunction(Polynomial.variable(0, 2), [F1])
    with pytest.raises(ValueError, match="needs at least one inner function"):
        CylinderFunction(Polynomial.variable(0, 1), [])


def test_cylinder_value_and_insertions():
    F = _cylinder()
    a, b = pair(F1, GAMMA), pair(F2, GAMMA)
    assert F(GAMMA) == pytest.approx(np.tanh(a) * b + a * a + 0.5)
    X = np.array([[2.0, 2.0], [3.9, 0.1]])
    inserted = F.with_insertions(GAMMA, X)
    for x, value in zip(X, inserted):
        bigger = Configuration(np.vstack([GAMMA.points, x]), DOM)
        assert value == pytest.approx(F(bigger))


def test_gradient_matches_finite_differences():
    F = _cylinder()
    grad = F.gradient(GAMMA).vectors
    for k, axis in product(range(GAMMA.n), range(2)):
        numeric = (F(_nudged(GAMMA, k, axis, H)) - F(_nudged(GAMMA, k, axis, -H))) / (2 * H)
        assert grad[k, axis] == pytest.approx(numeric, rel=1e-5, abs=1e-8)
    assert len(F.gradient(Configuration.empty(DOM))) == 0


def test_gradient_representation_sums_to_gradient():
    F = _cylinder()
    total = np.zeros_like(GAMMA.points)
    for G, field in F.gradient_representation():
        total += G(GAMMA) * field(GAMMA.points)
    np.testing.assert_allclose(total, F.gradient(GAMMA).vectors, rtol=1e-12, atol=1e-14)


def test_laplacian_matches_finite_differences():
    F = _cylinder()
    h = 1e-4
    numeric = 0.0
    for k, axis in product(range(GAMMA.n), range(2)):
        numeric += (F(_nudged(GAMMA, k, axis, h)) - 2 * F(GAMMA) + F(_nudged(GAMMA, k, axis, -h))) / h**2
    assert laplacian_gamma(F, GAMMA) == pytest.approx(numeric, rel=1e-4, abs=1e-5)
    assert laplacian_gamma(F, Configuration.empty(DOM)) == 0.0


def test_directional_derivative_follows_the_flow():
    F = _cylinder()
    v = BumpVectorField.along(F1, (1.0, -0.5)) + BumpVectorField.along(F2, (0.0, 1.0))
    numeric = (F(lift_flow(v, H, GAMMA)) - F(lift_flow(v, -H, GAMMA))) / (2 * H)
    assert directional_derivative(F, v, GAMMA) == pytest.approx(numeric, rel=1e-5, abs=1e-8)


def test_lift_flow_fixes_points_outside_the_support():
    v = BumpVectorField.along(F1, (1.0, 0.0))
    moved = lift_flow(v, 0.3, GAMMA)
    assert np.array_equal(moved.points[3], GAMMA.points[3])
    assert not np.array_equal(moved.points[0], GAMMA.points[0])
    assert lift_flow(v, 0.0, GAMMA) is GAMMA


def test_vector_field_divergence():
    v = BumpVectorField.along(F1, (1.0, 2.0))
    X = GAMMA.points
    h = 1e-5
    numeric = sum((v(X + h * e)[:, k] - v(X - h * e)[:, k]) / (2 * h) for k, e in enumerate(np.eye(2)))
    np.testing.assert_allclose(v.divergence(X), numeric, rtol=1e-6, atol=1e-9)
    grad_field = GradientField(f=BumpCombination.of(F2))
    np.testing.assert_allclose(grad_field.divergence(X), F2.laplacian(X))
    with pytest.raises(ValueError, match="vector fields of different dimension"):
        v + BumpVectorField.zero(3)


def test_div_gamma_of_a_single_term():
    F = _cylinder()
    v = BumpVectorField.along(F2, (0.5, 1.0))
    expected = directional_derivative(F, v, GAMMA) + F(GAMMA) * divergence_pairing(v, GAMMA)
    assert div_gamma([(F, v)], GAMMA) == pytest.approx(expected)
    assert div_gamma([(F, v), (F, v)], GAMMA) == pytest.approx(2.0 * expected)


def test_interaction_term_is_minus_the_energy_derivative():
    dom = TorusDomain(d=2, L=6.0)
    phi = LennardJonesPotential(a=1.0, b=1.0, r_cut=2.5, taper_width=0.5)
    gamma = Configuration(np.array([[3.0, 3.0], [4.1, 3.2], [2.4, 3.9], [3.3, 1.9], [0.5, 5.5]]), dom)
    v = BumpVectorField.along(bump((3.0, 3.0), 1.4, dom), (1.0, 0.5))
    numeric = (total_energy(phi, lift_flow(v, H, gamma)) - total_energy(phi, lift_flow(v, -H, gamma))) / (2 * H)
    assert L_v_phi(phi, v, gamma) == pytest.approx(-numeric, rel=1e-5, abs=1e-7)
    assert B_v_phi(ZeroPotential(), v, gamma) == pytest.approx(divergence_pairing(v, gamma))


def test_generator_adds_the_drift():
    dom = TorusDomain(d=2, L=6.0)
    phi = LennardJonesPotential(a=1.0, b=1.0, r_cut=2.5, taper_width=0.5)
    gamma = Configuration(np.array([[3.0, 3.0], [4.1, 3.2], [2.4, 3.9]]), dom)
    F = CylinderFunction.linear(bump((3.0, 3.0), 1.5, dom)).tanh()
    drift = F.gradient(gamma).inner(pair_forces(phi, gamma))
    assert generator_apply(phi, F, gamma) == pytest.approx(laplacian_gamma(F, gamma) + drift)
    assert generator_apply(ZeroPotential(), F, gamma) == pytest.approx(laplacian_gamma(F, gamma))


def test_tangent_vectors():
    V = TangentVector(np.ones((3, 2)))
    W = TangentVector(np.arange(6.0).reshape(3, 2))
    assert V.inner(W) == pytest.approx(15.0)
    assert (V + W).scaled(2.0).inner(V) == pytest.approx(2.0 * (6.0 + 15.0))
    with pytest.raises(ValueError, match="tangent vectors of different shape"):
        V.inner(np.ones((2, 2)))


def test_functional_forms_agree_with_the_methods():
    F = _cylinder()
    assert eval_cyl(F, GAMMA) == F(GAMMA)
    np.testing.assert_array_equal(grad_gamma(F, GAMMA).vectors, F.gradient(GAMMA).vectors)


def _density() -> DensityIntensity:
    return DensityIntensity(rho=BumpCombination(terms=((0.5, F2),), constant=1.0), rho_max=2.0)


@pytest.mark.parametrize("with_density", [False, True])
def test_laplacian_is_the_divergence_of_the_gradient(with_density: bool):
    F = _cylinder()
    sigma = _density() if with_density else None
    expected = div_gamma(F.gradient_representation(), GAMMA, sigma)
    assert laplacian_gamma(F, GAMMA, sigma) == pytest.approx(expected, rel=1e-10, abs=1e-12)


def test_product_and_chain_rules():
    a = CylinderFunction.linear(F1)
    b = CylinderFunction.linear(F2).tanh() + 0.25
    product_grad = (a * b).gradient(GAMMA).vectors
    expected = a(GAMMA) * b.gradient(GAMMA).vectors + b(GAMMA) * a.gradient(GAMMA).vectors
    np.testing.assert_allclose(product_grad, expected, rtol=1e-10, atol=1e-12)
    F = _cylinder()
    chain_grad = F.tanh().gradient(GAMMA).vectors
    expected = (1.0 - np.tanh(F(GAMMA)) ** 2) * F.gradient(GAMMA).vectors
    np.testing.assert_allclose(chain_grad, expected, rtol=1e-10, atol=1e-12)


def test_div_gamma_does_not_depend_on_the_representation():
    F = _cylinder()
    G = CylinderFunction.linear(F2).tanh()
    v1 = BumpVectorField.along(F1, (1.0, -0.5))
    v2 = BumpVectorField.along(F2, (0.5, 1.0))
    pairs = [
        ([(F, v1 + v2)], [(F, v1), (F, v2)]),
        ([(F + G, v1)], [(F, v1), (G, v1)]),
        ([(F * 2.0, BumpVectorField.along(F2, (0.5, 1.0)))], [(F, BumpVectorField.along(F2, (1.0, 2.0)))]),
    ]
    for sigma in (None, _density()):
        for first, second in pairs:
            assert div_gamma(first, GAMMA, sigma) == pytest.approx(
                div_gamma(second, GAMMA, sigma), rel=1e-10, abs=1e-12
            )


def test_lift_flow_is_a_flow():
    v = BumpVectorField.along(F1, (1.0, -0.5)) + BumpVectorField.along(F2, (0.0, 1.0))
    composed = lift_flow(v, 0.3, lift_flow(v, 0.2, GAMMA))
    direct = lift_flow(v, 0.5, GAMMA)
    assert np.max(distance(composed.points, direct.points, DOM)) < 1e-9
    back = lift_flow(v, -0.5, direct)
    assert np.max(distance(back.points, GAMMA.points, DOM)) < 1e-9


def _interaction_oracle(phi: LennardJonesPotential, v, gamma: Configuration) -> float:
    """
    -sum over i < j of <grad phi(x_i - x_j), v(x_i) - v(x_j)>, scanning every pair.
    """
    X, L = gamma.points, gamma.dom.L
    V = v(X)
    total = 0.0
    for i in range(gamma.n):
        for j in range(i + 1, gamma.n):
            u = X[i] - X[j]
            u = u - L * np.round(u / L)
            r = float(np.sqrt(u @ u))
            if r < phi.cutoff:
                total -= float(phi.derivative(r) / r * (u @ (V[i] - V[j])))
    return total


@pytest.mark.parametrize("method", ["naive", "cells"])
def test_interaction_term_matches_the_pairwise_oracle(method: str):
    dom = TorusDomain(d=2, L=12.0)
    phi = LennardJonesPotential(a=1.0, b=1.0, r_cut=2.5, taper_width=0.5)
    rng = np.random.default_rng(12)
    lattice = np.stack(np.meshgrid(np.arange(10), np.arange(10), indexing="ij"), axis=-1).reshape(-1, 2)
    points = (1.2 * lattice + 0.6 + 0.2 * (rng.random((100, 2)) - 0.5)) % dom.L
    gamma = Configuration(points, dom)
    v = BumpVectorField.along(bump((6.0, 6.0), 4.0, dom), (1.0, 0.5)) + BumpVectorField.along(
        bump((2.0, 9.0), 3.0, dom), (-0.5, 1.0)
    )
    expected = _interaction_oracle(phi, v, gamma)
    assert expected != 0.0
    assert L_v_phi(phi, v, gamma, method) == pytest.approx(expected, rel=1e-12)
