import math

import numpy as np
import pytest
from pydantic import ValidationError
from scipy import integrate

from confspace.calculus import CylinderFunction, bump
from confspace.configuration import Configuration
from confspace.domain import TorusDomain, Window, displacement, distance
from confspace.dynamics import (
    Trajectory,
    TrajectoryParams,
    bonferroni_threshold,
    drift,
    free_step,
    heat_semigroup,
    heat_semigroup_test,
    interacting_step,
    invariance_test,
    laplace_functional_test,
    martingale_test,
    simulate_free,
    simulate_interacting,
)
from confspace.gibbs import GibbsSpec
from confspace.intensity import MixingLaw, UniformIntensity, sample_poisson
from confspace.potential import HardCorePotential, LennardJonesPotential, ZeroPotential, pair_forces
from confspace.rng import stream

DOM = TorusDomain(d=2, L=4.0)
LJ = LennardJonesPotential(a=1.0, b=1.0, r_cut=2.5, taper_width=0.5)


def test_free_step_has_variance_2dt():
    dom = TorusDomain(d=1, L=100.0)
    start = Configuration(np.full((20000, 1), 50.0), dom)
    moved = free_step(start, 0.01, stream(0))
    steps = displacement(moved.points, start.points, dom)[:, 0]
    assert np.var(steps) == pytest.approx(0.02, rel=0.05)
    assert abs(np.mean(steps)) < 4 * math.sqrt(0.02 / 20000)


def test_free_step_edge_cases():
    empty = Configuration.empty(DOM)
    assert free_step(empty, 0.1, stream(0)) is empty
    with pytest.raises(ValueError, match="time step must be > 0, got 0.0"):
        free_step(empty, 0.0, stream(0))
    with pytest.raises(ValueError, match="time step must be > 0, got -1.0"):
        interacting_step(LJ, empty, -1.0, stream(0))


def test_trajectory_saves_and_keeps_the_count():
    gamma0 = Configuration(np.array([[1.0, 1.0], [3.0, 2.0], [0.5, 3.5]]), DOM)
    params = TrajectoryParams(dt=0.01, n_steps=10, save_every=3, seed=4)
    path = simulate_free(gamma0, params)
    np.testing.assert_allclose(path.times, [0.0, 0.03, 0.06, 0.09, 0.1])
    assert all(c.n == 3 for c in path.configurations)
    assert path.configurations[0] is gamma0
    again = simulate_free(gamma0, params)
    assert again.final == path.final
    assert params.horizon == pytest.approx(0.1)


def test_trajectory_validation():
    a = Configuration(np.array([[1.0, 1.0]]), DOM)
    with pytest.raises(ValidationError, match="point count changed along the trajectory"):
        Trajectory(times=[0.0, 0.1], configurations=[a, Configuration.empty(DOM)])
    with pytest.raises(ValidationError, match="one configuration per saved time"):
        Trajectory(times=[0.0], configurations=[a, a])
    with pytest.raises(ValidationError):
        TrajectoryParams(dt=0.0, n_steps=1)
    with pytest.raises(ValidationError):
        TrajectoryParams(dt=0.1, n_steps=1, steps=3)


def test_drift_pushes_close_pairs_apart():
    dom = TorusDomain(d=2, L=6.0)
    gamma = Configuration(np.array([[2.0, 3.0], [3.0, 3.0]]), dom)
    np.testing.assert_allclose(drift(LJ, gamma), [[-6.0, 0.0], [6.0, 0.0]])
    dt = 1e-4
    moved = interacting_step(LJ, gamma, dt, stream(1), scale=1e-12)
    assert float(distance(moved.points[0], moved.points[1], dom)) == pytest.approx(1.0 + 12.0 * dt, rel=1e-9)


def test_interacting_step_never_enters_the_hard_core():
    phi = HardCorePotential(R=0.5)
    gamma = Configuration(np.array([[1.0, 1.0], [1.6, 1.0], [1.3, 1.6], [3.0, 3.0]]), DOM)
    path = simulate_interacting(phi, gamma, TrajectoryParams(dt=0.01, n_steps=200, seed=2))
    for config in path.configurations:
        d = distance(config.points[:, None, :], config.points[None, :, :], DOM)
        assert np.all(d[np.triu_indices(config.n, k=1)] >= 0.5)


def test_heat_semigroup_matches_direct_convolution():
    dom = TorusDomain(d=1, L=4.0)
    f = bump((2.0,), 1.0, dom)
    t = 0.05
    X = np.array([[1.2], [2.0], [2.9], [0.1]])
    s = np.linspace(-3.0, 3.0, 60001)
    kernel = np.exp(-(s**2) / (4.0 * t)) / math.sqrt(4.0 * math.pi * t)
    expected = [integrate.trapezoid(f(np.mod(x + s, dom.L)[:, None]) * kernel, s) for x in X[:, 0]]
    np.testing.assert_allclose(heat_semigroup(f, X, t, dom), expected, atol=1e-4)
    np.testing.assert_allclose(heat_semigroup(f, X, 0.0, dom), f(X))


def test_heat_semigroup_identity_holds():
    f = bump((2.0, 2.0), 1.2, DOM, amplitude=-0.5)
    gamma0 = Configuration(np.array([[2.0, 2.0], [1.5, 2.5], [2.8, 1.6], [0.2, 0.2], [2.2, 2.1]]), DOM)
    result = heat_semigroup_test(f, gamma0, 0.05, 20000, seed=3)
    assert result.passed
    assert result.rhs.std_error == 0.0
    assert 0.0 < result.rhs.mean < 1.0


def test_laplace_functional_fields_must_be_nonpositive():
    f = bump((2.0, 2.0), 1.2, DOM, amplitude=0.5)
    gamma0 = Configuration(np.array([[2.0, 2.0]]), DOM)
    with pytest.raises(ValueError, match=r"Laplace functional fields must take values in \(-1, 0\]"):
        heat_semigroup_test(f, gamma0, 0.05, 10)


def test_laplace_functional_identity_holds():
    law = MixingLaw(atoms=((0.5, 0.5), (1.5, 0.5)))
    f1 = bump((2.0, 2.0), 1.2, DOM, amplitude=-0.5)
    f2 = bump((1.0, 3.0), 0.8, DOM, amplitude=-0.3)
    result = laplace_functional_test(law, [f1, f2], [0.02, 0.05], DOM, n_systems=20000, n_particles=200000, seed=5)
    assert result.passed
    assert result.lhs.n_samples == 20000


def test_laplace_functional_argument_errors():
    law = MixingLaw.dirac(1.0)
    f = bump((2.0, 2.0), 1.2, DOM, amplitude=-0.5)
    with pytest.raises(ValueError, match="need one field per time"):
        laplace_functional_test(law, [f], [0.1, 0.2], DOM, 10, 10)
    with pytest.raises(ValueError, match="times must be nondecreasing and >= 0"):
        laplace_functional_test(law, [f, f], [0.2, 0.1], DOM, 10, 10)


@pytest.mark.parametrize("phi", [ZeroPotential(), LJ])
def test_martingale_increment_has_zero_mean(phi):
    dom = TorusDomain(d=2, L=6.0)
    start = Configuration(np.array([[3.0, 3.0], [4.1, 3.0], [3.5, 4.0]]), dom)
    F = CylinderFunction.linear(bump((3.5, 3.3), 1.8, dom)).tanh()
    report = martingale_test(phi, F, [start] * 200, horizon=0.02, dt=1e-3, seed=6)
    assert report.passed
    assert report.coarse.n_samples == 200


def test_bonferroni_threshold():
    assert bonferroni_threshold(1) == pytest.approx(4.0)
    assert bonferroni_threshold(10) > bonferroni_threshold(2) > 4.0


def test_free_invariance_keeps_poisson_counts():
    dom = TorusDomain(d=2, L=4.0)
    window = Window.whole(dom)
    spec = GibbsSpec(z=1.0, potential=ZeroPotential(), window=window, dom=dom)
    rng = stream(7)
    samples = [sample_poisson(UniformIntensity(z=1.0), window, dom, rng) for _ in range(300)]
    report = invariance_test(
        spec, samples, horizon=0.05, dt=0.01, bins=np.linspace(0.0, 1.5, 4), seed=7,
        count_window=Window(lower=(0.0, 0.0), upper=(2.0, 2.0)),
    )
    assert report.count_test is not None
    assert len(report.bin_z) == 3
    assert report.z_critical == pytest.approx(bonferroni_threshold(4))
    assert report.passed


def test_invariance_needs_the_whole_torus():
    spec = GibbsSpec(z=1.0, potential=LJ, window=Window(lower=(0.0, 0.0), upper=(2.0, 2.0)), dom=DOM)
    with pytest.raises(ValueError, match="invariance is tested for the torus Gibbs measure"):
        invariance_test(spec, [], horizon=0.1, dt=0.01, bins=[0.0, 1.0])


def test_pair_forces_sum_to_zero():
    dom = TorusDomain(d=2, L=6.0)
    gamma = Configuration(np.array([[3.0, 3.0], [4.1, 3.2], [2.4, 3.9], [3.3, 1.9]]), dom)
    np.testing.assert_allclose(pair_forces(LJ, gamma).sum(axis=0), 0.0, atol=1e-10)
