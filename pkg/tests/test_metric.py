import math
from itertools import product

import numpy as np
import pytest

from confspace.calculus import bump
from confspace.configuration import Configuration
from confspace.domain import TorusDomain
from confspace.metric import (
    LipschitzViolation,
    lipschitz_certificate,
    lipschitz_constant,
    rho,
    rho_brute_force,
    rho_to_set,
)

DOM = TorusDomain(d=2, L=4.0)


def _random(n: int, seed: int, dom: TorusDomain = DOM) -> Configuration:
    return Configuration(dom.L * np.random.default_rng(seed).random((n, dom.d)), dom)


@pytest.mark.parametrize("n, seed", product(range(8), [0, 1, 2]))
def test_assignment_matches_brute_force(n: int, seed: int):
    gamma, omega = _random(n, seed), _random(n, 100 + seed)
    fast, slow = rho(gamma, omega), rho_brute_force(gamma, omega)
    assert fast.cost == pytest.approx(slow.cost, rel=1e-12, abs=1e-12)
    assert sorted(fast.assignment) == list(range(n))


def test_pseudo_metric_properties():
    a, b, c = _random(5, 1), _random(5, 2), _random(5, 3)
    assert rho(a, a).cost == 0.0
    assert rho(a, b).cost == pytest.approx(rho(b, a).cost)
    assert rho(a, c).cost <= rho(a, b).cost + rho(b, c).cost + 1e-12
    shuffled = Configuration(a.points[::-1], DOM)
    assert rho(a, shuffled).cost == 0.0


def test_distance_uses_torus_geometry():
    gamma = Configuration(np.array([[0.1, 0.1]]), DOM)
    omega = Configuration(np.array([[3.9, 3.9]]), DOM)
    assert rho(gamma, omega).cost == pytest.approx(0.2 * math.sqrt(2.0))
    assert rho(gamma, omega).assignment == [0]


def test_different_counts_are_infinitely_far():
    result = rho(_random(3, 0), _random(4, 0))
    assert result.cost == math.inf
    assert result.assignment is None
    assert rho_brute_force(_random(3, 0), _random(4, 0)).cost == math.inf
    empty = Configuration.empty(DOM)
    assert rho(empty, empty).cost == 0.0


def test_argument_errors():
    with pytest.raises(ValueError, match="configurations live on different domains"):
        rho(_random(2, 0), _random(2, 0, TorusDomain(d=2, L=5.0)))
    with pytest.raises(ValueError, match="brute force matching is limited to 8 points"):
        rho_brute_force(_random(9, 0), _random(9, 1))
    with pytest.raises(ValueError, match="distance to an empty set of configurations"):
        rho_to_set(_random(2, 0), [])


def test_distance_to_a_set():
    gamma = _random(4, 0)
    near = Configuration(np.mod(gamma.points + 0.01, DOM.L), DOM)
    candidates = [_random(4, 5), near, _random(3, 1)]
    assert rho_to_set(gamma, candidates) == pytest.approx(rho(near, gamma).cost)


def test_lipschitz_constant_of_a_bump():
    dom = TorusDomain(d=1, L=4.0)
    f = bump((2.0,), 1.0, dom)
    # on the line the steepest slope of exp(-1/(1-s^2)) is known to high accuracy
    s = np.linspace(0.0, 0.999, 200001)
    slope = np.max(np.abs(-2.0 * s / (1.0 - s**2) ** 2 * np.exp(-1.0 / (1.0 - s**2))))
    lip = lipschitz_constant(f, dom)
    assert lip == pytest.approx(1.01 * slope, rel=1e-6)


def test_lipschitz_certificate_on_random_pairs():
    f = bump((2.0, 2.0), 1.5, DOM, amplitude=3.0)
    pairs = []
    for k, n in enumerate([1, 3, 6]):
        gamma = _random(n, 10 + k)
        jitter = 0.2 * (np.random.default_rng(20 + k).random((n, 2)) - 0.5)
        pairs.append((gamma, Configuration(np.mod(gamma.points + jitter, DOM.L), DOM)))
    report = lipschitz_certificate(f, pairs)
    assert report.n_pairs == 3
    assert 0.0 <= report.max_ratio <= 1.0


def test_lipschitz_certificate_reports_violations():
    f = bump((2.0, 2.0), 1.5, DOM)
    gamma = Configuration(np.array([[2.5, 2.0]]), DOM)
    omega = Configuration(np.array([[2.7, 2.0]]), DOM)
    with pytest.raises(LipschitzViolation, match="Lipschitz bound violated"):
        lipschitz_certificate(f, [(gamma, omega)], lipschitz=1e-6)
    with pytest.raises(ValueError, match="pair with different point counts 1 and 0"):
        lipschitz_certificate(f, [(gamma, Configuration.empty(DOM))], lipschitz=1.0)
    with pytest.raises(ValueError, match="no configuration pairs to check"):
        lipschitz_certificate(f, [])
