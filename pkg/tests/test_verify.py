import math

import numpy as np
import pytest

from confspace.calculus import BumpVectorField, CylinderFunction, bump
from confspace.domain import TorusDomain, Window
from confspace.intensity import QuadratureError, UniformIntensity, sample_poisson
from confspace.potential import HardCorePotential, ZeroPotential
from confspace.rng import stream
from confspace.verify import (
    CountTimesIndicator,
    CylinderWeightedIndicator,
    EstimatorResult,
    IdentityResult,
    WindowIndicator,
    aggregate,
    consistent,
    ibp_test,
    mecke_test,
    merge_identity,
    poisson_count_test,
    volume_element_test,
)

DOM = TorusDomain(d=2, L=4.0)
WHOLE = Window.whole(DOM)
SIGMA = UniformIntensity(z=2.0)


@pytest.fixture(scope="module")
def poisson_samples():
    rng = stream(21)
    return [sample_poisson(SIGMA, WHOLE, DOM, rng) for _ in range(2000)]


def test_estimator_from_samples():
    result = EstimatorResult.from_samples([1.0, 2.0, 3.0, 4.0], target=2.0)
    assert result.mean == pytest.approx(2.5)
    assert result.std_error == pytest.approx(np.std([1, 2, 3, 4], ddof=1) / 2.0)
    assert result.z_score == pytest.approx(0.5 / result.std_error)
    assert EstimatorResult.from_samples([1.0, 2.0]).z_score is None
    batched = EstimatorResult.from_samples([1.0, 1.0, 3.0, 3.0], batches=2)
    assert batched.std_error == pytest.approx(1.0)


def test_estimator_edge_cases():
    with pytest.raises(ValueError, match="need at least 2 samples for a standard error, got 1"):
        EstimatorResult.from_samples([1.0])
    with pytest.raises(ValueError, match=r"batches must lie in \[2, 3\], got 4"):
        EstimatorResult.from_samples([1.0, 2.0, 3.0], batches=4)
    assert EstimatorResult(n_samples=2, mean=1.0, std_error=0.0, target=1.0).z_score == 0.0
    assert EstimatorResult(n_samples=2, mean=0.5, std_error=0.0, target=1.0).z_score == -math.inf


def test_aggregate_reproduces_the_pooled_mean():
    rng = np.random.default_rng(0)
    values = rng.normal(size=1000)
    shards = [EstimatorResult.from_samples(chunk, target=0.0) for chunk in np.array_split(values, 7)]
    pooled = aggregate(shards)
    assert pooled.n_samples == 1000
    assert pooled.mean == pytest.approx(float(np.mean(values)), abs=1e-12)
    assert pooled.std_error == pytest.approx(1.0 / math.sqrt(1000), rel=0.1)
    assert pooled.target == 0.0


def test_aggregate_errors():
    with pytest.raises(ValueError, match="cannot aggregate an empty list of results"):
        aggregate([])
    with pytest.raises(ValueError, match="cannot aggregate results with different targets"):
        aggregate([
            EstimatorResult(n_samples=2, mean=0.0, std_error=1.0, target=0.0),
            EstimatorResult(n_samples=2, mean=0.0, std_error=1.0, target=1.0),
        ])
    with pytest.raises(ValueError, match="cannot aggregate results without samples"):
        aggregate([EstimatorResult(n_samples=0, mean=0.0, std_error=0.0)])


def test_consistent():
    a = EstimatorResult(n_samples=10, mean=1.0, std_error=0.1)
    assert consistent(a, EstimatorResult(n_samples=10, mean=1.5, std_error=0.1))
    assert not consistent(a, EstimatorResult(n_samples=10, mean=2.0, std_error=0.1))
    exact = EstimatorResult(n_samples=10, mean=1.0, std_error=0.0)
    assert consistent(exact, exact)


def test_identity_verdict_and_merge():
    statistic = EstimatorResult(n_samples=1000, mean=0.1, std_error=0.05, target=0.0)
    result = IdentityResult(test="mecke", statistic=statistic)
    assert result.passed
    assert not IdentityResult(test="mecke", statistic=statistic, rejections=10).passed
    failing = statistic.model_copy(update={"mean": 0.3})
    assert not IdentityResult(test="mecke", statistic=failing).passed
    merged = merge_identity([result, IdentityResult(test="mecke", statistic=failing, rejections=1)])
    assert merged.statistic.n_samples == 2000
    assert merged.statistic.mean == pytest.approx(0.2)
    assert merged.rejections == 1
    assert merged.lhs is None
    with pytest.raises(ValueError, match="cannot merge an empty list"):
        merge_identity([])


def test_mecke_holds_for_poisson(poisson_samples):
    window = Window(lower=(0.5, 0.5), upper=(2.5, 3.0))
    for h in (WindowIndicator(window), CountTimesIndicator(window)):
        result = mecke_test(poisson_samples, SIGMA, ZeroPotential(), h)
        assert result.passed, result
        assert result.lhs.mean == pytest.approx(result.rhs.mean, rel=0.1)


def test_mecke_with_cylinder_weight(poisson_samples):
    F = CylinderFunction.linear(bump((2.0, 2.0), 1.5, DOM)).tanh()
    h = CylinderWeightedIndicator(F, bump((1.5, 1.5), 1.0, DOM), WHOLE)
    result = mecke_test(poisson_samples[:500], SIGMA, ZeroPotential(), h, panels=2)
    assert result.passed


def test_mecke_quadrature_check_catches_discontinuities(poisson_samples):
    h = CountTimesIndicator(WHOLE, count_window=Window(lower=(0.0, 0.0), upper=(1.3, 4.0)))
    with pytest.raises(QuadratureError, match="Mecke quadrature with 32 nodes x 1 panels misses its check"):
        mecke_test(poisson_samples[:5], SIGMA, ZeroPotential(), h, quad_rtol=1e-10)


def test_ibp_holds_for_poisson(poisson_samples):
    f = bump((2.0, 2.0), 1.5, DOM)
    F = CylinderFunction.linear(f).tanh()
    G = CylinderFunction.linear(bump((1.5, 2.5), 1.2, DOM)) + 1.0
    v = BumpVectorField.along(bump((2.2, 1.8), 1.4, DOM), (1.0, -0.5))
    result = ibp_test(poisson_samples, None, F, G, v)
    assert result.passed
    assert result.rejections == 0


def test_ibp_counts_hard_core_contacts(poisson_samples):
    F = CylinderFunction.linear(bump((2.0, 2.0), 1.5, DOM))
    v = BumpVectorField.along(bump((2.0, 2.0), 1.9, DOM), (1.0, 0.0))
    result = ibp_test(poisson_samples, HardCorePotential(R=0.1), F, F, v)
    assert result.rejections > 0
    assert result.statistic.n_samples + result.rejections == len(poisson_samples)
    assert not result.passed


def test_volume_element_holds_for_poisson(poisson_samples):
    F = CylinderFunction.linear(bump((2.0, 2.0), 1.5, DOM)).tanh()
    V = [
        (CylinderFunction.linear(bump((1.5, 2.0), 1.0, DOM)), BumpVectorField.along(bump((2.0, 2.0), 1.2, DOM), (1.0, 0.0))),
        (F, BumpVectorField.along(bump((2.5, 2.5), 1.0, DOM), (0.0, 1.0))),
    ]
    assert volume_element_test(poisson_samples, V, F).passed


def test_poisson_count_test():
    rng = np.random.default_rng(3)
    assert poisson_count_test(rng.poisson(6.0, size=5000), 6.0).passed
    assert not poisson_count_test(rng.poisson(7.0, size=5000), 6.0).passed
    assert not poisson_count_test([6] * 1000, 6.0).passed
    with pytest.raises(ValueError, match="no counts to test"):
        poisson_count_test([], 1.0)
    with pytest.raises(ValueError, match="Poisson mean must be > 0, got 0.0"):
        poisson_count_test([1, 2], 0.0)
