from itertools import product

import numpy as np
import pytest
from pydantic import ValidationError

from confspace.domain import TorusDomain, Window, displacement, distance, wrap


@pytest.mark.parametrize("d, L", product([1, 2, 3], [1.0, 4.0, 10.0]))
def test_displacement_is_minimal_image(d: int, L: float):
    dom = TorusDomain(d=d, L=L)
    rng = np.random.default_rng(3)
    x = L * rng.random((200, d))
    y = L * rng.random((200, d))
    v = displacement(x, y, dom)
    assert np.all(v >= -0.5 * L) and np.all(v < 0.5 * L)
    np.testing.assert_allclose(wrap(y + v, dom), x, atol=1e-12 * L)
    assert np.all(distance(x, y, dom) <= dom.max_distance + 1e-12)


def test_distance_across_the_boundary():
    dom = TorusDomain(d=2, L=4.0)
    assert distance([0.1, 2.0], [3.9, 2.0], dom) == pytest.approx(0.2)
    assert distance([0.0, 0.0], [2.0, 2.0], dom) == pytest.approx(2.0 * np.sqrt(2.0))


def test_displacement_tie_goes_negative():
    dom = TorusDomain(d=1, L=4.0)
    assert displacement([2.0], [0.0], dom)[0] == -2.0


def test_wrap_rejects_non_finite():
    dom = TorusDomain(d=1, L=1.0)
    with pytest.raises(ValueError, match="cannot wrap non-finite coordinates"):
        wrap([np.inf], dom)


def test_wrap_tiny_negative_stays_in_box():
    dom = TorusDomain(d=1, L=10.0)
    out = wrap([-1e-18], dom)
    assert 0.0 <= out[0] < 10.0


def test_window_membership_is_half_open():
    window = Window(lower=(1.0, 1.0), upper=(2.0, 3.0))
    mask = window.contains(np.array([[1.0, 1.0], [2.0, 1.5], [1.5, 2.999], [0.999, 2.0]]))
    assert mask.tolist() == [True, False, True, False]
    assert window.volume == pytest.approx(2.0)


def test_window_validation():
    with pytest.raises(ValidationError, match="invalid window interval"):
        Window(lower=(2.0,), upper=(1.0,))
    with pytest.raises(ValidationError, match="same dimension"):
        Window(lower=(0.0,), upper=(1.0, 1.0))
    with pytest.raises(ValueError, match="exceeds box side"):
        Window(lower=(0.0,), upper=(5.0,)).check(TorusDomain(d=1, L=4.0))


def test_whole_window_and_intersection():
    dom = TorusDomain(d=2, L=5.0)
    whole = Window.whole(dom)
    assert whole.is_whole(dom)
    assert whole.volume == pytest.approx(25.0)
    part = Window(lower=(1.0, 1.0), upper=(3.0, 3.0))
    assert not part.is_whole(dom)
    assert whole.intersect(part) == part
    assert part.intersect(Window(lower=(3.0, 0.0), upper=(4.0, 1.0))) is None


def test_uniform_points_fall_in_window():
    window = Window(lower=(1.0, 2.0), upper=(1.5, 4.0))
    points = window.uniform(np.random.default_rng(0), 1000)
    assert points.shape == (1000, 2)
    assert np.all(window.contains(points))


def test_domain_validation():
    with pytest.raises(ValidationError):
        TorusDomain(d=0, L=1.0)
    with pytest.raises(ValidationError):
        TorusDomain(d=2, L=float("inf"))
