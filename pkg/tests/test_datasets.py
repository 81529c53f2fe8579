import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cardlab import datasets as ds


def test_moons_zero_noise_endpoints():
    s = ds.make_moons(2, noise_sd=0.0, seed=5)
    np.testing.assert_allclose(s.y[0], [1.0, 0.0], atol=1e-15)
    np.testing.assert_allclose(s.y[1], [0.0, 0.5], atol=1e-15)
    assert list(s.x) == [0, 1]


def test_moons_seeded_bitwise():
    a = ds.make_moons(1000, 0.05, seed=7)
    b = ds.make_moons(1000, 0.05, seed=7)
    assert a.y.tobytes() == b.y.tobytes()
    assert not np.array_equal(a.y, ds.make_moons(1000, 0.05, seed=8).y)


def test_moons_arc_mean_of_sine():
    # mean of sin over [0, pi] is 2/pi; the discrete grid adds O(1/m^2)
    s = ds.make_moons(10000, noise_sd=0.0)
    upper = s.y[s.x == 0, 1].mean()
    lower = s.y[s.x == 1, 1].mean()
    assert abs(upper - 2 / math.pi) < 1e-3
    assert abs(lower - (0.5 - 2 / math.pi)) < 1e-3


def test_circles_radii():
    s = ds.make_circles(4, noise_sd=0.0, inner_factor=0.5)
    r = np.hypot(*s.y.T)
    np.testing.assert_allclose(r[s.x == 0], 1.0, atol=1e-12)
    np.testing.assert_allclose(r[s.x == 1], 0.5, atol=1e-12)


def test_circles_jittered_radius_mean():
    # E|c + e| for isotropic jitter e of scale sd is r + sd^2/(2r) to leading order
    sd = 0.02
    s = ds.make_circles(20000, noise_sd=sd, seed=1)
    for label, radius in [(0, 1.0), (1, 0.5)]:
        r = np.hypot(*s.y[s.x == label].T)
        expect = radius + sd ** 2 / (2 * radius)
        assert abs(r.mean() - expect) < 3 * sd / math.sqrt(len(r))


def test_circles_rejects_bad_factor():
    for bad in (0.0, 1.0, -0.2, 1.5):
        with pytest.raises(ValueError):
            ds.make_circles(10, inner_factor=bad)


def test_gaussian_moments():
    n = 50000
    s = ds.make_gaussian(n, seed=3)
    assert np.all(np.abs(s.y.mean(axis=0)) < 3 * math.sqrt(0.1 / n))
    cov = np.cov(s.y.T)
    # var of the sample variance is 2 sigma^4 / n; off-diagonal has sigma^4 / n
    np.testing.assert_array_less(np.abs(np.diag(cov) - 0.1), 3 * math.sqrt(2 * 0.01 / n))
    assert abs(cov[0, 1]) < 3 * math.sqrt(0.01 / n)
    one = ds.make_gaussian(1)
    assert one.y.shape == (1, 2) and np.all(np.isfinite(one.y)) and one.x[0] == 0


def test_mixture_component_means_and_frequencies():
    n = 40000
    s = ds.make_gaussian_mixture(n, seed=2)
    for k, center in enumerate(ds.MIXTURE_CENTERS):
        rows = s.y[s.x == k]
        assert np.all(np.abs(rows.mean(axis=0) - center) < 3 * math.sqrt(0.01 / len(rows)))
        assert abs(len(rows) / n - 0.25) < 3 * math.sqrt(0.25 * 0.75 / n)


def test_mixture_round_robin():
    s = ds.make_gaussian_mixture(4, seed=0, components=np.arange(4))
    quadrants = {(int(np.sign(a)), int(np.sign(b))) for a, b in s.y}
    assert quadrants == {(1, 1), (-1, 1), (-1, -1), (1, -1)}


@given(kind=st.sampled_from(list(ds.Kind)), n=st.integers(1, 300),
       seed=st.integers(0, 2**32), noise=st.floats(0.0, 0.3))
def test_generator_invariants(kind, n, seed, noise):
    spec = ds.DatasetSpec(kind, n, noise, seed)
    s = ds.generate(spec)
    assert len(s) == n and s.n_classes == ds.N_CLASSES[kind]
    assert np.all(np.isfinite(s.y))
    assert s.x.min() >= 0 and s.x.max() < s.n_classes
    if kind in (ds.Kind.MOONS, ds.Kind.CIRCLES):
        counts = np.bincount(s.x, minlength=2)
        assert abs(counts[0] - counts[1]) <= 1
    assert ds.generate(spec).y.tobytes() == s.y.tobytes()


@given(n=st.integers(1, 200), factor=st.floats(0.05, 0.95))
def test_zero_noise_geometry(n, factor):
    m = ds.make_moons(n, noise_sd=0.0)
    up, lo = m.y[m.x == 0], m.y[m.x == 1]
    assert np.all(np.abs(np.hypot(*up.T) - 1) <= 1e-12)
    assert np.all(np.abs(np.hypot(lo[:, 0] - 1, lo[:, 1] - 0.5) - 1) <= 1e-12)
    c = ds.make_circles(n, noise_sd=0.0, inner_factor=factor)
    r = np.hypot(*c.y.T)
    assert np.all(np.abs(r[c.x == 0] - 1) <= 1e-12)
    assert np.all(np.abs(r[c.x == 1] - factor) <= 1e-12)


def test_csv_round_trip(tmp_path):
    s = ds.make_gaussian_mixture(50, seed=9)
    path = tmp_path / "d.csv"
    ds.write_csv(s, path, comment="hash abc")
    text = path.read_text().splitlines()
    assert text[0] == "# hash abc" and text[1] == "y1,y2,x"
    back = ds.read_csv(path, n_classes=4)
    assert back.y.tobytes() == s.y.tobytes()
    assert np.array_equal(back.x, s.x)


def test_spec_validation():
    with pytest.raises(ValueError):
        ds.DatasetSpec("moons", 0)
    with pytest.raises(ValueError):
        ds.DatasetSpec("moons", 5, noise_sd=-1)
    with pytest.raises(ValueError):
        ds.DatasetSpec("spirals", 5)
