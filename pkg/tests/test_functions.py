"""Target-function families: parameter ranges, formulas, advection."""

import numpy as np
import pytest

from meshrl.functions import (ADVECTION_FAMILIES, FAMILIES, sample_bumps,
                              sample_circles, sample_steps, sample_steps2,
                              sample_target)


def many(sampler, mode, n=80, seed=0):
    rng = np.random.default_rng(seed)
    return [sampler(rng, mode) for _ in range(n)]


def test_bump_parameter_ranges():
    for t in many(sample_bumps, "static"):
        p = t.params
        assert 1 <= len(p["cx"]) <= 6
        assert all(0.2 <= c <= 0.9 for c in p["cx"] + p["cy"])
        assert all(0.05 <= w <= 0.2 for w in p["w"])
    for t in many(sample_bumps, "advection"):
        p = t.params
        assert 1 <= len(p["cx"]) <= 4
        assert all(0.3 <= c <= 0.7 for c in p["cx"] + p["cy"])
        assert all(0.005 <= w <= 0.05 for w in p["w"])


def test_circle_parameter_ranges():
    for t in many(sample_circles, "static"):
        p = t.params
        assert 1 <= len(p["cx"]) <= 6
        assert all(0.2 <= c <= 0.8 for c in p["cx"] + p["cy"])
        assert all(0.05 <= r <= 0.2 for r in p["r"])
        assert all(0.1 <= w <= 1.0 for w in p["w"])
    for t in many(sample_circles, "advection"):
        p = t.params
        assert all(0.03 <= w <= 0.05 for w in p["w"])


def test_bump_formula():
    rng = np.random.default_rng(1)
    t = sample_bumps(rng, "static")
    cx = np.array(t.params["cx"])
    cy = np.array(t.params["cy"])
    w = np.array(t.params["w"])
    x, y = 0.37, 0.62
    want = np.sum(np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / w))
    assert t(x, y) == pytest.approx(want, rel=1e-14)
    assert t(np.full((2, 3), x), np.full((2, 3), y)).shape == (2, 3)


def test_circles_peak_on_the_ring():
    rng = np.random.default_rng(2)
    t = sample_circles(rng, "static")
    cx, cy = t.params["cx"][0], t.params["cy"][0]
    r = t.params["r"][0]
    on = t(cx + r, cy)
    off = t(cx + r + 0.5, cy + 0.5)
    assert on > off


def test_steps_share_one_orientation():
    rng = np.random.default_rng(3)
    t = sample_steps(rng, "static")
    assert np.isscalar(t.params["theta"])
    o = np.array(t.params["o"])
    tn = np.tan(t.params["theta"])
    x, y = 0.4, 0.3
    want = np.sum(1.0 + np.tanh(100.0 * (o - (x + y * tn))))
    assert t(x, y) == pytest.approx(want, rel=1e-14)
    # far on the small side of every front the field saturates at 2n
    assert t(-5.0, 0.0) == pytest.approx(2.0 * len(o), abs=1e-6)


def test_steps2_rotation_flag():
    """Default keeps the duplicated-cosine coordinate; the flag restores a
    genuine rotation (sin on the y factor)."""
    rng = np.random.default_rng(4)
    t0 = sample_steps2(rng, "static")
    assert t0.params["rotation_fix"] is False
    o = np.array(t0.params["o"])
    th = np.array(t0.params["theta"])
    x, y = 0.81, 0.27
    s = (x - 0.5) * np.cos(th) - (y - 0.5) * np.cos(th)
    want = 0.5 * np.sum(1.0 + np.tanh(100.0 * (s - o)))
    assert t0(x, y) == pytest.approx(want, rel=1e-13)

    rng = np.random.default_rng(4)
    t1 = sample_steps2(rng, "static", rotation_fix=True)
    s = (x - 0.5) * np.cos(th) - (y - 0.5) * np.sin(th)
    want = 0.5 * np.sum(1.0 + np.tanh(100.0 * (s - o)))
    assert t1(x, y) == pytest.approx(want, rel=1e-13)
    assert t1.params["o"] == t0.params["o"]  # same draws either way


def test_steps_families_are_static_only():
    rng = np.random.default_rng(5)
    with pytest.raises(ValueError):
        sample_steps(rng, "advection")
    with pytest.raises(ValueError):
        sample_target("steps2", rng, "advection")
    assert set(ADVECTION_FAMILIES) == {"bumps", "circles"}
    assert set(FAMILIES) == {"bumps", "circles", "steps", "steps2"}


def test_sampling_is_deterministic():
    a = sample_target("circles", np.random.default_rng(77), "advection")
    b = sample_target("circles", np.random.default_rng(77), "advection")
    assert a.params == b.params
    x = np.linspace(0, 1, 11)
    assert (a(x, x[::-1]) == b(x, x[::-1])).all()


def test_advected_shifts_periodically():
    rng = np.random.default_rng(6)
    t = sample_bumps(rng, "advection")
    moved = t.advected((1.0, 0.0), 0.3)
    x = np.linspace(0, 1, 31, endpoint=False)
    y = np.full_like(x, 0.5)
    assert np.allclose(moved(x, y), t(np.mod(x - 0.3, 1.0), y), atol=1e-15)
    # a full period returns home (on [0, 1); x = 1 wraps to 0 by convention)
    assert np.allclose(t.advected((1.0, 0.0), 1.0)(x, y), t(x, y), atol=1e-12)
    assert moved.params["advected_by"] == [0.3, 0.0]


def test_unknown_family_rejected():
    with pytest.raises(ValueError):
        sample_target("swirls", np.random.default_rng(0))
