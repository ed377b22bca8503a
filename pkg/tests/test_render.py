import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from gradcases import case_composite, case_losses
from lcnerf.encodings import HashGridConfig
from lcnerf.errors import ConfigError, DomainError
from lcnerf.fields import HashField, HashFieldConfig
from lcnerf.render import (DepthTarget, RaySampleBatch, color_loss, composite,
                           composite_backward, depth_loss, sample_deltas, total_loss)

C = np.array([0.3, 0.5, 0.7])


def homogeneous(n, sigma=1.0, far=2.0):
    """Midpoint samples on [0, far], each owning its whole bin."""
    t = (np.arange(n) + 0.5)[None, :] * far / n
    deltas = np.full_like(t, far / n)
    return RaySampleBatch(t, deltas, np.full((1, n), sigma), np.tile(C, (1, n, 1)))


def _quadrature(n=100_000, far=2.0):
    """Continuous integrals of T*sigma*c and T*sigma*t by a fine midpoint rule."""
    dt = far / n
    t = (np.arange(n) + 0.5) * dt
    trans = np.exp(-t)
    return (trans * dt).sum() * C, (trans * t * dt).sum()


def test_opaque_single_sample():
    b = RaySampleBatch(np.array([[2.0]]), np.array([[1.0]]), np.array([[1e6]]),
                       np.array([[[1.0, 0.0, 0.0]]]))
    r = composite(b)
    np.testing.assert_allclose(r.color, [[1, 0, 0]])
    assert r.depth[0] == pytest.approx(2.0) and r.opacity[0] == pytest.approx(1.0)


def test_empty_ray():
    t = np.linspace(1, 3, 8)[None, :]
    b = RaySampleBatch(t, np.full_like(t, 0.25), np.zeros_like(t), np.random.rand(1, 8, 3))
    r = composite(b)
    assert not r.color.any() and r.opacity[0] == 0 and r.depth[0] == 0
    np.testing.assert_array_equal(composite(b, white_background=True).color, [[1, 1, 1]])


def test_quadrature_oracle_agrees_with_closed_form():
    rgb, depth = _quadrature()
    np.testing.assert_allclose(rgb, C * (1 - math.exp(-2)), atol=1e-8)
    assert depth == pytest.approx(1 - 3 * math.exp(-2), abs=1e-8)


def test_homogeneous_medium():
    rgb, depth = _quadrature()
    r = composite(homogeneous(256))
    assert np.abs(r.color[0] - rgb).max() <= 1e-3
    assert abs(r.depth[0] - depth) <= 1e-2


def test_homogeneous_via_far_bound_last_delta():
    r = composite(_far_bound_batch(256))
    assert np.abs(r.color[0] - C * (1 - math.exp(-2))).max() <= 1e-3


def _far_bound_batch(n, far=2.0):
    t = ((np.arange(n) + 0.5) * far / n)[None, :]
    d = sample_deltas(t, t_far=np.array([far]))
    return RaySampleBatch(t, d, np.ones_like(t), np.tile(C, (1, n, 1)))


def test_error_shrinks_with_sample_count():
    rgb, depth = _quadrature()
    counts = (16, 32, 64, 128, 256)
    color_err = [np.abs(composite(_far_bound_batch(n)).color[0] - rgb).max() for n in counts]
    depth_err = [abs(composite(homogeneous(n)).depth[0] - depth) for n in counts]
    assert all(a > b for a, b in zip(color_err, color_err[1:]))
    assert all(a > b for a, b in zip(depth_err, depth_err[1:]))
    # whole-bin intervals integrate a constant medium's color exactly
    assert np.abs(composite(homogeneous(16)).color[0] - rgb).max() < 1e-9


def test_sample_deltas():
    t = np.array([[1.0, 1.5, 2.5]])
    np.testing.assert_allclose(sample_deltas(t, t_far=np.array([3.0])), [[0.5, 1.0, 0.5]])
    np.testing.assert_allclose(sample_deltas(t, last_delta=0.1), [[0.5, 1.0, 0.1]])
    with pytest.raises(DomainError):
        sample_deltas(t)


ray_batch = st.integers(1, 12).flatmap(lambda s: st.tuples(
    arrays(np.float64, (3, s), elements=st.floats(0, 50)),
    arrays(np.float64, (3, s), elements=st.floats(0.001, 2)),
))


@given(ray_batch)
def test_weights_bounded(b):
    sigma, deltas = b
    t = np.cumsum(deltas, axis=1)
    r = composite(RaySampleBatch(t, deltas, sigma, np.full(sigma.shape + (3,), 0.5)))
    assert np.all(r.weights >= 0)
    assert np.all(r.opacity <= 1 + 1e-6)
    np.testing.assert_allclose(r.weights.sum(axis=1), r.opacity)


@given(ray_batch)
def test_transmittance_telescopes(b):
    sigma, deltas = b
    t = np.cumsum(deltas, axis=1)
    r = composite(RaySampleBatch(t, deltas, sigma, np.zeros(sigma.shape + (3,))))
    alpha = 1 - np.exp(-sigma * deltas)
    np.testing.assert_allclose(r.transmittance[:, 1:], r.transmittance[:, :-1] * (1 - alpha),
                               rtol=1e-12, atol=1e-300)
    assert np.all(r.transmittance[:, 0] == 1.0)


def test_composite_gradient_check():
    worst, probes = case_composite()
    assert probes >= 50 and worst <= 1e-4


def test_color_loss_examples():
    c = np.random.default_rng(0).random((4, 3))
    assert color_loss(c, c)[0] == 0.0
    loss, g = color_loss(np.array([[1.0, 0, 0]]), np.zeros((1, 3)))
    assert loss == 1.0
    np.testing.assert_array_equal(g, [[2.0, 0, 0]])
    with pytest.raises(DomainError):
        color_loss(np.zeros((0, 3)), np.zeros((0, 3)))
    with pytest.raises(DomainError):
        color_loss(np.zeros((2, 3)), np.zeros((3, 3)))


def test_color_loss_matches_naive_loop():
    rng = np.random.default_rng(1)
    pred, gt = rng.random((16, 3)), rng.random((16, 3))
    total = 0.0
    for i in range(16):
        for k in range(3):
            total += (pred[i, k] - gt[i, k]) ** 2
    assert abs(color_loss(pred, gt)[0] - total / 16) <= 1e-12


def test_depth_loss_examples():
    d = np.array([1.0, 2.0, 3.0])
    assert depth_loss(d, [DepthTarget(i, float(v)) for i, v in enumerate(d)])[0] == 0.0
    assert depth_loss(np.array([2.5]), [DepthTarget(0, 2.0)])[0] == pytest.approx(0.25)
    depths = np.random.default_rng(0).uniform(1, 3, 100)
    _, g = depth_loss(depths, [DepthTarget(i, 2.0) for i in (3, 50, 97)])
    assert set(np.flatnonzero(g)) == {3, 50, 97}
    with pytest.raises(DomainError):
        depth_loss(depths, [DepthTarget(100, 1.0)])
    with pytest.raises(DomainError):
        DepthTarget(0, 0.0)
    assert depth_loss(depths, [])[0] == 0.0


def test_loss_gradient_check():
    worst, probes = case_losses()
    assert probes >= 50 and worst <= 1e-4


def test_total_loss():
    assert total_loss(0.2, 0.1, 0.1) == pytest.approx(0.21)
    assert total_loss(0.37, 123.0, 0.0) == 0.37
    with pytest.raises(ConfigError):
        total_loss(0.1, 0.1, -0.5)


def test_total_loss_gradient_is_sum_of_parts():
    rng = np.random.default_rng(0)
    fld = HashField(HashFieldConfig(grid=HashGridConfig(levels=4, table_size=2 ** 10, n_min=4,
                                                        n_max=32)), rng=0)
    for p in fld.grid.params:
        p.values[...] = rng.uniform(-1, 1, p.shape)
    n_rays, n_s = 20, 8
    o = np.column_stack([rng.uniform(-0.5, 0.5, (n_rays, 2)), np.full(n_rays, -2.0)])
    t = np.linspace(1.2, 2.8, n_s)[None, :].repeat(n_rays, 0)
    deltas = np.full_like(t, 0.2)
    pts = (o[:, None, :] + t[..., None] * np.array([0, 0, 1.0])).reshape(-1, 3)
    dirs = np.tile([0, 0, 1.0], (n_rays * n_s, 1))
    gt = rng.random((n_rays, 3))
    targets = [DepthTarget(i, 2.0) for i in range(0, n_rays, 3)]

    def grads(wc, wd):
        fld.zero_grad()
        s, c = fld.forward(pts, dirs)
        b = RaySampleBatch(t, deltas, s.reshape(n_rays, n_s), c.reshape(n_rays, n_s, 3))
        r = composite(b)
        _, gc = color_loss(r.color, gt)
        _, gd = depth_loss(r.depth, targets)
        gs, grgb = composite_backward(b, r, wc * gc, wd * gd)
        fld.backward(gs.ravel(), grgb.reshape(-1, 3))
        return np.concatenate([p.grad.ravel() for p in fld.grid.params])

    both = grads(1.0, 0.1)
    parts = grads(1.0, 0.0) + 0.1 * grads(0.0, 1.0)
    np.testing.assert_allclose(both, parts, rtol=1e-9, atol=1e-15)
