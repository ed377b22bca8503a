import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from gradcases import case_hash_encoding
from lcnerf.encodings import (FreqEncodingConfig, HashGrid, HashGridConfig, freq_encode,
                              hash_index, trilinear_weights)
from lcnerf.errors import ConfigError, DomainError, StateError


def test_hash_index_examples():
    assert hash_index(512, (0, 0, 0), 2 ** 19) == 0
    assert hash_index(512, (5, 0, 0), 2 ** 19) == 5
    # 2654435761 = 5062 * 524288 + 489905
    assert 5062 * 524288 + 489905 == 2654435761
    assert hash_index(512, (0, 1, 0), 2 ** 19) == 489905


def test_hash_index_direct_is_row_major():
    assert hash_index(4, (1, 2, 3), 2 ** 10) == 1 + 5 * (2 + 5 * 3)


def test_direct_indices_exhaustively_distinct():
    n, t = 4, 2 ** 10
    rows = {hash_index(n, c, t) for c in itertools.product(range(n + 1), repeat=3)}
    assert len(rows) == (n + 1) ** 3
    assert max(rows) < t


@given(st.integers(1, 600), st.tuples(*[st.floats(0, 1)] * 3), st.integers(4, 20))
def test_hash_index_in_range(res, rel, log_t):
    corner = [round(r * res) for r in rel]
    assert 0 <= hash_index(res, corner, 2 ** log_t) < 2 ** log_t


def test_config_validation():
    with pytest.raises(ConfigError):
        HashGridConfig(table_size=1000)
    with pytest.raises(ConfigError):
        HashGridConfig(n_min=64, n_max=16)
    with pytest.raises(ConfigError):
        FreqEncodingConfig(freqs=-1)


def test_resolutions_geometric_and_monotone():
    cfg = HashGridConfig()
    res = cfg.resolutions()
    assert res[0] == 16 and res[-1] == 512
    assert np.all(np.diff(res) >= 0)
    assert cfg.growth == pytest.approx(np.exp(np.log(32) / 15))


def _desk_grid(levels=4, seed=0, **kw):
    cfg = HashGridConfig(levels=levels, table_size=2 ** 10, features=2, n_min=4, n_max=32, **kw)
    return HashGrid(cfg, rng=seed, init_scale=1.0)


def _oracle(grid, x):
    """Explicit sum of w_c * table[corner_c] for every level, scalar code only."""
    out = []
    for l, res in enumerate(grid.resolutions):
        p = [xi * res for xi in x]
        cell = [min(int(np.floor(pi)), res - 1) for pi in p]
        f = [pi - ci for pi, ci in zip(p, cell)]
        acc = np.zeros(grid.cfg.features)
        for bits in itertools.product((0, 1), repeat=3):
            w = 1.0
            for axis in range(3):
                w *= f[axis] if bits[axis] else 1.0 - f[axis]
            corner = [cell[a] + bits[a] for a in range(3)]
            acc += w * grid.tables[l].values[hash_index(res, corner, grid.cfg.table_size)]
        out.append(acc)
    return np.concatenate(out)


def test_forward_matches_corner_oracle():
    grid = _desk_grid(levels=2, seed=4)
    grid_big = HashGrid(HashGridConfig(levels=2, table_size=2 ** 6, features=3, n_min=3, n_max=40),
                        rng=5, init_scale=1.0)
    x = np.random.default_rng(1).random((200, 3))
    for g in (grid, grid_big):
        got = g.forward(x)
        want = np.stack([_oracle(g, xi) for xi in x])
        assert np.abs(got - want).max() <= 1e-12


def test_grid_corner_returns_row():
    grid = _desk_grid()
    res = grid.resolutions[1]
    corner = np.array([2, 1, 3])
    out = grid.forward((corner / res)[None, :])
    row = grid.tables[1].values[hash_index(res, corner, grid.cfg.table_size)]
    np.testing.assert_allclose(out[0, 2:4], row, atol=1e-15)


def test_cell_centre_of_constant_corners():
    grid = _desk_grid(levels=1)
    res = grid.resolutions[0]
    rows, _ = grid.lookup(np.array([[1.5, 2.5, 0.5]]) / res)
    grid.tables[0].values[rows[0, 0] - 0] = 0.7  # rows are global; level 0 offset is 0
    out = grid.forward(np.array([[1.5, 2.5, 0.5]]) / res)
    np.testing.assert_allclose(out, [[0.7, 0.7]], atol=1e-15)


def test_trilinear_weights_sum_to_one():
    frac = np.random.default_rng(0).random((1000, 3))
    w = trilinear_weights(frac)
    assert w.shape == (1000, 8) and np.all(w >= 0)
    assert np.abs(w.sum(axis=1) - 1.0).max() <= 1e-12


@given(arrays(np.float64, 3, elements=st.floats(0, 1)))
def test_trilinear_weights_reproduce_position(f):
    w = trilinear_weights(f[None, :])[0]
    corners = np.array([[(c >> a) & 1 for a in range(3)] for c in range(8)], dtype=float)
    np.testing.assert_allclose(w @ corners, f, atol=1e-12)


def test_continuity_across_cell_faces():
    grid = _desk_grid(seed=2)
    rng = np.random.default_rng(3)
    for res in grid.resolutions:
        base = rng.random((20, 3))
        for axis in range(3):
            face = np.floor(base[:, axis] * res).clip(1, res - 1) / res
            lo, hi = base.copy(), base.copy()
            lo[:, axis] = face - 1e-9
            hi[:, axis] = face + 1e-9
            assert np.abs(grid.forward(lo) - grid.forward(hi)).max() < 1e-6


def test_domain_and_state_errors():
    grid = _desk_grid()
    with pytest.raises(DomainError):
        grid.forward(np.array([[0.5, 1.2, 0.5]]))
    with pytest.raises(DomainError):
        grid.forward(np.zeros((4, 2)))
    with pytest.raises(StateError):
        _desk_grid().backward(np.zeros((1, 8)))


def test_backward_scatters_weights():
    grid = _desk_grid(levels=1)
    x = np.array([[0.3, 0.61, 0.2]])
    grid.forward(x)
    grid.backward(np.array([[1.0, 0.0]]))
    rows, w = grid.lookup(x)
    g = grid.tables[0].grad[:, 0]
    np.testing.assert_allclose(g[rows[0, 0]], w[0, 0], atol=1e-15)
    assert g.sum() == pytest.approx(1.0, abs=1e-12)
    assert not grid.tables[0].grad[:, 1].any()


def test_backward_is_order_independent():
    x = np.random.default_rng(0).random((300, 3))
    g = np.random.default_rng(1).standard_normal((300, 8))
    a, b = _desk_grid(), _desk_grid()
    a.forward(x)
    a.backward(g)
    perm = np.random.default_rng(2).permutation(300)
    b.forward(x[perm])
    b.backward(g[perm])
    for ta, tb in zip(a.tables, b.tables):
        np.testing.assert_allclose(ta.grad, tb.grad, atol=1e-12)


def test_hash_gradient_check():
    worst, probes = case_hash_encoding()
    assert probes >= 50 and worst <= 1e-4


def test_freq_encode_examples():
    v = np.array([0.0, 0.6, 0.8])
    np.testing.assert_array_equal(freq_encode(FreqEncodingConfig(0, True), v), v)
    out = freq_encode(FreqEncodingConfig(1, False), np.array([1.0, 0.0, 0.0]))
    np.testing.assert_allclose(out, [0, -1, 0, 1, 0, 1], atol=1e-15)
    assert freq_encode(FreqEncodingConfig(4, True), v).shape == (27,)
    assert FreqEncodingConfig(4, True).out_width() == 27


@given(arrays(np.float64, (5, 3), elements=st.floats(-1, 1)), st.integers(0, 5), st.booleans())
def test_freq_encode_batch_matches_single(v, k, inc):
    cfg = FreqEncodingConfig(k, inc)
    batch = freq_encode(cfg, v)
    assert batch.shape == (5, cfg.out_width(3))
    for i in range(5):
        np.testing.assert_array_equal(batch[i], freq_encode(cfg, v[i]))
