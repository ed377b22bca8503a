"""Trainable multiresolution hash grid and a fixed sinusoidal encoding."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ParamTensor
from .errors import ConfigError, DomainError, StateError

HASH_PRIMES = (1, 2654435761, 805459861)

@dataclass(frozen=True)
class HashGridConfig:
    levels: int = 16
    table_size: int = 2 ** 19
    features: int = 2
    n_min: int = 16
    n_max: int = 512

    def __post_init__(self):
        t = self.table_size
        if t < 1 or t & (t - 1):
            raise ConfigError(f"hash table size must be a power of two, got {t}")
        if self.levels < 1 or self.features < 1:
            raise ConfigError("levels and features must be positive")
        if not 1 <= self.n_min <= self.n_max:
            raise ConfigError(f"need 1 <= n_min <= n_max, got {self.n_min}, {self.n_max}")

    @property
    def growth(self) -> float:
        if self.levels == 1:
            return 1.0
        return float(np.exp((np.log(self.n_max) - np.log(self.n_min)) / (self.levels - 1)))

    def resolutions(self) -> np.ndarray:
        b = self.growth
        return np.array([int(np.floor(self.n_min * b ** l + 1e-9)) for l in range(self.levels)],
                        dtype=np.int64)

    @property
    def out_width(self) -> int:
        return self.levels * self.features


def hash_index(resolution: int, corner, table_size: int) -> int:
    """Table row for an integer grid corner at one level."""
    x, y, z = (int(c) for c in corner)
    side = resolution + 1
    if side ** 3 <= table_size:
        return x + side * (y + side * z)
    h = (x * HASH_PRIMES[0]) ^ (y * HASH_PRIMES[1]) ^ (z * HASH_PRIMES[2])
    return h % table_size


def _outer8(x: np.ndarray, y: np.ndarray, z: np.ndarray, combine) -> np.ndarray:
    """Combine per-axis pairs ``(..., 2, P)`` into the 8 corners ``(..., 8, P)``.

    Corner ``c`` takes the upper value on axis ``i`` when bit ``i`` of ``c`` is set.
    The point axis stays innermost so numpy's inner loops are long.
    """
    zy = combine(z[..., :, None, :], y[..., None, :, :])
    out = combine(zy[..., :, :, None, :], x[..., None, None, :, :])
    return out.reshape(out.shape[:-4] + (8, out.shape[-1]))


def _corner_rows(cell: np.ndarray, resolutions: np.ndarray, table_size: int) -> np.ndarray:
    """Vectorized :func:`hash_index`: axis-first cells ``(3, L, P)`` -> rows ``(L, 8, P)``.

    Rows come back as int32 (tables never exceed 2^31 rows in total). The
    mask is applied per axis before combining, which is exact because
    ``(a ^ b ^ c) & m == (a & m) ^ (b & m) ^ (c & m)`` for ``m = T - 1``.
    """
    side = resolutions + 1
    direct = side ** 3 <= table_size
    coef = np.where(direct[:, None], np.stack([np.ones_like(side), side, side * side], 1),
                    np.array(HASH_PRIMES, dtype=np.int64)[None, :])
    # all-ones mask leaves dense levels untouched
    mask = np.where(direct, -1, table_size - 1)[:, None, None]
    ends = []
    for axis in range(3):
        c = cell[axis][:, None, :]
        pair = np.concatenate([c, c + 1], axis=1) * coef[:, axis, None, None]
        ends.append((pair & mask).astype(np.int32))
    rows = np.empty((cell.shape[1], 8, cell.shape[2]), dtype=np.int32)
    for l in range(len(resolutions)):
        op = np.add if direct[l] else np.bitwise_xor
        rows[l] = _outer8(ends[0][l], ends[1][l], ends[2][l], op)
    return rows


def _weight_pairs(frac: np.ndarray) -> list[np.ndarray]:
    """Per-axis ``(1 - f, f)`` pairs ``(..., 2, P)`` from axis-first fractions ``(3, ..., P)``."""
    return [np.stack([1.0 - frac[i], frac[i]], axis=-2) for i in range(3)]


def trilinear_weights(frac: np.ndarray) -> np.ndarray:
    """Weights of the 8 cell corners for fractional offsets ``(P, 3)`` -> ``(P, 8)``."""
    frac = np.asarray(frac)
    return _outer8(*_weight_pairs(frac.T), np.multiply).T


class HashGrid:
    """Per-level feature tables, interpolated trilinearly and concatenated coarse to fine.

    The level tables are views into one ``(L, T, F)`` buffer so lookups for
    all levels happen in a single gather.
    """

    def __init__(self, cfg: HashGridConfig, rng=None, dtype=np.float64, init_scale=1e-4,
                 prefix: str = "hash"):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(rng)
        self.resolutions = cfg.resolutions()
        shape = (cfg.levels, cfg.table_size, cfg.features)
        self._values = rng.uniform(-init_scale, init_scale, size=shape).astype(self.dtype)
        self._grad = np.zeros(shape, dtype=self.dtype)
        self.tables = [
            ParamTensor(f"{prefix}.level{l}", self._values[l], self._grad[l], group="table")
            for l in range(cfg.levels)
        ]
        self._cache = None

    @property
    def params(self) -> list[ParamTensor]:
        return self.tables

    @property
    def out_width(self) -> int:
        return self.cfg.out_width

    def _lookup(self, x: np.ndarray):
        """Table rows and weights in the internal ``(L, 8, P)`` layout."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != 3:
            raise DomainError(f"expected (P, 3) positions, got {x.shape}")
        if x.size and (x.min() < 0.0 or x.max() > 1.0):
            raise DomainError("hash grid positions must lie in [0, 1]^3")
        res = self.resolutions
        pos = x.T[:, None, :] * res[None, :, None]  # (3, L, P)
        # positions are non-negative, so truncation is floor
        cell = np.minimum(pos.astype(np.int64), (res - 1)[None, :, None])
        frac = (pos - cell).astype(self.dtype)
        rows = _corner_rows(cell, res, self.cfg.table_size)
        rows += (np.arange(self.cfg.levels, dtype=np.int32) * self.cfg.table_size)[:, None, None]
        return rows, _outer8(*_weight_pairs(frac), np.multiply)

    def lookup(self, x: np.ndarray):
        """Global table rows and trilinear weights, both ``(P, L, 8)``, for points in [0,1]^3."""
        rows, w = self._lookup(x)
        return rows.transpose(2, 0, 1), w.transpose(2, 0, 1)

    def forward(self, x: np.ndarray) -> np.ndarray:
        rows, w = self._lookup(x)
        out = np.empty((rows.shape[2], self.cfg.levels, self.cfg.features), dtype=self.dtype)
        # one contiguous gather per feature channel is much faster than a (P, L, 8, F) gather
        for f in range(self.cfg.features):
            column = np.ascontiguousarray(self._values[..., f]).ravel()
            out[..., f] = (w * column.take(rows)).sum(axis=1).T
        self._cache = (rows, w)
        return out.reshape(x.shape[0], -1)

    __call__ = forward

    def backward(self, grad_out: np.ndarray) -> None:
        """Scatter output grads into the tables (fixed-order bincount, deterministic)."""
        if self._cache is None:
            raise StateError("backward called before forward")
        rows, w = self._cache
        n_rows = self.cfg.levels * self.cfg.table_size
        g = np.asarray(grad_out).reshape(rows.shape[2], self.cfg.levels, self.cfg.features)
        flat_rows = rows.ravel()
        for f in range(self.cfg.features):
            g_lp = np.ascontiguousarray(g[:, :, f].T, dtype=w.dtype)
            total = np.bincount(flat_rows, weights=(w * g_lp[:, None, :]).ravel(),
                                minlength=n_rows)
            self._grad[..., f] += total.reshape(self._grad.shape[:2]).astype(self.dtype)


@dataclass(frozen=True)
class FreqEncodingConfig:
    freqs: int = 2
    include_input: bool = True

    def __post_init__(self):
        if self.freqs < 0:
            raise ConfigError("frequency count must be >= 0")

    def out_width(self, in_width: int = 3) -> int:
        return in_width * (2 * self.freqs + int(self.include_input))


def freq_encode(cfg: FreqEncodingConfig, v: np.ndarray) -> np.ndarray:
    """``[v, sin(2^0 pi v_c), cos(2^0 pi v_c), ..., cos(2^(K-1) pi v_c)]`` for each component c.

    Accepts a single vector or a ``(P, D)`` batch.
    """
    v = np.asarray(v)
    single = v.ndim == 1
    v2 = v[None, :] if single else v
    parts = [v2] if cfg.include_input else []
    if cfg.freqs:
        ang = v2[:, :, None] * (np.pi * 2.0 ** np.arange(cfg.freqs))  # (P, D, K)
        sc = np.stack([np.sin(ang), np.cos(ang)], axis=-1)  # (P, D, K, 2)
        parts.append(sc.reshape(v2.shape[0], -1))
    out = np.concatenate(parts, axis=1) if parts else np.zeros((v2.shape[0], 0))
    return out[0] if single else out
