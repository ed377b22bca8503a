"""Alpha compositing along rays and the color / depth / total losses."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DomainError


@dataclass
class RaySampleBatch:
    """Per-ray sample arrays: ``t``, ``deltas``, ``sigma`` are ``(R, S)``, ``color`` is ``(R, S, 3)``."""

    t: np.ndarray
    deltas: np.ndarray
    sigma: np.ndarray
    color: np.ndarray


@dataclass
class RenderResult:
    color: np.ndarray     # (R, 3)
    depth: np.ndarray     # (R,)
    opacity: np.ndarray   # (R,)
    weights: np.ndarray   # (R, S)
    transmittance: np.ndarray  # (R, S + 1); column i is T before sample i
    background: float = 0.0


def sample_deltas(t: np.ndarray, t_far=None, last_delta: float | None = None) -> np.ndarray:
    """Gaps between consecutive samples.

    The last gap runs to ``t_far`` by default, or is the fixed ``last_delta`` when given.
    """
    t = np.asarray(t, dtype=np.float64)
    d = np.empty_like(t)
    d[:, :-1] = np.diff(t, axis=1)
    if last_delta is not None:
        d[:, -1] = last_delta
    elif t_far is not None:
        d[:, -1] = np.maximum(np.asarray(t_far, dtype=np.float64) - t[:, -1], 0.0)
    else:
        raise DomainError("need t_far or last_delta to close the final interval")
    return d


def composite(batch: RaySampleBatch, white_background: bool = False) -> RenderResult:
    sigma = np.asarray(batch.sigma)
    tau = sigma * batch.deltas
    alpha = -np.expm1(-tau)
    # T_0 = 1, T_{i+1} = T_i (1 - alpha_i)
    trans = np.ones((sigma.shape[0], sigma.shape[1] + 1), dtype=sigma.dtype)
    np.cumprod(1.0 - alpha, axis=1, out=trans[:, 1:])
    weights = trans[:, :-1] * alpha
    opacity = weights.sum(axis=1)
    color = np.einsum("rs,rsc->rc", weights, batch.color)
    bg = 1.0 if white_background else 0.0
    if white_background:
        color = color + (1.0 - opacity)[:, None] * bg
    depth = (weights * batch.t).sum(axis=1)
    return RenderResult(color, depth, opacity, weights, trans, bg)


def composite_backward(batch: RaySampleBatch, result: RenderResult, grad_color=None,
                       grad_depth=None, grad_opacity=None):
    """Grads of a scalar loss w.r.t. per-sample ``sigma`` and ``color``.

    For any output of the form ``sum_i w_i v_i``:
    ``d/d sigma_k = delta_k * (T_{k+1} v_k - sum_{i>k} w_i v_i)``.
    """
    R, S = batch.sigma.shape
    dtype = result.weights.dtype
    s = np.zeros((R, S), dtype=dtype)
    g_rgb = np.zeros((R, S, 3), dtype=dtype)
    if grad_color is not None:
        grad_color = np.asarray(grad_color, dtype=dtype)
        # background term bg*(1 - sum w) folds into v_i = c_i - bg
        s += np.einsum("rsc,rc->rs", batch.color - result.background, grad_color)
        g_rgb = result.weights[:, :, None] * grad_color[:, None, :]
    if grad_depth is not None:
        s += batch.t * np.asarray(grad_depth, dtype=dtype)[:, None]
    if grad_opacity is not None:
        s += np.asarray(grad_opacity, dtype=dtype)[:, None]
    ws = result.weights * s
    # sum over i > k, via reversed cumulative sum
    tail = np.cumsum(ws[:, ::-1], axis=1)[:, ::-1] - ws
    g_sigma = batch.deltas * (result.transmittance[:, 1:] * s - tail)
    return g_sigma, g_rgb


def color_loss(rendered: np.ndarray, target: np.ndarray):
    """Mean over rays of squared L2 color error, and its grad w.r.t. ``rendered``."""
    rendered = np.asarray(rendered)
    target = np.asarray(target)
    if rendered.shape != target.shape:
        raise DomainError(f"shape mismatch {rendered.shape} vs {target.shape}")
    n = rendered.shape[0]
    if n == 0:
        raise DomainError("empty ray batch")
    diff = rendered - target
    loss = float(np.sum(diff * diff) / n)
    return loss, 2.0 * diff / n


@dataclass(frozen=True)
class DepthTarget:
    ray_id: int
    depth: float
    weight: float = 1.0

    def __post_init__(self):
        if not self.depth > 0:
            raise DomainError(f"target depth must be positive, got {self.depth}")


def depth_loss(depths: np.ndarray, targets):
    """Mean over supervised rays of ``weight * (D_hat - D)^2``.

    ``depths`` holds the rendered depth of every ray in the batch; rays that
    have no target receive zero gradient. Returns ``(loss, grad)`` with grad
    shaped like ``depths``.
    """
    depths = np.asarray(depths)
    grad = np.zeros_like(depths)
    targets = list(targets)
    if not targets:
        return 0.0, grad
    ids = np.array([t.ray_id for t in targets], dtype=np.int64)
    if ids.min() < 0 or ids.max() >= depths.shape[0]:
        raise DomainError("depth target refers to a ray that is not in the batch")
    want = np.array([t.depth for t in targets], dtype=np.float64)
    wts = np.array([t.weight for t in targets], dtype=np.float64)
    diff = depths[ids] - want
    n = len(targets)
    loss = float(np.sum(wts * diff * diff) / n)
    np.add.at(grad, ids, 2.0 * wts * diff / n)
    return loss, grad


def total_loss(l_color: float, l_depth: float, weight: float) -> float:
    if weight < 0:
        raise ConfigError(f"depth weight must be >= 0, got {weight}")
    return l_color + weight * l_depth
