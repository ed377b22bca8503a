"""Radiance fields: f(x, d) -> (sigma, rgb).

Two families share one contract:

* :class:`HashField` -- hash-grid encoding, a density net emitting log-space
  density plus geometric features, and a color net.
* :class:`TensoField` -- vector-matrix factorized density and appearance
  grids, with a small MLP decoding appearance features to RGB.

Both take world-space positions inside their scene box and unit directions,
and expose ``forward``/``backward`` for training and ``params`` for the
optimizer and checkpoints.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    Concat, Conv1d, Input, LayerGraphSpec, Linear, ParamTensor, ReLU, build_net,
)
from .encodings import FreqEncodingConfig, HashGrid, HashGridConfig, freq_encode
from .errors import ConfigError, DomainError, SpecError, StateError

SIGMA_MAX = 1e4
_LOG_SIGMA_MAX = float(np.log(SIGMA_MAX))

HASH_VARIANTS = ("baseline", "conv", "residual-input", "residual-alternate", "deep-color")

# Width of the concatenated color-net input in the convolutional variant.
CONV_INPUT_WIDTH = 48


@dataclass(frozen=True)
class FieldSample:
    sigma: np.ndarray
    color: np.ndarray


# -- network topologies ---------------------------------------------------------

def make_variant_spec(tag: str, enc_width: int = 32, view_width: int = 15, geo_width: int = 15,
                      conv_layout: str = "channels") -> tuple[LayerGraphSpec, LayerGraphSpec]:
    """Density and color layer graphs for one HashField variant.

    Layer widths are computed from their actual concat sources. Where that
    differs from the nominal width of the reference topology, the nominal
    width is noted beside the node. Density nets read the tags ``hash`` (and
    ``views`` for residual-input); color nets read ``geo`` and ``views``.
    The conv variant widens ``geo`` so that its color input is 48 wide.
    """
    E, V, G = enc_width, view_width, geo_width
    nb = dict(bias=False)

    if tag == "conv":
        G = CONV_INPUT_WIDTH - V
        if G < 1:
            raise SpecError(f"view width {V} leaves no room for geometry features in a 48-wide input")

    if tag in ("baseline", "conv"):
        # two 64-wide hidden layers, the usual hash-grid radiance field default
        density = [Input("hash", E), Linear(E, 64, **nb), ReLU(), Linear(64, 64, **nb), ReLU(),
                   Linear(64, 1 + G, **nb)]
    elif tag == "residual-input":
        density = [Input("hash", E), Input("views", V),
                   Linear(E, 64, source="hash", **nb), ReLU(name="d1"),
                   Concat(("views", "d1")),
                   Linear(64 + V, 1 + G, **nb)]  # nominal: Linear(79, 16) + ReLU; no ReLU on log-density
    elif tag == "residual-alternate":
        density = [Input("hash", E),
                   Linear(E, 64, **nb), ReLU(name="d1"),
                   Concat(("d1", "hash")),
                   Linear(64 + E, 1 + G, **nb)]  # nominal: Linear(79, 16)
    elif tag == "deep-color":
        density = [Input("hash", E), Linear(E, 64, **nb), ReLU(), Linear(64, 1 + G, **nb)]
    else:
        raise SpecError(f"unknown hash-field variant {tag!r}; expected one of {HASH_VARIANTS}")

    head = [Input("geo", G), Input("views", V), Concat(("views", "geo"), name="cin")]
    if tag == "baseline":
        color = head + [Linear(V + G, 64, **nb), ReLU(), Linear(64, 64, **nb), ReLU(),
                        Linear(64, 64, **nb), ReLU(), Linear(64, 3, **nb)]
    elif tag == "conv":
        if conv_layout == "channels":
            color = head + [Conv1d(48, 32, 3, layout="channels", **nb), ReLU(),
                            Conv1d(32, 16, 3, layout="channels", **nb), ReLU(),
                            Conv1d(16, 8, 3, layout="channels", **nb), ReLU(),
                            Conv1d(8, 4, 3, layout="channels", **nb),
                            Linear(4, 3, **nb)]
        elif conv_layout == "sequence":
            # the 48 features as one channel of length 48
            color = head + [Conv1d(1, 32, 3, layout="sequence", **nb), ReLU(),
                            Conv1d(32, 16, 3, layout="sequence", **nb), ReLU(),
                            Conv1d(16, 8, 3, layout="sequence", **nb), ReLU(),
                            Conv1d(8, 4, 3, layout="sequence", **nb),
                            Linear(4 * 40, 3, **nb)]
        else:
            raise SpecError(f"unknown conv layout {conv_layout!r}")
    elif tag == "residual-input":
        color = head + [Linear(V + G, 64, **nb), ReLU(name="c1"),  # nominal: Linear(31, 64)
                        Concat(("views", "c1")),
                        Linear(64 + V, 64, **nb), ReLU(name="c2"),
                        Concat(("views", "c2")),
                        Linear(64 + V, 3, **nb)]
    elif tag == "residual-alternate":
        color = head + [Linear(V + G, 64, **nb), ReLU(name="c1"),  # nominal: Linear(31, 64)
                        Concat(("c1", "geo")),
                        Linear(64 + G, 64, **nb), ReLU(name="c2"),
                        Concat(("c2", "c1")),
                        Linear(128, 3, **nb)]  # nominal: Linear(79, 3)
    else:  # deep-color
        color = head + [Linear(V + G, 64, **nb), ReLU(),  # nominal: Linear(20, 64)
                        Linear(64, 64, **nb, name="c2"),
                        Concat(("views", "c2")),
                        Linear(64 + V, 128, **nb), ReLU(),  # nominal: Linear(50, 128)
                        Linear(128, 64, **nb), ReLU(),
                        Linear(64, 3, **nb)]
    d_spec, c_spec = LayerGraphSpec(tuple(density)), LayerGraphSpec(tuple(color))
    d_spec.resolve()
    c_spec.resolve()
    return d_spec, c_spec


def make_decoder_spec(row: int, app_width: int = 27, view_width: int = 15,
                      feature_width: int = 128) -> LayerGraphSpec:
    """Feature-decoding MLP, one of four decoder depths (row 1 is the default)."""
    F = feature_width
    in_w = app_width + view_width
    head = [Input("app", app_width), Input("views", view_width), Concat(("app", "views"))]
    if row == 1:
        body = [Linear(in_w, F), ReLU(), Linear(F, F), ReLU(), Linear(F, 3)]
    elif row == 2:
        body = [Linear(in_w, F), ReLU(), Linear(F, F), ReLU(), Linear(F, F), ReLU(), Linear(F, 3)]
    elif row == 3:
        body = [Linear(in_w, F), ReLU(), Linear(F, 3)]
    elif row == 4:
        body = [Linear(in_w, F), ReLU(), Linear(F, 64), ReLU(), Linear(64, 32), ReLU(),
                Linear(32, 16), ReLU(), Linear(16, 8), ReLU(), Linear(8, 3)]
    else:
        raise SpecError(f"decoder row must be 1..4, got {row}")
    spec = LayerGraphSpec(tuple(head + body))
    spec.resolve()
    return spec


# -- shared field plumbing ----------------------------------------------------------

def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class RadianceField:
    """Common box handling and the (sigma, rgb) contract."""

    def __init__(self, box_min, box_max, dtype):
        self.box_min = np.asarray(box_min, dtype=np.float64).reshape(3)
        self.box_max = np.asarray(box_max, dtype=np.float64).reshape(3)
        if np.any(self.box_max <= self.box_min):
            raise ConfigError("scene box must have positive extent")
        self.dtype = np.dtype(dtype)
        self._cache = None

    @property
    def params(self) -> list[ParamTensor]:
        raise NotImplementedError

    def normalize(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        xn = (x - self.box_min) / (self.box_max - self.box_min)
        slack = 1e-6
        if xn.size and (xn.min() < -slack or xn.max() > 1.0 + slack):
            raise DomainError("position outside the scene box")
        return np.clip(xn, 0.0, 1.0)

    def sample(self, x, d) -> FieldSample:
        x = np.atleast_2d(x)
        d = np.atleast_2d(d)
        sigma, rgb = self.forward(x, d)
        return FieldSample(sigma, rgb)

    def forward(self, x, d):
        raise NotImplementedError

    def backward(self, grad_sigma, grad_rgb) -> None:
        raise NotImplementedError

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def param_count(self) -> int:
        return sum(p.size for p in self.params)


# -- hash field ---------------------------------------------------------------------

@dataclass(frozen=True)
class HashFieldConfig:
    grid: HashGridConfig = field(default_factory=HashGridConfig)
    view: FreqEncodingConfig = field(default_factory=FreqEncodingConfig)
    variant: str = "baseline"
    geo_width: int = 15
    conv_layout: str = "channels"
    density_net: LayerGraphSpec | None = None
    color_net: LayerGraphSpec | None = None
    box_min: tuple = (-1.0, -1.0, -1.0)
    box_max: tuple = (1.0, 1.0, 1.0)

    def specs(self) -> tuple[LayerGraphSpec, LayerGraphSpec]:
        d_spec, c_spec = make_variant_spec(self.variant, self.grid.out_width,
                                           self.view.out_width(3), self.geo_width,
                                           self.conv_layout)
        d_spec = self.density_net or d_spec
        c_spec = self.color_net or c_spec
        d_in, c_in = d_spec.input_widths, c_spec.input_widths
        if not set(d_in) <= {"hash", "views"} or "hash" not in d_in:
            raise SpecError(f"density net inputs must be 'hash' (+ optional 'views'), got {sorted(d_in)}")
        if not set(c_in) <= {"geo", "views"}:
            raise SpecError(f"color net inputs must be among 'geo', 'views', got {sorted(c_in)}")
        if d_in["hash"] != self.grid.out_width:
            raise SpecError(f"density net expects {d_in['hash']} encoded features, grid gives {self.grid.out_width}")
        for spec in (d_spec, c_spec):
            if "views" in spec.input_widths and spec.input_widths["views"] != self.view.out_width(3):
                raise SpecError("view-encoding width disagrees with the net's 'views' input")
        if d_spec.output_width < 1 + c_in.get("geo", 0):
            raise SpecError("density net too narrow for the geometry features the color net reads")
        if c_spec.output_width != 3:
            raise SpecError("color net must end in 3 outputs")
        return d_spec, c_spec


class HashField(RadianceField):
    def __init__(self, cfg: HashFieldConfig, rng=None, dtype=np.float64):
        super().__init__(cfg.box_min, cfg.box_max, dtype)
        self.cfg = cfg
        rng = np.random.default_rng(rng)
        d_spec, c_spec = cfg.specs()
        self.grid = HashGrid(cfg.grid, rng=rng, dtype=dtype)
        self.density_net = build_net(d_spec, rng=rng, dtype=dtype, prefix="density.")
        self.color_net = build_net(c_spec, rng=rng, dtype=dtype, prefix="color.")
        self.geo_width = c_spec.input_widths.get("geo", 0)

    @property
    def params(self) -> list[ParamTensor]:
        return self.grid.params + self.density_net.params + self.color_net.params

    @property
    def mlp_params(self) -> list[ParamTensor]:
        return self.density_net.params + self.color_net.params

    def forward(self, x, d):
        xn = self.normalize(x)
        venc = freq_encode(self.cfg.view, np.asarray(d, dtype=np.float64)).astype(self.dtype)
        enc = self.grid.forward(xn)
        d_inputs = {"hash": enc}
        if "views" in self.density_net.input_widths:
            d_inputs["views"] = venc
        h = self.density_net.forward(d_inputs)
        raw = h[:, 0]
        c_inputs = {}
        if "geo" in self.color_net.input_widths:
            c_inputs["geo"] = h[:, 1:1 + self.geo_width]
        if "views" in self.color_net.input_widths:
            c_inputs["views"] = venc
        rgb = _sigmoid(self.color_net.forward(c_inputs))
        live = raw < _LOG_SIGMA_MAX
        sigma = np.exp(np.minimum(raw, _LOG_SIGMA_MAX))
        self._cache = (h.shape, sigma, live, rgb)
        return sigma, rgb

    def backward(self, grad_sigma, grad_rgb) -> None:
        if self._cache is None:
            raise StateError("backward called before forward")
        h_shape, sigma, live, rgb = self._cache
        g_h = np.zeros(h_shape, dtype=self.dtype)
        g_h[:, 0] = grad_sigma * sigma * live
        g_c = self.color_net.backward(grad_rgb * rgb * (1.0 - rgb))
        if "geo" in g_c:
            g_h[:, 1:1 + self.geo_width] = g_c["geo"]
        g_d = self.density_net.backward(g_h)
        self.grid.backward(g_d["hash"])


def eval_hash_field(fld: HashField, x, d) -> FieldSample:
    return fld.sample(x, d)


# -- factorized (tensor) field ----------------------------------------------------

# (plane axes, line axis) per mode: XY-plane x Z-line, XZ x Y, YZ x X
VM_MODES = (((0, 1), 2), ((0, 2), 1), ((1, 2), 0))


def _axis_interp(pos01: np.ndarray, n: int):
    """Lower node index and fractional offset on an ``n``-node axis spanning [0, 1]."""
    pos = pos01 * (n - 1)
    i0 = np.clip(np.floor(pos).astype(np.int64), 0, n - 2)
    return i0, pos - i0


class FactorizedGrid:
    """Sum of plane x line separable terms, one plane/line pair per mode and rank.

    ``components(x)`` returns the ``(P, 3R)`` per-mode, per-rank products,
    mode-major; the density field sums them and the appearance field projects
    them onto a feature basis.
    """

    def __init__(self, resolution, rank: int, rng=None, dtype=np.float64, scale=0.1,
                 prefix="grid"):
        self.resolution = tuple(int(n) for n in resolution)
        if len(self.resolution) != 3 or min(self.resolution) < 2:
            raise ConfigError(f"grid resolution needs three axes of >= 2 nodes, got {resolution}")
        if rank < 1:
            raise ConfigError("rank must be >= 1")
        self.rank = rank
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(rng)
        self.planes: list[ParamTensor] = []
        self.lines: list[ParamTensor] = []
        for m, ((a, b), c) in enumerate(VM_MODES):
            na, nb, nc = self.resolution[a], self.resolution[b], self.resolution[c]
            self.planes.append(ParamTensor(
                f"{prefix}.plane{m}",
                (scale * rng.standard_normal((na, nb, rank))).astype(self.dtype), group="table"))
            self.lines.append(ParamTensor(
                f"{prefix}.line{m}",
                (scale * rng.standard_normal((nc, rank))).astype(self.dtype), group="table"))
        self._cache = None

    @property
    def params(self) -> list[ParamTensor]:
        return [p for pair in zip(self.planes, self.lines) for p in pair]

    @property
    def n_components(self) -> int:
        return 3 * self.rank

    def components(self, xn: np.ndarray) -> np.ndarray:
        R = self.rank
        out = np.empty((xn.shape[0], 3 * R), dtype=self.dtype)
        cache = []
        for m, ((a, b), c) in enumerate(VM_MODES):
            na, nb, nc = self.resolution[a], self.resolution[b], self.resolution[c]
            ia, fa = _axis_interp(xn[:, a], na)
            ib, fb = _axis_interp(xn[:, b], nb)
            ic, fc = _axis_interp(xn[:, c], nc)
            prow = np.stack([ia * nb + ib, ia * nb + ib + 1,
                             (ia + 1) * nb + ib, (ia + 1) * nb + ib + 1], axis=1)
            pw = np.stack([(1 - fa) * (1 - fb), (1 - fa) * fb,
                           fa * (1 - fb), fa * fb], axis=1).astype(self.dtype)
            lrow = np.stack([ic, ic + 1], axis=1)
            lw = np.stack([1 - fc, fc], axis=1).astype(self.dtype)
            pv = np.einsum("pk,pkr->pr", pw, self.planes[m].values.reshape(-1, R)[prow])
            lv = np.einsum("pk,pkr->pr", lw, self.lines[m].values[lrow])
            out[:, m * R:(m + 1) * R] = pv * lv
            cache.append((prow, pw, lrow, lw, pv, lv))
        self._cache = cache
        return out

    def backward(self, grad: np.ndarray) -> None:
        if self._cache is None:
            raise StateError("backward called before forward")
        R = self.rank
        ranks = np.arange(R)
        for m, (prow, pw, lrow, lw, pv, lv) in enumerate(self._cache):
            g = grad[:, m * R:(m + 1) * R]
            for param, rows, w, other in ((self.planes[m], prow, pw, lv),
                                          (self.lines[m], lrow, lw, pv)):
                contrib = w[:, :, None] * (g * other)[:, None, :]
                idx = (rows[:, :, None] * R + ranks).ravel()
                total = np.bincount(idx, weights=contrib.ravel().astype(np.float64),
                                    minlength=param.size)
                param.grad += total.reshape(param.shape).astype(self.dtype)


@dataclass(frozen=True)
class TensoFieldConfig:
    resolution: tuple = (128, 128, 128)
    density_rank: int = 16
    app_rank: int = 48
    app_features: int = 27
    decoder_row: int = 1
    decoder_width: int = 128
    view: FreqEncodingConfig = field(default_factory=FreqEncodingConfig)
    decoder: LayerGraphSpec | None = None
    box_min: tuple = (-1.0, -1.0, -1.0)
    box_max: tuple = (1.0, 1.0, 1.0)

    def decoder_spec(self) -> LayerGraphSpec:
        spec = self.decoder or make_decoder_spec(self.decoder_row, self.app_features,
                                                 self.view.out_width(3), self.decoder_width)
        widths = spec.input_widths
        if widths.get("app") != self.app_features or widths.get("views") != self.view.out_width(3):
            raise SpecError("decoder inputs must be 'app' (app_features) and 'views' (view encoding)")
        if spec.output_width != 3:
            raise SpecError("decoder must end in 3 outputs")
        return spec


class TensoField(RadianceField):
    def __init__(self, cfg: TensoFieldConfig, rng=None, dtype=np.float64, init_scale=0.1):
        super().__init__(cfg.box_min, cfg.box_max, dtype)
        self.cfg = cfg
        rng = np.random.default_rng(rng)
        self.density = FactorizedGrid(cfg.resolution, cfg.density_rank, rng, dtype,
                                      init_scale, prefix="density")
        self.appearance = FactorizedGrid(cfg.resolution, cfg.app_rank, rng, dtype,
                                         init_scale, prefix="app")
        n_in = self.appearance.n_components
        bound = np.sqrt(6.0 / n_in)
        self.basis = ParamTensor("app.basis",
                                 rng.uniform(-bound, bound, (n_in, cfg.app_features)).astype(dtype))
        self.decoder = build_net(cfg.decoder_spec(), rng=rng, dtype=dtype, prefix="decoder.")

    @property
    def params(self) -> list[ParamTensor]:
        return self.density.params + self.appearance.params + [self.basis] + self.decoder.params

    @property
    def mlp_params(self) -> list[ParamTensor]:
        return [self.basis] + self.decoder.params

    def density_raw(self, x) -> np.ndarray:
        """Pre-activation density: the plain sum of all separable terms."""
        return self.density.components(self.normalize(x)).sum(axis=1)

    def forward(self, x, d):
        xn = self.normalize(x)
        raw = self.density.components(xn).sum(axis=1)
        live = raw < SIGMA_MAX  # softplus(raw) ~ raw this far out
        sigma = np.minimum(np.logaddexp(0.0, raw), SIGMA_MAX)
        comps = self.appearance.components(xn)
        feat = comps @ self.basis.values
        venc = freq_encode(self.cfg.view, np.asarray(d, dtype=np.float64)).astype(self.dtype)
        rgb = _sigmoid(self.decoder.forward({"app": feat, "views": venc}))
        self._cache = (raw, live, comps, rgb)
        return sigma, rgb

    def backward(self, grad_sigma, grad_rgb) -> None:
        if self._cache is None:
            raise StateError("backward called before forward")
        raw, live, comps, rgb = self._cache
        g_raw = grad_sigma * _sigmoid(raw) * live
        self.density.backward(np.repeat(g_raw[:, None], self.density.n_components, axis=1))
        g_feat = self.decoder.backward(grad_rgb * rgb * (1.0 - rgb))["app"]
        self.basis.grad += comps.T @ g_feat
        self.appearance.backward(g_feat @ self.basis.values.T)


def eval_tenso_field(fld: TensoField, x, d) -> FieldSample:
    return fld.sample(x, d)


def tenso_param_count(cfg: TensoFieldConfig) -> int:
    """Closed-form parameter count: planes, lines, basis and decoder."""
    nx, ny, nz = cfg.resolution
    per_rank = nx * ny + nz + nx * nz + ny + ny * nz + nx
    return (per_rank * (cfg.density_rank + cfg.app_rank)
            + 3 * cfg.app_rank * cfg.app_features
            + cfg.decoder_spec().param_count())
