"""Training loop, rendering of whole views, evaluation and run directories."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..autodiff import AdamState, adam_step
from ..errors import DatasetError, DivergenceError, DomainError
from ..fields import HashField, HashFieldConfig, RadianceField, TensoField
from ..imaging import Image, mse_to_psnr, psnr, write_png
from ..rays import camera_rays, ray_box_intersect, stratified_t
from ..render import (DepthTarget, RaySampleBatch, color_loss, composite, composite_backward,
                      total_loss)
from ..render import depth_loss as _depth_loss
from .checkpoint import load_into, save_checkpoint
from .config import RunConfig, load_config
from .data import DatasetBundle, View

log = logging.getLogger(__name__)

CSV_COLUMNS = ("run_id", "label", "iteration", "seconds", "train_psnr", "test_psnr",
               "loss_color", "loss_depth")


@dataclass
class MetricsRow:
    run_id: str
    label: str
    iteration: int
    seconds: float
    train_psnr: float
    test_psnr: float
    loss_color: float
    loss_depth: float

    def as_csv(self) -> list[str]:
        return [self.run_id, self.label, str(self.iteration)] + [
            _fmt(v) for v in (self.seconds, self.train_psnr, self.test_psnr,
                              self.loss_color, self.loss_depth)
        ]


def _fmt(v: float) -> str:
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    if math.isnan(v):
        return "nan"
    return repr(float(v))


def write_metrics_csv(path, rows) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for row in rows:
            writer.writerow(row.as_csv())


def read_metrics_csv(path) -> list[MetricsRow]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != CSV_COLUMNS:
            raise DatasetError(f"unexpected metrics header {header}")
        return [MetricsRow(r[0], r[1], int(r[2]), *map(float, r[3:])) for r in reader]


# -- rays -----------------------------------------------------------------------------

@dataclass
class RayBank:
    """Flat arrays of rays with their box-clipped sampling interval."""

    origins: np.ndarray
    dirs: np.ndarray
    t_near: np.ndarray
    t_far: np.ndarray
    rgb: np.ndarray | None = None

    def __len__(self) -> int:
        return self.origins.shape[0]

    def take(self, idx) -> "RayBank":
        return RayBank(self.origins[idx], self.dirs[idx], self.t_near[idx], self.t_far[idx],
                       None if self.rgb is None else self.rgb[idx])

    @classmethod
    def build(cls, origins, dirs, box, near, far, rgb=None) -> "RayBank":
        t0, t1, _ = ray_box_intersect(origins, dirs, box[0], box[1])
        tn = np.clip(t0, near, far)
        tf = np.clip(t1, near, far)
        return cls(origins, dirs, tn, np.maximum(tf, tn), rgb)

    @classmethod
    def from_views(cls, views: list[View], box, near, far) -> "RayBank":
        parts = [camera_rays(v.camera) for v in views]
        o = np.concatenate([p[0] for p in parts])
        d = np.concatenate([p[1] for p in parts])
        rgb = np.concatenate([v.image.pixels() for v in views])
        return cls.build(o, d, box, near, far, rgb)

    @staticmethod
    def concat(a: "RayBank", b: "RayBank") -> "RayBank":
        cat = np.concatenate
        rgb = None if a.rgb is None or b.rgb is None else cat([a.rgb, b.rgb])
        return RayBank(cat([a.origins, b.origins]), cat([a.dirs, b.dirs]),
                       cat([a.t_near, b.t_near]), cat([a.t_far, b.t_far]), rgb)


def resolve_box(cfg: RunConfig, data: DatasetBundle | None = None):
    if cfg.run.scene_box:
        b = [float(v) for v in cfg.run.scene_box]
        return (tuple(b[:3]), tuple(b[3:]))
    if data is None:
        raise DomainError("scene box is neither configured nor available from a dataset")
    return tuple(tuple(float(v) for v in corner) for corner in data.scene_box)


def build_field(cfg: RunConfig, box, rng=None) -> RadianceField:
    fcfg = cfg.field_config(*box)
    if isinstance(fcfg, HashFieldConfig):
        return HashField(fcfg, rng=rng, dtype=cfg.np_dtype)
    return TensoField(fcfg, rng=rng, dtype=cfg.np_dtype)


def _sample_times(bank: RayBank, cfg: RunConfig, rng=None):
    """Sample distances and interval lengths; bin midpoints when ``rng`` is None."""
    s = cfg.sampler
    t = stratified_t(bank.t_near, bank.t_far, s.n_samples, rng if s.jitter else None)
    deltas = np.empty_like(t)
    deltas[:, :-1] = np.diff(t, axis=1)
    if s.last_delta > 0:
        # a fixed cap, but never past the ray's far bound
        deltas[:, -1] = np.minimum(s.last_delta, bank.t_far - t[:, -1])
    else:
        deltas[:, -1] = bank.t_far - t[:, -1]
    return t, np.maximum(deltas, 0.0)


def march(fld: RadianceField, bank: RayBank, t: np.ndarray, deltas: np.ndarray,
          white_background: bool):
    """Evaluate the field at every sample and composite. Leaves the field's cache primed."""
    n_rays, n_samples = t.shape
    pts = bank.origins[:, None, :] + t[..., None] * bank.dirs[:, None, :]
    pts = np.clip(pts, fld.box_min, fld.box_max)
    dirs = np.repeat(bank.dirs, n_samples, axis=0)
    sigma, rgb = fld.forward(pts.reshape(-1, 3), dirs)
    batch = RaySampleBatch(t, deltas, sigma.reshape(n_rays, n_samples),
                           rgb.reshape(n_rays, n_samples, 3))
    return batch, composite(batch, white_background)


def render_bank(fld: RadianceField, bank: RayBank, cfg: RunConfig, white_background: bool):
    """Forward-only render at bin midpoints; returns ``(rgb, depth, opacity)``."""
    chunk = max(1, cfg.run.chunk_rays)
    rgb, depth, opac = [], [], []
    for start in range(0, len(bank), chunk):
        sub = bank.take(slice(start, start + chunk))
        t, deltas = _sample_times(sub, cfg)
        _, res = march(fld, sub, t, deltas, white_background)
        rgb.append(res.color)
        depth.append(res.depth)
        opac.append(res.opacity)
    return np.concatenate(rgb), np.concatenate(depth), np.concatenate(opac)


# -- training -----------------------------------------------------------------------

@dataclass
class TrainResult:
    field: RadianceField
    config: RunConfig
    metrics: list[MetricsRow]
    run_id: str
    seconds: float
    final_loss_color: float = float("nan")
    final_loss_depth: float = 0.0
    resolution: tuple = ()
    seconds_per_iteration: float = float("nan")


def run_id_for(cfg: RunConfig) -> str:
    return f"{cfg.run.label}-{cfg.model_hash().hex()[:8]}-s{cfg.run.seed}"


def record_iterations(cfg: RunConfig, record_at=None) -> list[int]:
    its = list(record_at) if record_at is not None else list(cfg.run.record_at)
    n = cfg.run.iterations
    if not its and cfg.run.log_every > 0:
        its = list(range(cfg.run.log_every, n + 1, cfg.run.log_every))
    # the final iteration is always recorded
    its.append(n)
    return sorted(set(int(i) for i in its if 1 <= i <= n))


class Trainer:
    """One training run. ``step()`` advances one iteration; ``run()`` does all of them."""

    def __init__(self, cfg: RunConfig, data: DatasetBundle, clock=time.perf_counter):
        cfg.validate()
        self.cfg = cfg
        self.data = data
        self.clock = clock
        self.box = resolve_box(cfg, data)
        seeds = np.random.SeedSequence(cfg.run.seed).spawn(3)
        self.field = build_field(cfg, self.box, np.random.default_rng(seeds[0]))
        self.batch_rng = np.random.default_rng(seeds[1])
        self.depth_rng = np.random.default_rng(seeds[2])
        o = cfg.optim
        self.adam = AdamState(lr=o.lr_mlp, beta1=o.beta1, beta2=o.beta2, eps=o.eps,
                              group_lr={"table": o.lr_tables, "mlp": o.lr_mlp})
        s = cfg.sampler
        self.white = data.white_background
        self.train_bank = RayBank.from_views(data.train, self.box, s.near, s.far)
        kp = data.keypoints
        self.depth_bank = None
        if kp is not None and len(kp) and cfg.depth.depth_weight > 0:
            bank = RayBank.build(kp.origins, kp.dirs, self.box, s.near, s.far)
            self.depth_bank = bank
            self.depth_targets = kp.targets
        self.iteration = 0
        self.elapsed = 0.0

    @property
    def batch_size(self) -> int:
        return min(self.cfg.run.batch_rays, len(self.train_bank))

    def step(self) -> tuple[float, float]:
        cfg = self.cfg
        n = len(self.train_bank)
        if cfg.run.batch_rays >= n:
            idx = np.arange(n)
        else:
            idx = self.batch_rng.integers(0, n, cfg.run.batch_rays)
        bank = self.train_bank.take(idx)
        t, deltas = _sample_times(bank, cfg, self.batch_rng)
        target = bank.rgb
        n_color = len(bank)
        if self.depth_bank is not None:
            k = max(1, int(round(n_color * cfg.depth.depth_quota)))
            didx = self.depth_rng.integers(0, len(self.depth_bank), k)
            dbank = self.depth_bank.take(didx)
            dt, dd = _sample_times(dbank, cfg, self.depth_rng)
            bank = RayBank.concat(bank, dbank)
            t = np.concatenate([t, dt])
            deltas = np.concatenate([deltas, dd])
        batch, res = march(self.field, bank, t, deltas, self.white)
        l_color, g_main = color_loss(res.color[:n_color], target)
        g_color = np.zeros_like(res.color)
        g_color[:n_color] = g_main
        g_depth = None
        l_depth = 0.0
        lam = cfg.depth.depth_weight
        if self.depth_bank is not None:
            targets = [DepthTarget(n_color + j, self.depth_targets[i].depth,
                                   self.depth_targets[i].weight) for j, i in enumerate(didx)]
            l_depth, g_d = _depth_loss(res.depth, targets)
            g_depth = lam * g_d
        loss = total_loss(l_color, l_depth, lam)
        if not math.isfinite(loss):
            raise DivergenceError(
                f"non-finite loss at iteration {self.iteration + 1} "
                f"(color {l_color!r}, depth {l_depth!r})"
            )
        g_sigma, g_rgb = composite_backward(batch, res, g_color, g_depth)
        self.field.backward(g_sigma.reshape(-1), g_rgb.reshape(-1, 3))
        adam_step(self.adam, self.field.params)
        self.iteration += 1
        return l_color, l_depth

    def timed_step(self):
        t0 = self.clock()
        out = self.step()
        self.elapsed += self.clock() - t0
        return out

    # metrics ------------------------------------------------------------------
    def train_psnr(self) -> float:
        n = len(self.train_bank)
        m = min(n, max(1, self.cfg.run.eval_train_rays))
        idx = np.unique(np.linspace(0, n - 1, m).round().astype(np.int64))
        sub = self.train_bank.take(idx)
        rgb, _, _ = render_bank(self.field, sub, self.cfg, self.white)
        return mse_to_psnr(float(np.mean((rgb - sub.rgb) ** 2)))

    def test_psnr(self) -> float:
        views = self.data.splits.get("test") or []
        if not views:
            return float("nan")
        scores = [view_psnr(self.field, v, self.cfg, self.box, self.white) for v in views]
        return float(np.mean(scores))

    def run(self, record_at=None, run_id: str | None = None) -> TrainResult:
        cfg = self.cfg
        run_id = run_id or run_id_for(cfg)
        records = set(record_iterations(cfg, record_at))
        rows = []
        l_color = l_depth = float("nan")
        while self.iteration < cfg.run.iterations:
            l_color, l_depth = self.timed_step()
            if self.iteration in records:
                rows.append(MetricsRow(run_id, cfg.run.label, self.iteration, self.elapsed,
                                       self.train_psnr(), self.test_psnr(), l_color, l_depth))
                log.info("%s it=%d %.1fs train=%.2fdB test=%.2fdB", run_id, self.iteration,
                         self.elapsed, rows[-1].train_psnr, rows[-1].test_psnr)
        cam = self.data.train[0].camera
        return TrainResult(self.field, cfg, rows, run_id, self.elapsed, l_color, l_depth,
                           (cam.width, cam.height), self.elapsed / max(1, self.iteration))


def train(cfg: RunConfig, data: DatasetBundle, record_at=None, clock=time.perf_counter,
          run_id: str | None = None) -> TrainResult:
    return Trainer(cfg, data, clock).run(record_at, run_id)


# -- evaluation -----------------------------------------------------------------------

def render_view(fld: RadianceField, view_or_camera, cfg: RunConfig, box, white: bool):
    """Render one camera: ``(rgb HxWx3, depth HxW, opacity HxW)``."""
    cam = getattr(view_or_camera, "camera", view_or_camera)
    o, d = camera_rays(cam)
    bank = RayBank.build(o, d, box, cfg.sampler.near, cfg.sampler.far)
    rgb, depth, opac = render_bank(fld, bank, cfg, white)
    h, w = cam.height, cam.width
    return rgb.reshape(h, w, 3), depth.reshape(h, w), opac.reshape(h, w)


def view_psnr(fld, view: View, cfg, box, white) -> float:
    rgb, _, _ = render_view(fld, view, cfg, box, white)
    return psnr(Image(rgb), view.image)


@dataclass
class EvalResult:
    per_view: list[float]
    mean_psnr: float
    images: list[np.ndarray] = field(default_factory=list)
    depths: list[np.ndarray] = field(default_factory=list)


def evaluate_field(fld: RadianceField, cfg: RunConfig, views: list[View], box, white: bool,
                   out_dir=None, prefix: str = "") -> EvalResult:
    per_view, images, depths = [], [], []
    for i, view in enumerate(views):
        rgb, depth, _ = render_view(fld, view, cfg, box, white)
        per_view.append(psnr(Image(rgb), view.image))
        images.append(rgb)
        depths.append(depth)
        if out_dir is not None:
            out = Path(out_dir)
            stem = f"{prefix}{view.name or i}"
            write_png(rgb, out / f"{stem}.png")
            write_png(np.clip(depth / cfg.sampler.far, 0.0, 1.0), out / f"{stem}_depth.png")
            np.save(out / f"{stem}_depth.npy", depth)
    mean = float(np.mean(per_view)) if per_view else float("nan")
    return EvalResult(per_view, mean, images, depths)


# -- run directories ---------------------------------------------------------------------

CHECKPOINT_NAME = "checkpoint.bin"


def finalize_config(cfg: RunConfig, data: DatasetBundle) -> RunConfig:
    """Copy of ``cfg`` with the scene box pinned, so the saved config is self-contained."""
    box = resolve_box(cfg, data)
    return cfg.with_overrides({"run.scene_box": list(box[0]) + list(box[1])})


def run_training(cfg: RunConfig, data: DatasetBundle, out_dir=None, record_at=None,
                 clock=time.perf_counter) -> TrainResult:
    """Train and write ``config.toml``, ``checkpoint.bin``, ``metrics.csv`` and ``run.json``."""
    cfg = finalize_config(cfg, data)
    out = Path(out_dir or cfg.run.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    result = train(cfg, data, record_at, clock)
    cfg.save(out / "config.toml")
    save_checkpoint(out / CHECKPOINT_NAME, cfg.model_hash(), result.field.params)
    write_metrics_csv(out / "metrics.csv", result.metrics)
    meta = {"run_id": result.run_id, "train_resolution": list(result.resolution),
            "white_background": data.white_background, "iterations": cfg.run.iterations}
    (out / "run.json").write_text(json.dumps(meta, indent=2))
    return result


def load_run(run_dir):
    """Rebuild ``(config, field, meta)`` from a run directory."""
    run_dir = Path(run_dir)
    cfg = load_config(run_dir / "config.toml")
    meta = json.loads((run_dir / "run.json").read_text())
    fld = build_field(cfg, resolve_box(cfg))
    load_into(run_dir / CHECKPOINT_NAME, cfg.model_hash(), fld.params)
    return cfg, fld, meta


def evaluate(run_dir, data: DatasetBundle, split: str = "test", out_dir=None) -> EvalResult:
    cfg, fld, meta = load_run(run_dir)
    views = data.splits.get(split)
    if not views:
        raise DatasetError(f"dataset has no {split!r} split")
    want = tuple(meta["train_resolution"])
    for v in views:
        if (v.camera.width, v.camera.height) != want:
            raise DomainError(
                f"view {v.name} is {v.camera.width}x{v.camera.height}, run was trained at "
                f"{want[0]}x{want[1]}"
            )
    return evaluate_field(fld, cfg, views, resolve_box(cfg), meta["white_background"],
                          out_dir, prefix=f"{split}_")
