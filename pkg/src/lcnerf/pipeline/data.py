"""Dataset ingestion: Blender-style camera manifests, PNG views, keypoint depths, view splits."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import DatasetError
from ..imaging import Image, downsample, read_png, write_png
from ..rays import CameraModel, pixel_directions
from ..render import DepthTarget

SPLITS = ("train", "val", "test")
DEFAULT_BOX = ((-1.5, -1.5, -1.5), (1.5, 1.5, 1.5))


@dataclass
class View:
    camera: CameraModel
    image: Image
    name: str = ""
    # analytic per-pixel depth when the dataset ships one (0 where the ray misses)
    depth: np.ndarray | None = None


@dataclass
class DepthSupervision:
    """Keypoint depths bound to their rays; ``targets[k].ray_id == k``."""

    image_ids: np.ndarray
    pixels: np.ndarray
    origins: np.ndarray
    dirs: np.ndarray
    targets: list

    def __len__(self) -> int:
        return len(self.targets)

    @property
    def depths(self) -> np.ndarray:
        return np.array([t.depth for t in self.targets], dtype=np.float64)

    def by_image(self) -> dict[int, list[DepthTarget]]:
        out: dict[int, list[DepthTarget]] = {}
        for img, tgt in zip(self.image_ids, self.targets):
            out.setdefault(int(img), []).append(tgt)
        return out


def empty_supervision() -> DepthSupervision:
    z = np.zeros((0, 3))
    return DepthSupervision(np.zeros(0, dtype=np.int64), np.zeros((0, 2)), z, z.copy(), [])


@dataclass
class DatasetBundle:
    splits: dict[str, list[View]]
    scene_box: tuple = DEFAULT_BOX
    white_background: bool = True
    keypoints: DepthSupervision | None = None
    camera_angle_x: float | None = None
    factor: int = 1

    def __post_init__(self):
        for split in ("train", "test"):
            if not self.splits.get(split):
                raise DatasetError(f"dataset needs at least one {split} view")
        for name, views in self.splits.items():
            for view in views:
                cam, img = view.camera, view.image
                if (img.width, img.height) != (cam.width, cam.height):
                    raise DatasetError(
                        f"{name}/{view.name}: image {img.width}x{img.height} "
                        f"does not match camera {cam.width}x{cam.height}"
                    )

    @property
    def train(self) -> list[View]:
        return self.splits["train"]

    @property
    def test(self) -> list[View]:
        return self.splits["test"]

    def subset(self, split_indices: dict[str, list[int]], source: str = "train") -> "DatasetBundle":
        """New bundle whose splits are index selections from one source split."""
        src = self.splits[source]
        return DatasetBundle(
            {name: [src[i] for i in idx] for name, idx in split_indices.items()},
            self.scene_box, self.white_background, None, self.camera_angle_x, self.factor,
        )


def downsample_bundle(bundle: DatasetBundle, factor: int) -> DatasetBundle:
    """Block-mean downsample every view; keypoints are rebound to the coarser cameras."""
    if factor == 1:
        return bundle
    splits = {}
    for name, views in bundle.splits.items():
        splits[name] = [
            View(v.camera.scaled(factor), downsample(v.image, factor), v.name,
                 None if v.depth is None else _downsample_depth(v.depth, factor))
            for v in views
        ]
    total = bundle.factor * factor
    kp = bundle.keypoints
    if kp is not None and len(kp):
        kp = bind_keypoints(kp.image_ids, kp.pixels, kp.depths,
                            [v.camera for v in splits["train"]], total)
    return DatasetBundle(splits, bundle.scene_box, bundle.white_background, kp,
                         bundle.camera_angle_x, total)


# -- manifests ----------------------------------------------------------------------

def _checked_pose(matrix, where: str) -> np.ndarray:
    m = np.asarray(matrix, dtype=np.float64)
    if m.shape not in ((4, 4), (3, 4)):
        raise DatasetError(f"{where}: transform_matrix must be 4x4, got {m.shape}")
    rot = m[:3, :3]
    if not np.allclose(rot.T @ rot, np.eye(3), atol=1e-3):
        raise DatasetError(f"{where}: rotation is not orthonormal")
    if not np.allclose(rot.T @ rot, np.eye(3), atol=1e-9):
        u, _, vt = np.linalg.svd(rot)
        m = m.copy()
        m[:3, :3] = u @ vt
    return m


def _image_path(root: Path, file_path: str) -> Path:
    p = root / file_path
    return p if p.suffix else p.with_suffix(".png")


def load_synthetic_dataset(path, factor: int = 1, keypoints: str | None = None) -> DatasetBundle:
    """Load ``transforms_{train,val,test}.json`` plus images from a scene directory.

    Intrinsics come from ``camera_angle_x``: ``fx = 0.5 * W / tan(0.5 * camera_angle_x)``
    with the principal point at the image centre; images are block-mean
    downsampled by ``factor`` and the cameras scaled to match.
    """
    root = Path(path)
    splits: dict[str, list[View]] = {}
    box = DEFAULT_BOX
    angle_x = None
    for split in SPLITS:
        manifest = root / f"transforms_{split}.json"
        if not manifest.exists():
            if split == "val":
                continue
            raise DatasetError(f"missing camera manifest {manifest}")
        meta = json.loads(manifest.read_text())
        if "camera_angle_x" not in meta or "frames" not in meta:
            raise DatasetError(f"{manifest}: needs camera_angle_x and frames")
        angle_x = float(meta["camera_angle_x"])
        if "scene_box" in meta:
            lo, hi = meta["scene_box"]
            box = (tuple(map(float, lo)), tuple(map(float, hi)))
        views = []
        frames = meta["frames"]
        images = [_image_path(root, fr["file_path"]) for fr in frames]
        missing = [str(p) for p in images if not p.exists()]
        if missing:
            raise DatasetError(
                f"{manifest}: {len(frames)} poses but only {len(frames) - len(missing)} images "
                f"(missing {missing[:3]})"
            )
        for fr, img_path in zip(frames, images):
            pose = _checked_pose(fr["transform_matrix"], f"{manifest}:{fr['file_path']}")
            img = read_png(img_path)
            fx = 0.5 * img.width / math.tan(0.5 * angle_x)
            cam = CameraModel.from_matrix(pose, img.width, img.height, fx)
            depth_path = img_path.with_name(img_path.stem + "_depth.npy")
            depth = np.load(depth_path) if depth_path.exists() else None
            if factor != 1:
                img = downsample(img, factor)
                cam = cam.scaled(factor)
                if depth is not None:
                    depth = _downsample_depth(depth, factor)
            views.append(View(cam, img, img_path.stem, depth))
        splits[split] = views
    kp = None
    if keypoints:
        kp_path = Path(keypoints)
        if not kp_path.is_absolute():
            kp_path = root / kp_path
        kp = load_keypoint_depths(kp_path, [v.camera for v in splits["train"]], factor)
    return DatasetBundle(splits, box, True, kp, angle_x, factor)


def _downsample_depth(depth: np.ndarray, factor: int) -> np.ndarray:
    # nearest-to-centre sample keeps depth values physical at silhouettes
    h, w = depth.shape
    return depth[factor // 2::factor, factor // 2::factor][: h // factor, : w // factor]


def save_synthetic_dataset(bundle: DatasetBundle, path) -> None:
    """Write a bundle back out in the layout ``load_synthetic_dataset`` reads."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    for split, views in bundle.splits.items():
        cam0 = views[0].camera
        angle_x = 2.0 * math.atan(0.5 * cam0.width / cam0.fx)
        frames = []
        for i, view in enumerate(views):
            rel = f"./{split}/r_{i}"
            write_png(view.image, root / split / f"r_{i}.png")
            if view.depth is not None:
                np.save(root / split / f"r_{i}_depth.npy", view.depth)
            frames.append({"file_path": rel, "transform_matrix": view.camera.c2w.tolist()})
        meta = {
            "camera_angle_x": angle_x,
            "scene_box": [list(bundle.scene_box[0]), list(bundle.scene_box[1])],
            "frames": frames,
        }
        (root / f"transforms_{split}.json").write_text(json.dumps(meta, indent=2))


# -- keypoint depths ------------------------------------------------------------------

def load_keypoint_depths(path, cameras=None, factor: int = 1) -> DepthSupervision:
    """Parse ``image_id u v depth`` lines (full-resolution pixel coordinates).

    With ``cameras`` each record is bound to the ray through its pixel; the
    pixel is rescaled so the ray is unchanged under downsampling.
    """
    ids, pix, depths = [], [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 4:
            raise DatasetError(f"{path}:{lineno}: expected 'image_id u v depth'")
        try:
            img, u, v, d = int(parts[0]), float(parts[1]), float(parts[2]), float(parts[3])
        except ValueError:
            raise DatasetError(f"{path}:{lineno}: malformed record {line!r}") from None
        if not d > 0:
            raise DatasetError(f"{path}:{lineno}: depth must be positive, got {d}")
        ids.append(img)
        pix.append((u, v))
        depths.append(d)
    ids_arr = np.array(ids, dtype=np.int64)
    pix_arr = np.array(pix, dtype=np.float64).reshape(-1, 2)
    if cameras is None:
        z = np.zeros((len(ids), 3))
        targets = [DepthTarget(k, d) for k, d in enumerate(depths)]
        return DepthSupervision(ids_arr, pix_arr, z, z.copy(), targets)
    return bind_keypoints(ids_arr, pix_arr, np.array(depths), cameras, factor, source=str(path))


def bind_keypoints(image_ids, pixels, depths, cameras, factor: int = 1,
                   source: str = "keypoints") -> DepthSupervision:
    """Attach rays to keypoint records given in full-resolution pixel coordinates."""
    n = len(depths)
    origins = np.zeros((n, 3))
    dirs = np.zeros((n, 3))
    for k in range(n):
        img = int(image_ids[k])
        if not 0 <= img < len(cameras):
            raise DatasetError(f"{source}: unknown image id {img}")
        cam = cameras[img]
        u, v = pixels[k]
        if not (0 <= u < cam.width * factor and 0 <= v < cam.height * factor):
            raise DatasetError(f"{source}: pixel ({u}, {v}) outside image {img}")
        us, vs = (u + 0.5) / factor - 0.5, (v + 0.5) / factor - 0.5
        origins[k] = cam.translation
        dirs[k] = pixel_directions(cam, us, vs)
    targets = [DepthTarget(k, float(d)) for k, d in enumerate(depths)]
    return DepthSupervision(np.asarray(image_ids, dtype=np.int64),
                            np.asarray(pixels, dtype=np.float64).reshape(-1, 2),
                            origins, dirs, targets)


def write_keypoint_depths(path, image_ids, pixels, depths) -> None:
    lines = ["# image_id u v depth"]
    for img, (u, v), d in zip(image_ids, pixels, depths):
        lines.append(f"{int(img)} {float(u):.6g} {float(v):.6g} {float(d)!r}")
    Path(path).write_text("\n".join(lines) + "\n")


# -- view splits ----------------------------------------------------------------

def _round_half_up(num: int, den: int) -> int:
    return (2 * num + den) // (2 * den)


def low_view_split(n_images: int, n_select: int = 9, n_train: int = 4, n_test: int = 4,
                   n_val: int = 1) -> dict[str, list[int]]:
    """Pick ``n_select`` equally spaced views; alternate them into train/test, rest to val."""
    if n_train + n_test + n_val != n_select:
        raise DatasetError("train + test + val must equal the number of selected views")
    if n_images < n_select:
        raise DatasetError(f"need at least {n_select} images, got {n_images}")
    picks = [_round_half_up(i * (n_images - 1), n_select - 1) for i in range(n_select)]
    train, test = [], []
    head = picks[: n_train + n_test]
    for j, idx in enumerate(head):
        want_train = (j % 2 == 0 and len(train) < n_train) or len(test) >= n_test
        (train if want_train else test).append(idx)
    return {"train": train, "test": test, "val": picks[n_train + n_test:]}


def holdout_split(n_images: int, n_test: int = 4, n_val: int = 1) -> dict[str, list[int]]:
    """Last ``n_val`` views validate; ``n_test`` evenly spread held-out views; the rest train."""
    pool = n_images - n_val
    if pool <= n_test:
        raise DatasetError("not enough images for the requested split")
    test = [int((2 * k + 1) * pool // (2 * n_test)) for k in range(n_test)]
    val = list(range(pool, n_images))
    train = [i for i in range(pool) if i not in test]
    return {"train": train, "test": test, "val": val}
