"""Images, block-mean downsampling and PSNR."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DomainError

# Returned by psnr() for identical images.
INFINITE_PSNR = math.inf


@dataclass
class Image:
    """Row-major ``(height, width, channels)`` float image; RGB values live in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3 or data.shape[2] not in (1, 3):
            raise DomainError(f"expected HxWx1 or HxWx3 data, got shape {data.shape}")
        if data.shape[2] == 3:
            data = np.clip(data, 0.0, 1.0)
        self.data = data

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def pixels(self) -> np.ndarray:
        """Flattened ``(H*W, C)`` view in the same order as ``camera_rays``."""
        return self.data.reshape(-1, self.channels)


def downsample(img: Image, factor: int) -> Image:
    if factor < 1:
        raise DomainError("downsample factor must be a positive integer")
    h, w, c = img.data.shape
    if h % factor or w % factor:
        raise DomainError(f"factor {factor} does not divide {w}x{h}")
    blocks = img.data.reshape(h // factor, factor, w // factor, factor, c)
    return Image(blocks.mean(axis=(1, 3)))


def mse_to_psnr(mse: float) -> float:
    if mse <= 0:
        return INFINITE_PSNR
    return -10.0 * math.log10(mse)


def psnr(pred: Image, gt: Image) -> float:
    """PSNR in dB with peak value 1.0; identical images give ``INFINITE_PSNR``."""
    if pred.data.shape != gt.data.shape:
        raise DomainError(f"shape mismatch: {pred.data.shape} vs {gt.data.shape}")
    return mse_to_psnr(float(np.mean((pred.data - gt.data) ** 2)))


def read_png(path) -> Image:
    """Load an 8-bit PNG; RGBA is composited over white (synthetic-scene convention)."""
    from PIL import Image as PILImage

    with PILImage.open(path) as im:
        arr = np.asarray(im, dtype=np.float64) / 255.0
    if arr.ndim == 2:
        return Image(arr)
    if arr.shape[2] == 4:
        rgb, alpha = arr[..., :3], arr[..., 3:]
        arr = rgb * alpha + (1.0 - alpha)
    return Image(arr[..., :3])


def write_png(img: Image | np.ndarray, path) -> None:
    from PIL import Image as PILImage

    data = img.data if isinstance(img, Image) else np.asarray(img)
    arr = np.clip(np.round(np.clip(data, 0.0, 1.0) * 255.0), 0, 255).astype(np.uint8)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(arr).save(path)
