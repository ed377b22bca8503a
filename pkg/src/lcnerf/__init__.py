"""Radiance fields on the CPU: hash-grid and factorized fields, volume rendering, training."""
from .autodiff import AdamState, LayerGraphSpec, Network, ParamTensor, adam_step
from .encodings import FreqEncodingConfig, HashGrid, HashGridConfig, freq_encode, hash_index
from .errors import ConfigError, DatasetError, DivergenceError, DomainError, SpecError, StateError
from .fields import HashField, HashFieldConfig, TensoField, TensoFieldConfig
from .imaging import INFINITE_PSNR, Image, psnr
from .rays import CameraModel, Ray, generate_ray, stratified_samples
from .render import DepthTarget, RaySampleBatch, color_loss, composite, depth_loss, total_loss

__version__ = "0.1.0"
