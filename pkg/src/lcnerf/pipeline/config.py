"""Run configuration: a sectioned TOML file whose schema is the dataclasses below.

Every key name is unique across sections, so command-line flags and
benchmark overrides can address fields by bare name (``--variant conv``).
Unknown sections or keys are errors.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import tomli
import tomli_w

from ..autodiff import LayerGraphSpec
from ..encodings import FreqEncodingConfig, HashGridConfig
from ..errors import ConfigError
from ..fields import HASH_VARIANTS, HashFieldConfig, TensoFieldConfig


@dataclass
class RunSection:
    label: str = "run"
    seed: int = 0
    iterations: int = 2500
    batch_rays: int = 4096
    log_every: int = 0
    record_at: list = field(default_factory=list)
    dataset: str = ""
    output_dir: str = "runs/default"
    downsample: int = 1
    eval_train_rays: int = 4096
    chunk_rays: int = 2048
    dtype: str = "float32"
    scene_box: list = field(default_factory=list)


@dataclass
class ModelSection:
    family: str = "hash"
    variant: str = "baseline"
    decoder_row: int = 1
    levels: int = 16
    table_size: int = 2 ** 19
    features_per_level: int = 2
    n_min: int = 16
    n_max: int = 512
    view_freqs: int = 2
    view_include_input: bool = True
    geo_width: int = 15
    conv_layout: str = "channels"
    tenso_resolution: int = 128
    density_rank: int = 16
    app_rank: int = 48
    app_features: int = 27
    decoder_width: int = 128
    density_net: list = field(default_factory=list)
    color_net: list = field(default_factory=list)
    decoder_net: list = field(default_factory=list)


@dataclass
class SamplerSection:
    n_samples: int = 64
    near: float = 2.0
    far: float = 6.0
    jitter: bool = True
    # <= 0: the last interval runs to the ray's far bound
    last_delta: float = 0.0


@dataclass
class OptimSection:
    lr_tables: float = 1e-2
    lr_mlp: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-15


@dataclass
class DepthSection:
    depth_weight: float = 0.1
    depth_quota: float = 0.125
    keypoints: str = ""


_SECTIONS = {
    "run": RunSection,
    "model": ModelSection,
    "sampler": SamplerSection,
    "optim": OptimSection,
    "depth": DepthSection,
}


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    model: ModelSection = field(default_factory=ModelSection)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    optim: OptimSection = field(default_factory=OptimSection)
    depth: DepthSection = field(default_factory=DepthSection)

    def validate(self) -> "RunConfig":
        r, m, s, d = self.run, self.model, self.sampler, self.depth
        if r.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if r.batch_rays < 1:
            raise ConfigError("batch_rays must be >= 1")
        if r.downsample < 1:
            raise ConfigError("downsample must be >= 1")
        if r.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {r.dtype!r}")
        if r.scene_box and len(r.scene_box) != 6:
            raise ConfigError("scene_box needs 6 numbers: min xyz then max xyz")
        if m.family not in ("hash", "tenso"):
            raise ConfigError(f"family must be 'hash' or 'tenso', got {m.family!r}")
        if m.variant not in HASH_VARIANTS:
            raise ConfigError(f"unknown variant {m.variant!r}")
        if m.decoder_row not in (1, 2, 3, 4):
            raise ConfigError("decoder_row must be 1..4")
        if s.n_samples < 1:
            raise ConfigError("n_samples must be >= 1")
        if not 0 <= s.near < s.far:
            raise ConfigError("need 0 <= near < far")
        if d.depth_weight < 0:
            raise ConfigError("depth_weight must be >= 0")
        if not 0 < d.depth_quota <= 1:
            raise ConfigError("depth_quota must be in (0, 1]")
        # entries past the last iteration are skipped, so a shorter run can reuse a config
        for rec in r.record_at:
            if rec < 1:
                raise ConfigError(f"record_at entries must be >= 1, got {rec}")
        # building the field config checks the network graphs too
        fc = self.field_config((-1, -1, -1), (1, 1, 1))
        if isinstance(fc, HashFieldConfig):
            fc.specs()
        else:
            fc.decoder_spec()
        return self

    # field construction ------------------------------------------------------
    def field_config(self, box_min, box_max):
        m = self.model
        view = FreqEncodingConfig(m.view_freqs, m.view_include_input)
        if m.family == "hash":
            return HashFieldConfig(
                grid=HashGridConfig(m.levels, m.table_size, m.features_per_level, m.n_min, m.n_max),
                view=view,
                variant=m.variant,
                geo_width=m.geo_width,
                conv_layout=m.conv_layout,
                density_net=LayerGraphSpec.from_list(m.density_net) if m.density_net else None,
                color_net=LayerGraphSpec.from_list(m.color_net) if m.color_net else None,
                box_min=tuple(box_min),
                box_max=tuple(box_max),
            )
        n = m.tenso_resolution
        return TensoFieldConfig(
            resolution=(n, n, n),
            density_rank=m.density_rank,
            app_rank=m.app_rank,
            app_features=m.app_features,
            decoder_row=m.decoder_row,
            decoder_width=m.decoder_width,
            view=view,
            decoder=LayerGraphSpec.from_list(m.decoder_net) if m.decoder_net else None,
            box_min=tuple(box_min),
            box_max=tuple(box_max),
        )

    @property
    def np_dtype(self):
        return np.dtype(self.run.dtype)

    # serialization -----------------------------------------------------------
    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        cfg = cls()
        for sec_name, values in raw.items():
            if sec_name not in _SECTIONS:
                raise ConfigError(f"unknown config section [{sec_name}]")
            if not isinstance(values, dict):
                raise ConfigError(f"[{sec_name}] must be a table")
            section = getattr(cfg, sec_name)
            for key, value in values.items():
                _set_field(section, sec_name, key, value)
        return cfg.validate()

    def to_toml(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def save(self, path) -> None:
        Path(path).write_text(self.to_toml())

    def model_hash(self) -> bytes:
        """SHA-256 over everything that determines parameter layout."""
        payload = json.dumps(dataclasses.asdict(self.model), sort_keys=True).encode()
        return hashlib.sha256(payload).digest()

    # overrides ------------------------------------------------------------------
    def with_overrides(self, overrides: dict) -> "RunConfig":
        cfg = RunConfig.from_dict(self.to_dict())
        for key, value in overrides.items():
            sec_name, _, name = key.rpartition(".")
            if not sec_name:
                sec_name = FIELD_SECTIONS.get(name)
                if sec_name is None:
                    raise ConfigError(f"unknown config key {key!r}")
            elif sec_name not in _SECTIONS:
                raise ConfigError(f"unknown config section in {key!r}")
            _set_field(getattr(cfg, sec_name), sec_name, name, value)
        return cfg.validate()


def _set_field(section, sec_name: str, key: str, value) -> None:
    fields = {f.name: f for f in dataclasses.fields(section)}
    if key not in fields:
        raise ConfigError(f"unknown key {key!r} in [{sec_name}]")
    current = getattr(section, key)
    setattr(section, key, _coerce(current, value, f"{sec_name}.{key}"))


def _coerce(current, value, where: str):
    if isinstance(current, bool):
        if isinstance(value, str) and value.lower() in ("true", "false", "1", "0", "yes", "no"):
            return value.lower() in ("true", "1", "yes")
        if not isinstance(value, bool):
            raise ConfigError(f"{where} expects a boolean, got {value!r}")
        return value
    if isinstance(current, int):
        if isinstance(value, bool):
            raise ConfigError(f"{where} expects an integer, got {value!r}")
        try:
            as_float = float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{where} expects an integer, got {value!r}") from None
        if as_float != int(as_float):
            raise ConfigError(f"{where} expects an integer, got {value!r}")
        return int(as_float)
    if isinstance(current, float):
        if isinstance(value, bool):
            raise ConfigError(f"{where} expects a number, got {value!r}")
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{where} expects a number, got {value!r}") from None
    if isinstance(current, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where} expects a string, got {value!r}")
        return value
    if isinstance(current, list):
        if isinstance(value, str):
            value = [v for v in value.split(",") if v.strip()]
            value = [json.loads(v) for v in value]
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where} expects a list, got {value!r}")
        return list(value)
    raise ConfigError(f"{where}: unsupported field type")


FIELD_SECTIONS: dict[str, str] = {
    f.name: sec for sec, cls in _SECTIONS.items() for f in dataclasses.fields(cls)
}
assert len(FIELD_SECTIONS) == sum(len(dataclasses.fields(c)) for c in _SECTIONS.values())


def load_config(path) -> RunConfig:
    try:
        raw = tomli.loads(Path(path).read_text())
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    return RunConfig.from_dict(raw)
