# Copyright 2026 The dynavatar Authors
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#   http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

"""

Experiment configuration.

An ExperimentConfig is a tree of dataclasses whose every field has a default.
Values are layered, later layers winning:

    1. dataclass defaults
    2. a TOML file (tables map to sections, e.g. [stage1.weights]) or the
       equivalent JSON, such as the config.json written next to an artifact
    3. the DYNAVATAR_SEED environment variable
    4. explicit overrides, keyed by dotted path ("stage1.steps")

Unknown keys are rejected with the full key path. config_to_dict() gives the
canonical form that is embedded in every artifact, and config_hash() its
SHA-256.

"""

__all__ = [
    "BodyConfig",
    "DatasetConfig",
    "ClothSection",
    "RenderConfig",
    "Stage1Weights",
    "Stage1Config",
    "Stage2Weights",
    "Stage2Config",
    "EvaluationConfig",
    "ExperimentConfig",
    "load_config",
    "config_from_dict",
    "config_to_dict",
    "config_hash",
    "apply_overrides",
    "configure_torch",
    "SEED_ENVIRONMENT_VARIABLE",
]

from dataclasses import dataclass, field, fields, is_dataclass
import hashlib
import json
import logging
import os
import tomllib

import torch

from .errors import CorruptArtifactError, InvalidInputError, MissingArtifactError

_log = logging.getLogger(__name__)

SEED_ENVIRONMENT_VARIABLE = "DYNAVATAR_SEED"


@dataclass
class BodyConfig:
    # empty: build the default procedural body
    model_path: str = ""
    subdivisions: int = 1
    n_lon: int = 32
    n_rings: int = 24


@dataclass
class DatasetConfig:
    train_frames: int = 600
    test_frames: int = 100
    pixel_noise: float = 0.0


@dataclass
class ClothSection:
    stiffness: float = 110.0
    damping: float = 2.0
    dt: float = 1.0 / 30.0
    band_low: float = -0.85
    band_high: float = -0.2
    base: float = 0.01
    gain: float = 0.04


@dataclass
class RenderConfig:
    height: int = 128
    width: int = 128
    focal: float = 200.0
    camera_distance: float = 3.0
    camera_height: float = -0.12
    softness: float = 4e-3
    uv_resolution: int = 128

    @property
    def image_size(self):
        return (self.height, self.width)


@dataclass
class Stage1Weights:
    mask: float = 1.0
    normal: float = 0.1
    lap: float = 100.0
    rgb: float = 1.0
    vgg: float = 0.0
    gan: float = 0.0


@dataclass
class Stage1Config:
    steps: int = 2000
    learning_rate: float = 1e-3
    hidden: tuple = (256, 256, 256, 256)
    feature_channels: int = 64
    unet_channels: int = 16
    unet_depth: int = 4
    head_channels: int = 32
    # the softness is halved at each of these fractions of the run
    anneal_at: tuple = (1.0 / 3.0, 2.0 / 3.0)
    divergence_factor: float = 10.0
    divergence_patience: int = 500
    discriminator_learning_rate: float = 2e-4
    log_every: int = 50
    weights: Stage1Weights = field(default_factory=Stage1Weights)


@dataclass
class Stage2Weights:
    iou: float = 1.0
    color: float = 1.0
    norm: float = 0.1
    eik: float = 0.1


@dataclass
class Stage2Config:
    steps: int = 2000
    learning_rate: float = 5e-4
    history: int = 4
    beta: float = 0.01
    mask_beta: float = 0.005
    mask_samples: int = 16
    rays_per_step: int = 512
    pixel_fraction: float = 0.5
    near_fraction: float = 0.25
    uniform_fraction: float = 0.25
    near_sigma: float = 0.02
    octaves: int = 6
    width: int = 256
    depth: int = 8
    skip_layer: int = 4
    texture_width: int = 256
    texture_depth: int = 4
    r_init: float = 0.5
    motion_channels: int = 64
    global_channels: int = 64
    unet_channels: int = 16
    unet_depth: int = 4
    trace_epsilon: float = 1e-4
    trace_steps: int = 64
    bound_radius: float = 1.5
    divergence_factor: float = 10.0
    divergence_patience: int = 500
    log_every: int = 50
    weights: Stage2Weights = field(default_factory=Stage2Weights)


@dataclass
class EvaluationConfig:
    metrics: tuple = ("ssim", "tof", "chamfer")
    chamfer_samples: int = 10000
    mc_resolution: int = 64
    bounds_low: tuple = (-1.0, -1.0, -1.0)
    bounds_high: tuple = (1.0, 1.0, 1.0)


@dataclass
class ExperimentConfig:
    workdir: str = "."
    seed: int = 0
    threads: int = 1
    body: BodyConfig = field(default_factory=BodyConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    cloth: ClothSection = field(default_factory=ClothSection)
    render: RenderConfig = field(default_factory=RenderConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)


def _field_names(section):
    return {f.name for f in fields(section)}


def _coerce(current, value, path):
    name = ".".join(path)
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise InvalidInputError("%s must be true or false, got %r" % (name, value))
        return value
    if isinstance(current, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise InvalidInputError("%s must be an integer, got %r" % (name, value))
        return value
    if isinstance(current, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise InvalidInputError("%s must be a number, got %r" % (name, value))
        return float(value)
    if isinstance(current, str):
        if not isinstance(value, str):
            raise InvalidInputError("%s must be a string, got %r" % (name, value))
        return value
    if isinstance(current, tuple):
        if not isinstance(value, (list, tuple)):
            raise InvalidInputError("%s must be an array, got %r" % (name, value))
        return tuple(value)
    return value


def _apply(section, data, path):
    if not isinstance(data, dict):
        raise InvalidInputError("%s must be a table" % ".".join(path))
    names = _field_names(section)
    for key, value in data.items():
        full = path + (key,)
        if key not in names:
            raise InvalidInputError("unknown configuration key %s" % ".".join(full))
        current = getattr(section, key)
        if is_dataclass(current):
            _apply(current, value, full)
        else:
            setattr(section, key, _coerce(current, value, full))


def config_from_dict(data):
    config = ExperimentConfig()
    _apply(config, data, ())
    return config


def apply_overrides(config, overrides):
    """Sets dotted keys, e.g. {"stage1.steps": 10}; None values are skipped."""
    for dotted, value in overrides.items():
        if value is None:
            continue
        path = tuple(dotted.split("."))
        nested = value
        for key in reversed(path):
            nested = {key: nested}
        _apply(config, nested, ())
    return config


def load_config(path=None, environ=None, overrides=None):
    """Builds an ExperimentConfig from defaults, a TOML file, the environment and overrides."""
    config = ExperimentConfig()
    if path:
        if not os.path.exists(path):
            raise MissingArtifactError(path, "configuration file")
        try:
            with open(path, "rb") as f:
                if path.endswith(".json"):
                    data = json.load(f)
                else:
                    data = tomllib.load(f)
        except (tomllib.TOMLDecodeError, ValueError) as e:
            raise CorruptArtifactError(path, str(e))
        _apply(config, data, ())
    environ = os.environ if environ is None else environ
    seed = environ.get(SEED_ENVIRONMENT_VARIABLE)
    if seed is not None:
        try:
            config.seed = int(seed)
        except ValueError:
            raise InvalidInputError(
                "%s must be an integer, got %r" % (SEED_ENVIRONMENT_VARIABLE, seed)
            )
    if overrides:
        apply_overrides(config, overrides)
    _check(config)
    return config


def _check(config):
    s2 = config.stage2
    total = s2.pixel_fraction + s2.near_fraction + s2.uniform_fraction
    if abs(total - 1.0) > 1e-9:
        raise InvalidInputError("stage2 sample fractions sum to %r, not 1" % total)
    if s2.history < 1:
        raise InvalidInputError("stage2.history must be at least 1")
    if config.threads < 1:
        raise InvalidInputError("threads must be at least 1")
    if config.dataset.train_frames < 1:
        raise InvalidInputError("dataset.train_frames must be at least 1")


def _to_plain(value):
    if is_dataclass(value):
        return {f.name: _to_plain(getattr(value, f.name)) for f in fields(value)}
    if isinstance(value, tuple):
        return [_to_plain(v) for v in value]
    return value


def config_to_dict(config):
    return _to_plain(config)


def config_hash(config):
    canonical = json.dumps(config_to_dict(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def configure_torch(seed, threads=1):
    """Seeds torch and restricts it to deterministic kernels on threads threads."""
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)
    torch.set_num_threads(threads)
    _log.debug("torch seeded with %d, %d threads", seed, threads)
