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

Helpers for dynavatar's tests: finite-difference gradient checks, small
fixtures and the slow test marker.

"""

__all__ = [
    "SLOW_TESTS_ENVIRONMENT_VARIABLE",
    "slow",
    "numeric_gradient",
    "gradient_relative_error",
    "tiny_body",
    "tiny_config",
    "tiny_camera",
    "tiny_dataset",
    "SphereField",
]

import functools
import os

import numpy as np
import pytest
import torch

from qcore.testing import decorate_func_or_method_or_class

from .body_model import default_body
from .config import ExperimentConfig
from .diff_renderer import default_camera
from .synth_data import generate_dataset, skirt_cloth_config

SLOW_TESTS_ENVIRONMENT_VARIABLE = "DYNAVATAR_SLOW_TESTS"


def _slow(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        if os.environ.get(SLOW_TESTS_ENVIRONMENT_VARIABLE) != "1":
            pytest.skip("set %s=1 to run training tests" % SLOW_TESTS_ENVIRONMENT_VARIABLE)
        return fn(*args, **kwargs)

    return wrapper


# marks a test function, or every test method of a class, as a training run
slow = decorate_func_or_method_or_class(_slow)
slow.__test__ = False


def numeric_gradient(fn, x, eps=1e-6):
    """Central finite-difference gradient of the scalar fn at the float64 tensor x."""
    x = x.detach().clone()
    grad = torch.zeros_like(x)
    flat = x.view(-1)
    out = grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            saved = float(flat[i])
            flat[i] = saved + eps
            plus = float(fn(x))
            flat[i] = saved - eps
            minus = float(fn(x))
            flat[i] = saved
            out[i] = (plus - minus) / (2 * eps)
    return grad


def gradient_relative_error(analytic, numeric):
    """|a - n| / max(|a|, |n|), with norms taken over all elements."""
    analytic = torch.as_tensor(analytic, dtype=torch.float64)
    numeric = torch.as_tensor(numeric, dtype=torch.float64)
    scale = max(float(analytic.norm()), float(numeric.norm()), 1e-12)
    return float((analytic - numeric).norm()) / scale


def tiny_body():
    return default_body(0, n_lon=12, n_rings=8)


def tiny_config(**sections):
    """A config small enough for unit tests: 32x32 images, narrow networks, few steps."""
    config = ExperimentConfig()
    config.render.height = config.render.width = 32
    config.render.focal = 50.0
    config.render.uv_resolution = 32
    config.body.subdivisions = 0
    config.body.n_lon = 12
    config.body.n_rings = 8
    config.dataset.train_frames = 6
    config.dataset.test_frames = 4

    s1 = config.stage1
    s1.steps = 3
    s1.hidden = (32, 32)
    s1.feature_channels = 8
    s1.unet_channels = 4
    s1.unet_depth = 2
    s1.head_channels = 8
    s1.log_every = 1

    s2 = config.stage2
    s2.steps = 2
    s2.history = 2
    s2.octaves = 2
    s2.width = 32
    s2.depth = 4
    s2.skip_layer = 2
    s2.texture_width = 16
    s2.texture_depth = 2
    s2.motion_channels = 8
    s2.global_channels = 8
    s2.unet_channels = 4
    s2.unet_depth = 2
    s2.rays_per_step = 32
    s2.mask_samples = 4
    s2.trace_steps = 16
    s2.log_every = 1

    config.evaluation.chamfer_samples = 500
    config.evaluation.mc_resolution = 16
    for name, values in sections.items():
        section = getattr(config, name)
        for key, value in values.items():
            setattr(section, key, value)
    return config


def tiny_camera(config=None):
    r = (config or tiny_config()).render
    return default_camera(r.image_size, r.focal, r.camera_distance, r.camera_height)


def tiny_dataset(config=None, seed=0):
    config = config or tiny_config()
    body = tiny_body()
    return generate_dataset(
        body,
        tiny_camera(config),
        seed,
        config.dataset.train_frames,
        config.dataset.test_frames,
        skirt_cloth_config(body),
    )


class SphereField:
    """Exact SDF of a sphere, with a constant color; float64."""

    dtype = torch.float64

    def __init__(self, radius=0.5, center=(0.0, 0.0, 0.0), color=(0.8, 0.4, 0.2)):
        self.radius = radius
        self.center = torch.as_tensor(np.asarray(center, dtype=np.float64))
        self.rgb = torch.as_tensor(np.asarray(color, dtype=np.float64))

    def sdf(self, points):
        return (points - self.center.to(points.dtype)).norm(dim=-1) - self.radius

    def color(self, points, normals, view_dirs):
        return self.rgb.to(points.dtype).expand(len(points), 3)
