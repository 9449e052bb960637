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

Stage 2: motion features and the implicit surface/color field.

The motion encoder reads the UV images of the last T explicit geometries
(newest first, stacked along channels) and produces a global motion vector
and a local UV feature grid. A query point X is conditioned on the explicit
geometry vertex v* nearest to it:

    [X, PE(X), PE(X - v*), local(uv(v*)), global]   -> geometry MLP -> (s, z)
    [X, n, view, z, appearance(uv(v*))]             -> texture MLP  -> c

s is a signed distance; occupancy is sigmoid(-s / beta).

Variants used by evaluation:

    full          Stage-1 geometry, real motion history
    stage1_only   no implicit stage (rendered by Stage 1)
    no_stage1     conditioned on the unclothed skinned body
    no_motion     history replaced by copies of the current frame

"""

__all__ = [
    "Variant",
    "MotionFeatureSet",
    "MotionEncoder",
    "ImplicitField",
    "PointCondition",
    "NearestVertexIndex",
    "ConditionedField",
    "positional_encoding",
    "encode_motion",
    "assign_point_features",
    "query_field",
    "field_gradient",
    "stage2_loss",
    "Stage2Trainer",
    "train_stage2",
    "Stage2Checkpoint",
    "AnimationFrame",
    "conditioning_geometry",
    "animate",
]

from dataclasses import dataclass
import logging
import math

import numpy as np
from scipy.spatial import cKDTree
import torch
from torch import nn

from qcore.enum import Enum
from qcore.events import EventHook

from . import mesh
from .asserts import assert_all_between
from .body_model import UVGrid, uv_rasterize, uv_sample
from .checkpoint import load_checkpoint, load_module_state, save_checkpoint, state_tensors
from .config import config_to_dict, configure_torch
from .diff_renderer import TraceSettings, marching_cubes, sphere_trace
from .errors import CorruptArtifactError, InvalidInputError, TrainingDivergedError
from .explicit_stage import DivergenceMonitor, posed_geometry
from .unet import UNet

_log = logging.getLogger(__name__)

LOSS_TERMS = ("iou", "color", "norm", "eik")
_CANDIDATES = 8


class Variant(Enum):
    full = 1
    stage1_only = 2
    no_stage1 = 3
    no_motion = 4


@dataclass
class MotionFeatureSet:
    global_feature: torch.Tensor  # G
    local: UVGrid  # H x W x C, invalid texels zero


# ===================================================
# Networks
# ===================================================


def positional_encoding(x, octaves):
    """[x, sin(2^k x), cos(2^k x)] for k < octaves; 3 + 6 * octaves columns for 3D x."""
    parts = [x]
    for k in range(octaves):
        scaled = x * (2.0**k)
        parts.append(torch.sin(scaled))
        parts.append(torch.cos(scaled))
    return torch.cat(parts, dim=-1)


class MotionEncoder(UNet):
    def __init__(
        self, history=4, local_channels=64, global_channels=64, base_channels=16, depth=4
    ):
        super().__init__(
            3 * history, local_channels, base_channels, depth, global_features=global_channels
        )
        self.history = history


class ImplicitField(nn.Module):
    """Geometry and texture MLPs, geometry initialized to a sphere of radius r_init.

    The geometry MLP uses softplus(beta=100) activations and concatenates its
    input again before layer skip_layer (scaled by 1/sqrt(2)). At
    initialization every input but the raw point has zero weight, so the field
    starts as s(X) ~ |X| - r_init whatever the conditioning; the output bias
    is then shifted so s averages to zero over the sphere |X| = r_init.

    """

    def __init__(
        self,
        motion_channels=64,
        global_channels=64,
        appearance_channels=64,
        octaves=6,
        width=256,
        depth=8,
        skip_layer=4,
        texture_width=256,
        texture_depth=4,
        r_init=0.5,
        beta=0.01,
    ):
        super().__init__()
        self.motion_channels = motion_channels
        self.global_channels = global_channels
        self.appearance_channels = appearance_channels
        self.octaves = octaves
        self.width = width
        self.depth = depth
        self.skip_layer = skip_layer
        self.texture_width = texture_width
        self.texture_depth = texture_depth
        self.r_init = r_init
        self.beta = beta
        encoded = 3 + 6 * octaves
        self.input_size = 2 * encoded + motion_channels + global_channels
        self.feature_size = width

        layers = []
        in_dim = self.input_size
        for l in range(depth + 1):
            if l == skip_layer:
                in_dim += self.input_size
            out_dim = 1 + self.feature_size if l == depth else width
            linear = nn.Linear(in_dim, out_dim)
            self._geometric_init(linear, l, in_dim, out_dim)
            layers.append(linear)
            in_dim = out_dim
        self.geometry_layers = nn.ModuleList(layers)
        self.activation = nn.Softplus(beta=100)

        texture = []
        in_dim = 9 + self.feature_size + appearance_channels
        for _ in range(texture_depth):
            texture.extend([nn.Linear(in_dim, texture_width), nn.ReLU()])
            in_dim = texture_width
        texture.append(nn.Linear(in_dim, 3))
        self.texture = nn.Sequential(*texture)
        self._center_level_set()

    def _center_level_set(self, samples=1024):
        # samples on a Fibonacci sphere of radius r_init
        i = torch.arange(samples, dtype=torch.float64) + 0.5
        z = 1.0 - 2.0 * i / samples
        phi = i * math.pi * (3.0 - math.sqrt(5.0))
        ring = torch.sqrt(1.0 - z * z)
        points = self.r_init * torch.stack(
            [ring * torch.cos(phi), ring * torch.sin(phi), z], dim=1
        )
        with torch.no_grad():
            s, _ = self(points.float(), self.blank_condition(samples))
            self.geometry_layers[-1].bias[0] -= s.mean()

    def blank_condition(self, count, dtype=torch.float32):
        """A condition with all features zero and every anchor at the origin."""
        return PointCondition(
            vertex_index=np.zeros(count, dtype=np.int64),
            anchor=torch.zeros((count, 3), dtype=dtype),
            local=torch.zeros((count, self.motion_channels), dtype=dtype),
            appearance=torch.zeros((count, self.appearance_channels), dtype=dtype),
            global_feature=torch.zeros((count, self.global_channels), dtype=dtype),
        )

    def _geometric_init(self, linear, l, in_dim, out_dim):
        with torch.no_grad():
            if l == self.depth:
                linear.weight.normal_(math.sqrt(math.pi) / math.sqrt(in_dim), 1e-4)
                linear.bias.fill_(-self.r_init)
                return
            linear.weight.normal_(0.0, math.sqrt(2.0) / math.sqrt(out_dim))
            linear.bias.zero_()
            if l == 0:
                linear.weight[:, 3:] = 0.0
            elif l == self.skip_layer:
                linear.weight[:, in_dim - self.input_size + 3 :] = 0.0

    def geometry_input(self, points, condition):
        offset = points - condition.anchor
        return torch.cat(
            [
                positional_encoding(points, self.octaves),
                positional_encoding(offset, self.octaves),
                condition.local,
                condition.global_feature,
            ],
            dim=-1,
        )

    def forward(self, points, condition):
        """(s N, z N x feature_size)."""
        x0 = self.geometry_input(points, condition)
        x = x0
        for l, layer in enumerate(self.geometry_layers):
            if l == self.skip_layer:
                x = torch.cat([x, x0], dim=-1) / math.sqrt(2.0)
            x = layer(x)
            if l < self.depth:
                x = self.activation(x)
        return x[:, 0], x[:, 1:]

    def color(self, points, normals, view_dirs, features, appearance):
        return torch.sigmoid(
            self.texture(torch.cat([points, normals, view_dirs, features, appearance], dim=-1))
        )

    def occupancy(self, s):
        return torch.sigmoid(-s / self.beta)

    def architecture(self):
        return {
            "motion_channels": self.motion_channels,
            "global_channels": self.global_channels,
            "appearance_channels": self.appearance_channels,
            "octaves": self.octaves,
            "width": self.width,
            "depth": self.depth,
            "skip_layer": self.skip_layer,
            "texture_width": self.texture_width,
            "texture_depth": self.texture_depth,
            "r_init": self.r_init,
            "beta": self.beta,
        }


# ===================================================
# Conditioning
# ===================================================


def encode_motion(encoder, body, history, resolution=(128, 128)):
    """Motion features of a newest-first list of ExplicitGeometry."""
    if len(history) != encoder.history:
        raise InvalidInputError(
            "history has %d geometries, the encoder expects %d"
            % (len(history), encoder.history)
        )
    grids = [
        uv_rasterize(body, torch.as_tensor(g.vertices), resolution) for g in history
    ]
    stacked = torch.cat([g.values for g in grids], dim=-1).permute(2, 0, 1)[None].float()
    local, global_feature = encoder(stacked)
    valid = grids[0].valid
    mask = torch.as_tensor(valid, dtype=local.dtype)
    values = local[0].permute(1, 2, 0) * mask[..., None]
    return MotionFeatureSet(global_feature[0], UVGrid(values, valid))


class NearestVertexIndex:
    """Nearest vertex of a point set; ties go to the lowest vertex index.

    Vertices at identical positions are represented by their lowest index.
    Candidates come from a KD-tree; the winner is chosen on exactly
    recomputed squared distances.

    """

    def __init__(self, vertices):
        self.vertices = np.asarray(vertices, dtype=np.float64)
        if len(self.vertices) == 0:
            raise InvalidInputError("no vertices to search")
        weld = mesh.weld_map(self.vertices)
        self.representatives = np.flatnonzero(weld == np.arange(len(weld)))
        self.tree = cKDTree(self.vertices[self.representatives])

    def query(self, points):
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        k = min(_CANDIDATES, len(self.representatives))
        _, candidates = self.tree.query(points, k=k)
        candidates = self.representatives[np.asarray(candidates).reshape(len(points), k)]
        d2 = ((self.vertices[candidates] - points[:, None, :]) ** 2).sum(axis=-1)
        best = d2.min(axis=1, keepdims=True)
        return np.where(d2 == best, candidates, np.iinfo(np.int64).max).min(axis=1)


@dataclass
class PointCondition:
    vertex_index: np.ndarray  # N
    anchor: torch.Tensor  # N x 3, position of the nearest vertex
    local: torch.Tensor  # N x C
    appearance: torch.Tensor  # N x A
    global_feature: torch.Tensor  # N x G

    def offset(self, points):
        return points - self.anchor


def _vertex_features(grid, body):
    samples, _ = uv_sample(grid, body.uv_coords)
    return samples


def assign_point_features(
    points, geometry, body, motion, appearance, index=None, vertex_local=None, vertex_appearance=None
):
    """Conditions each point on its nearest vertex of geometry.

    The local motion and appearance features are the UV grids sampled at that
    vertex's uv coordinate; the global motion feature is shared. index,
    vertex_local and vertex_appearance may be passed in when they have been
    computed for this geometry already.

    """
    vertices = geometry.vertices.detach()
    if index is None:
        index = NearestVertexIndex(vertices.cpu().numpy())
    if vertex_local is None:
        vertex_local = _vertex_features(motion.local, body)
    if vertex_appearance is None:
        vertex_appearance = _vertex_features(appearance, body)
    nearest = index.query(points.detach().cpu().numpy())
    ids = torch.as_tensor(nearest)
    dtype = points.dtype
    global_feature = motion.global_feature.to(dtype)
    return PointCondition(
        vertex_index=nearest,
        anchor=vertices[ids].to(dtype),
        local=vertex_local[ids].to(dtype),
        appearance=torch.as_tensor(vertex_appearance)[ids].to(dtype),
        global_feature=global_feature[None].expand(len(nearest), -1),
    )


def query_field(field, points, condition, view_dirs=None):
    """(s, o, c); c is None unless view directions are given."""
    if view_dirs is None:
        s, _ = field(points, condition)
        color = None
    else:
        s, grad, features = field_gradient(
            lambda x: field(x, condition), points, create_graph=True, with_features=True
        )
        normals = grad / grad.norm(dim=-1, keepdim=True).clamp_min(1e-12)
        color = field.color(points, normals, view_dirs, features, condition.appearance)
    o = field.occupancy(s)
    assert_all_between(0.0, 1.0, o, extra="occupancy out of range")
    return s, o, color


def field_gradient(sdf, points, create_graph=False, with_features=False):
    """(s, ds/dX) at points; sdf is a callable or an object with an sdf method.

    With with_features the callable must return (s, features) and the
    features are returned as a third element.

    """
    fn = sdf.sdf if hasattr(sdf, "sdf") else sdf
    x = points if points.requires_grad else points.detach().requires_grad_(True)
    with torch.enable_grad():
        out = fn(x)
        s, features = out if with_features else (out, None)
        (grad,) = torch.autograd.grad(s.sum(), x, create_graph=create_graph)
    if with_features:
        return s, grad, features
    return s, grad


class ConditionedField:
    """An ImplicitField bound to one frame's geometry, motion and appearance features.

    Provides sdf(points) and color(points, normals, view_dirs) for the
    renderers.

    """

    def __init__(self, field, body, geometry, motion, appearance):
        self.field = field
        self.body = body
        self.geometry = geometry
        self.motion = motion
        self.appearance = appearance
        self.dtype = next(field.parameters()).dtype
        self.index = NearestVertexIndex(geometry.vertices.detach().cpu().numpy())
        self.vertex_local = _vertex_features(motion.local, body)
        self.vertex_appearance = torch.as_tensor(_vertex_features(appearance, body)).detach()

    def condition(self, points):
        return assign_point_features(
            points,
            self.geometry,
            self.body,
            self.motion,
            self.appearance,
            self.index,
            self.vertex_local,
            self.vertex_appearance,
        )

    def sdf(self, points):
        s, _ = self.field(points, self.condition(points))
        return s

    def color(self, points, normals, view_dirs):
        condition = self.condition(points)
        _, features = self.field(points, condition)
        return self.field.color(
            points, normals, view_dirs.to(points.dtype), features, condition.appearance
        )


# ===================================================
# Loss
# ===================================================


def stage2_loss(render, gt_mask, gt_rgb, gt_normals, sdf_gradients, weights):
    """Stage-2 loss and its terms in float64.

    gt_mask has one entry per traced pixel of render; gt_rgb and gt_normals
    (world frame) one row per hit. Color and normal terms average over hits
    that are inside the ground-truth mask and not grazing.

    """
    gt_mask = np.asarray(gt_mask, dtype=bool).reshape(-1)
    if len(gt_mask) != len(render.pixels):
        raise InvalidInputError(
            "%d mask values for %d traced pixels" % (len(gt_mask), len(render.pixels))
        )
    zero = torch.zeros((), dtype=torch.float64)
    terms = {}

    if render.soft_mask is not None:
        predicted = render.soft_mask.double()
    else:
        predicted = torch.as_tensor(render.hit_mask, dtype=torch.float64)
    target = torch.as_tensor(gt_mask, dtype=torch.float64)
    intersection = (predicted * target).sum()
    union = (predicted + target - predicted * target).sum()
    if float(union) > 0:
        terms["iou"] = 1.0 - intersection / union
    else:
        terms["iou"] = zero

    inside = gt_mask[render.hit_mask] & np.asarray(render.differentiable, dtype=bool)
    if inside.any() and render.colors is not None:
        sel = torch.as_tensor(np.flatnonzero(inside))
        colors = render.colors.double()[sel]
        target_rgb = torch.as_tensor(np.asarray(gt_rgb)[inside], dtype=torch.float64)
        terms["color"] = (colors - target_rgb).abs().sum(dim=1).mean()
        normals = render.surface_normals.double()[sel]
        target_n = torch.as_tensor(np.asarray(gt_normals)[inside], dtype=torch.float64)
        diff = normals - target_n
        terms["norm"] = (diff * diff).sum(dim=1).clamp_min(1e-30).sqrt().mean()
    else:
        _log.warning("stage 2 loss: no hit pixels inside the mask; color and normal terms are 0")
        terms["color"] = zero
        terms["norm"] = zero

    if sdf_gradients is not None and len(sdf_gradients):
        norms = sdf_gradients.double().norm(dim=-1)
        terms["eik"] = ((norms - 1.0) ** 2).mean()
    else:
        terms["eik"] = zero

    total = zero
    for name in LOSS_TERMS:
        total = total + getattr(weights, name) * terms[name]
    return total, terms


# ===================================================
# Training
# ===================================================


def conditioning_geometry(stage1, body, pose, variant):
    """The explicit geometry a variant conditions on."""
    if variant == Variant.no_stage1:
        return posed_geometry(body, pose)
    return stage1.geometry(pose)


def _trace_settings(s2):
    return TraceSettings(
        epsilon=s2.trace_epsilon, max_steps=s2.trace_steps, bound_radius=s2.bound_radius
    )


def build_networks(config, appearance_channels):
    s2 = config.stage2
    encoder = MotionEncoder(
        s2.history, s2.motion_channels, s2.global_channels, s2.unet_channels, s2.unet_depth
    )
    field = ImplicitField(
        motion_channels=s2.motion_channels,
        global_channels=s2.global_channels,
        appearance_channels=appearance_channels,
        octaves=s2.octaves,
        width=s2.width,
        depth=s2.depth,
        skip_layer=s2.skip_layer,
        texture_width=s2.texture_width,
        texture_depth=s2.texture_depth,
        r_init=s2.r_init,
        beta=s2.beta,
    )
    return encoder, field


class Stage2Trainer:
    """Fits the motion encoder and the implicit field with Stage 1 frozen.

    Every step traces a batch of pixels (half drawn from the ground-truth
    mask), adds near-surface and uniform samples for the eikonal term and
    takes one Adam step. on_step is triggered with (step, loss, breakdown).

    """

    def __init__(self, dataset, stage1, config, variant=Variant.full, frame_indices=None):
        if variant not in (Variant.full, Variant.no_stage1):
            raise InvalidInputError("stage 2 can't be trained as %s" % variant.short_name)
        self.dataset = dataset
        self.body = dataset.body
        self.stage1 = stage1
        self.config = config
        self.variant = variant
        s2 = config.stage2
        configure_torch(config.seed, config.threads)
        self.frame_indices = list(
            dataset.split_indices("train") if frame_indices is None else frame_indices
        )
        if not self.frame_indices:
            raise InvalidInputError("no training frames")
        self.encoder, self.field = build_networks(
            config, stage1.appearance_net.out_channels
        )
        self.optimizer = torch.optim.Adam(
            list(self.encoder.parameters()) + list(self.field.parameters()),
            lr=s2.learning_rate,
        )
        self.rng = np.random.default_rng(config.seed)
        self.settings = _trace_settings(s2)
        self.resolution = (config.render.uv_resolution,) * 2
        self._geometries = {}
        self.curve = []
        self.on_step = EventHook()
        self.on_step.subscribe(self._log_step)

    def _log_step(self, step, loss, breakdown):
        if step % self.config.stage2.log_every == 0:
            _log.info(
                "stage 2 step %d: loss %.6f (%s)",
                step,
                loss,
                ", ".join("%s %.4g" % item for item in sorted(breakdown.items())),
            )

    def geometry(self, frame_index):
        if frame_index not in self._geometries:
            pose = self.dataset.frames[frame_index].pose
            self._geometries[frame_index] = conditioning_geometry(
                self.stage1, self.body, pose, self.variant
            )
        return self._geometries[frame_index]

    def condition(self, frame_index):
        history = [
            self.geometry(j)
            for j in self.dataset.history(frame_index, self.config.stage2.history)
        ]
        motion = encode_motion(self.encoder, self.body, history, self.resolution)
        appearance = self.stage1.appearance(history[0])
        return ConditionedField(self.field, self.body, history[0], motion, appearance)

    def _sample_pixels(self, frame):
        s2 = self.config.stage2
        count = max(1, int(round(s2.rays_per_step * s2.pixel_fraction)))
        inside = np.argwhere(frame.mask)
        from_mask = count // 2 if len(inside) else 0
        chosen = [inside[self.rng.integers(0, len(inside), size=from_mask)]] if from_mask else []
        rest = count - from_mask
        chosen.append(
            np.stack(
                [
                    self.rng.integers(0, frame.camera.height, size=rest),
                    self.rng.integers(0, frame.camera.width, size=rest),
                ],
                axis=1,
            )
        )
        return np.concatenate(chosen).astype(np.int64)

    def _sample_points(self, render, gt_mask_at_hits, geometry):
        s2 = self.config.stage2
        near = int(round(s2.rays_per_step * s2.near_fraction))
        uniform = int(round(s2.rays_per_step * s2.uniform_fraction))
        surface = render.surface_points.detach().cpu().numpy()[gt_mask_at_hits]
        if len(surface) == 0:
            surface = geometry.numpy()
        base = surface[self.rng.integers(0, len(surface), size=near)]
        near_points = base + self.rng.normal(0.0, s2.near_sigma, size=base.shape)
        uniform_points = self.rng.uniform(-s2.bound_radius, s2.bound_radius, size=(uniform, 3))
        return np.concatenate([near_points, uniform_points])

    def step(self, step):
        s2 = self.config.stage2
        index = self.frame_indices[step % len(self.frame_indices)]
        frame = self.dataset.frames[index]
        field = self.condition(index)
        pixels = self._sample_pixels(frame)
        render = sphere_trace(
            field,
            frame.camera,
            pixels,
            self.settings,
            differentiable=True,
            with_color=True,
            soft_mask_samples=s2.mask_samples,
            mask_beta=s2.mask_beta,
        )
        gt_mask = frame.mask[pixels[:, 0], pixels[:, 1]]
        hits = render.hit_pixels()
        gt_rgb = frame.rgb[hits[:, 0], hits[:, 1]]
        # camera to world: n_world = R^T n_cam
        gt_normals = frame.normal_map[hits[:, 0], hits[:, 1]] @ frame.camera.rotation
        samples = self._sample_points(render, gt_mask[render.hit_mask], field.geometry)
        _, gradients = field_gradient(
            field, torch.as_tensor(samples, dtype=field.dtype), create_graph=True
        )
        total, terms = stage2_loss(render, gt_mask, gt_rgb, gt_normals, gradients, s2.weights)
        breakdown = {name: float(value) for name, value in terms.items()}
        if not torch.isfinite(total):
            raise TrainingDivergedError(
                "stage 2 loss is not finite at step %d" % step,
                {"step": step, "frame": index, "terms": breakdown},
            )
        self.optimizer.zero_grad()
        total.backward()
        self.optimizer.step()
        return float(total), breakdown

    def run(self):
        s2 = self.config.stage2
        monitor = DivergenceMonitor("stage 2", s2.divergence_factor, s2.divergence_patience)
        for step in range(s2.steps):
            loss, breakdown = self.step(step)
            self.curve.append(loss)
            monitor.update(step, loss, breakdown)
            self.on_step(step, loss, breakdown)
        return self.checkpoint()

    def checkpoint(self):
        return Stage2Checkpoint(
            self.body,
            self.encoder,
            self.field,
            {
                "config": config_to_dict(self.config),
                "seed": self.config.seed,
                "variant": self.variant.short_name,
                "steps": len(self.curve),
                "curve": list(self.curve),
                "frames": list(self.frame_indices),
                "uv_resolution": self.config.render.uv_resolution,
            },
        )


def train_stage2(dataset, stage1, config, variant=Variant.full, frame_indices=None, on_step=None):
    trainer = Stage2Trainer(dataset, stage1, config, variant, frame_indices)
    if on_step is not None:
        trainer.on_step.subscribe(on_step)
    return trainer.run()


# ===================================================
# Checkpoint and animation
# ===================================================


class Stage2Checkpoint:
    KIND = "stage2"

    def __init__(self, body, encoder, field, metadata):
        self.body = body
        self.encoder = encoder
        self.field = field
        self.metadata = dict(metadata)
        encoder.eval()
        field.eval()

    @property
    def variant(self):
        return Variant.parse(self.metadata.get("variant", "full"))

    @property
    def history(self):
        return self.encoder.history

    @property
    def resolution(self):
        return (self.metadata["uv_resolution"],) * 2

    def bind(self, history, appearance):
        """ConditionedField for a newest-first geometry history."""
        with torch.no_grad():
            motion = encode_motion(self.encoder, self.body, history, self.resolution)
        return ConditionedField(self.field, self.body, history[0], motion, appearance)

    def save(self, path):
        tensors = {}
        tensors.update(state_tensors("encoder", self.encoder))
        tensors.update(state_tensors("field", self.field))
        metadata = dict(self.metadata)
        metadata.update(
            {
                "kind": self.KIND,
                "vertex_count": self.body.vertex_count,
                "history": self.encoder.history,
                "encoder_channels": self.encoder.base_channels,
                "encoder_depth": self.encoder.depth,
                "field": self.field.architecture(),
            }
        )
        save_checkpoint(path, tensors, metadata)

    @classmethod
    def load(cls, path, body):
        tensors, metadata = load_checkpoint(path, "stage 2 checkpoint")
        if metadata.get("kind") != cls.KIND:
            raise CorruptArtifactError(path, "not a stage 2 checkpoint")
        if metadata["vertex_count"] != body.vertex_count:
            raise CorruptArtifactError(path, "trained for a different body model")
        arch = metadata["field"]
        encoder = MotionEncoder(
            metadata["history"],
            arch["motion_channels"],
            arch["global_channels"],
            metadata["encoder_channels"],
            metadata["encoder_depth"],
        )
        field = ImplicitField(**arch)
        load_module_state(encoder, "encoder", tensors, path)
        load_module_state(field, "field", tensors, path)
        return cls(body, encoder, field, metadata)


@dataclass
class AnimationFrame:
    index: int
    mesh: mesh.TriangleMesh
    image: np.ndarray
    flagged: bool
    hit_count: int


def _history_window(geometries, t, length, variant):
    if variant == Variant.no_motion:
        return [geometries[t]] * length
    return [geometries[max(t - k, 0)] for k in range(length)]


def animate(
    body,
    poses,
    stage1,
    stage2,
    camera,
    config,
    variant=Variant.full,
    with_images=True,
    on_frame=None,
):
    """Meshes and images for a pose sequence, built on Stage-1 predictions.

    A frame whose marching-cubes mesh is empty is flagged and the sequence
    continues. on_frame, if given, is called with each AnimationFrame.

    """
    ev = config.evaluation
    geometries = [conditioning_geometry(stage1, body, pose, variant) for pose in poses]
    settings = _trace_settings(config.stage2)
    frames = []
    for t in range(len(poses)):
        history = _history_window(geometries, t, stage2.history, variant)
        appearance = stage1.appearance(history[0])
        field = stage2.bind(history, appearance)
        surface = marching_cubes(
            field, (ev.bounds_low, ev.bounds_high), ev.mc_resolution
        )
        flagged = surface.is_empty
        if flagged:
            _log.warning("animation frame %d: empty surface", t)
        image = None
        hits = 0
        if with_images:
            render = sphere_trace(
                field, camera, settings=settings, differentiable=False, with_color=True
            )
            image = render.color_image(0.0)
            hits = render.hit_count
        frame = AnimationFrame(t, surface, image, flagged, hits)
        if on_frame is not None:
            on_frame(frame)
        frames.append(frame)
    return frames
