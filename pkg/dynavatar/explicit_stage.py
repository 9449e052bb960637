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

Stage 1: pose-dependent explicit geometry and UV appearance features.

GeometryNet maps the flattened axis-angle pose to per-vertex offsets. The
offsets split into a static part (the network evaluated at the zero pose)
and a dynamic remainder, and the explicit geometry is the skinned body plus
their sum:

    geometry = pose_mesh(body, pose) + static + dynamic

AppearanceNet is a U-Net over the UV image of that geometry. Its 64-channel
output is sampled at the vertices, carried to the image by the soft rasterizer
and turned into RGB by a small convolutional head.

Geometry is kept in float64, networks run in float32.

"""

__all__ = [
    "OffsetDecomposition",
    "ExplicitGeometry",
    "RenderedFrame",
    "GeometryNet",
    "AppearanceNet",
    "ConvHead",
    "RandomFeatureExtractor",
    "PatchDiscriminator",
    "predict_offsets",
    "build_geometry",
    "posed_geometry",
    "extract_appearance",
    "render_explicit",
    "stage1_loss",
    "softness_at",
    "Stage1Trainer",
    "DivergenceMonitor",
    "train_stage1",
    "Stage1Checkpoint",
]

from dataclasses import dataclass
import logging

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from qcore.events import EventHook

from .body_model import PoseState, UVGrid, pose_mesh, uv_rasterize, uv_sample
from .checkpoint import load_checkpoint, load_module_state, save_checkpoint, state_tensors
from .config import configure_torch, config_to_dict
from .diff_renderer import rasterize_soft
from .errors import CorruptArtifactError, InvalidInputError, TrainingDivergedError
from .unet import UNet

_log = logging.getLogger(__name__)

LOSS_TERMS = ("mask", "normal", "lap", "rgb", "vgg", "gan")


# ===================================================
# Types
# ===================================================


@dataclass
class OffsetDecomposition:
    """static + dynamic == total holds exactly; total is computed from the parts."""

    static: torch.Tensor
    dynamic: torch.Tensor
    total: torch.Tensor

    @classmethod
    def from_parts(cls, static, dynamic):
        return cls(static, dynamic, static + dynamic)


@dataclass
class ExplicitGeometry:
    vertices: torch.Tensor  # V x 3, float64
    faces: np.ndarray
    timestamp: int
    offsets: OffsetDecomposition = None
    posed: np.ndarray = None  # the skinned body the offsets were added to

    def numpy(self):
        return self.vertices.detach().cpu().numpy()


@dataclass
class RenderedFrame:
    image: torch.Tensor  # H x W x 3
    mask: torch.Tensor  # H x W, soft
    normals: torch.Tensor  # H x W x 3, camera frame
    raster: object


# ===================================================
# Networks
# ===================================================


class GeometryNet(nn.Module):
    """MLP from a 3K pose vector to V x 3 offsets; the last layer starts at zero."""

    def __init__(self, joint_count, vertex_count, hidden=(256, 256, 256, 256)):
        super().__init__()
        self.joint_count = joint_count
        self.vertex_count = vertex_count
        self.hidden = tuple(hidden)
        layers = []
        width = 3 * joint_count
        for h in self.hidden:
            layers.extend([nn.Linear(width, h), nn.ReLU()])
            width = h
        out = nn.Linear(width, 3 * vertex_count)
        nn.init.zeros_(out.weight)
        nn.init.zeros_(out.bias)
        layers.append(out)
        self.mlp = nn.Sequential(*layers)

    @property
    def input_size(self):
        return 3 * self.joint_count

    def forward(self, pose):
        return self.mlp(pose).reshape(pose.shape[0], self.vertex_count, 3)


class AppearanceNet(UNet):
    def __init__(self, feature_channels=64, base_channels=16, depth=4):
        super().__init__(3, feature_channels, base_channels, depth)


class ConvHead(nn.Module):
    """Feature image to RGB: 3x3 conv, ReLU, 1x1 conv, sigmoid."""

    def __init__(self, feature_channels=64, hidden_channels=32):
        super().__init__()
        self.conv = nn.Conv2d(
            feature_channels, hidden_channels, 3, padding=1, padding_mode="replicate"
        )
        self.out = nn.Conv2d(hidden_channels, 3, 1)
        # start from a dark image, matching the empty background
        nn.init.constant_(self.out.bias, -3.0)

    def forward(self, features):
        return torch.sigmoid(self.out(F.relu(self.conv(features))))


class RandomFeatureExtractor(nn.Module):
    """Three frozen random conv layers; stands in for pretrained perceptual features."""

    def __init__(self, seed=0, channels=(16, 32, 64)):
        super().__init__()
        generator = torch.Generator().manual_seed(seed)
        layers = []
        width = 3
        for c in channels:
            conv = nn.Conv2d(width, c, 3, stride=2, padding=1)
            with torch.no_grad():
                conv.weight.normal_(0.0, (2.0 / (9 * width)) ** 0.5, generator=generator)
                conv.bias.zero_()
            layers.append(conv)
            width = c
        self.layers = nn.ModuleList(layers)
        self.requires_grad_(False)

    def forward(self, image):
        features = []
        x = image
        for layer in self.layers:
            x = F.relu(layer(x))
            features.append(x)
        return features


class PatchDiscriminator(nn.Module):
    def __init__(self, channels=32):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, channels, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(channels, 2 * channels, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(2 * channels, 4 * channels, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(4 * channels, 1, 3, padding=1),
        )

    def forward(self, image):
        return self.net(image)


def _to_nchw(image):
    return image.permute(2, 0, 1)[None].float()


# ===================================================
# Forward model
# ===================================================


def _pose_vector(net, pose):
    if isinstance(pose, PoseState):
        pose = torch.as_tensor(pose.flat(), dtype=torch.float32)
    pose = torch.as_tensor(pose, dtype=torch.float32).reshape(-1)
    if pose.shape[0] != net.input_size:
        raise InvalidInputError(
            "pose has %d values, the network expects %d" % (pose.shape[0], net.input_size)
        )
    return pose


def predict_offsets(net, pose):
    """Static offsets are net(0); dynamic offsets are net(pose) - net(0)."""
    vector = _pose_vector(net, pose)
    static = net(torch.zeros_like(vector)[None])[0]
    dynamic = net(vector[None])[0] - static
    return OffsetDecomposition.from_parts(static, dynamic)


def build_geometry(net, body, pose):
    posed = pose_mesh(body, pose)
    offsets = predict_offsets(net, pose)
    vertices = torch.as_tensor(posed) + offsets.total.double()
    return ExplicitGeometry(vertices, body.faces, pose.timestamp, offsets, posed)


def posed_geometry(body, pose):
    """The unclothed skinned body as ExplicitGeometry with zero offsets."""
    posed = pose_mesh(body, pose)
    zeros = torch.zeros((body.vertex_count, 3))
    return ExplicitGeometry(
        torch.as_tensor(posed),
        body.faces,
        pose.timestamp,
        OffsetDecomposition.from_parts(zeros, zeros),
        posed,
    )


def extract_appearance(net, body, vertices, resolution=None):
    """Appearance features: the U-Net over the UV image of the vertex positions.

    Invalid texels are zero.

    """
    if resolution is None:
        resolution = (128, 128)
    if isinstance(vertices, ExplicitGeometry):
        vertices = vertices.vertices
    grid = uv_rasterize(body, torch.as_tensor(vertices), resolution)
    features, _ = net(_to_nchw(grid.values))
    valid = torch.as_tensor(grid.valid, dtype=features.dtype)
    values = features[0].permute(1, 2, 0) * valid[..., None]
    return UVGrid(values, grid.valid)


def render_explicit(body, vertices, appearance, camera, head, softness):
    """(image, mask, normals) of explicit geometry with its appearance, plus the raster pass."""
    if isinstance(vertices, ExplicitGeometry):
        vertices = vertices.vertices
    features, _ = uv_sample(appearance, body.uv_coords)
    raster = rasterize_soft(
        vertices, body.faces, features, camera, softness=softness, weld=body.weld()
    )
    image = head(_to_nchw(raster.rgb))[0].permute(1, 2, 0)
    return RenderedFrame(image, raster.silhouette, raster.normal_map, raster)


# ===================================================
# Loss
# ===================================================


def _safe_norm(x):
    sq = (x * x).sum(dim=-1)
    return torch.where(sq > 0, sq.clamp_min(1e-30).sqrt(), torch.zeros_like(sq))


def stage1_loss(
    image,
    mask,
    normals,
    offsets,
    gt_rgb,
    gt_mask,
    gt_normals,
    weights,
    laplacian,
    perceptual=None,
    discriminator=None,
):
    """Stage-1 loss and its terms, all computed in float64.

    weights is a Stage1Weights. The perceptual and adversarial terms are
    evaluated only when their weight is positive and the corresponding
    network is passed; otherwise they are 0.

    """

    def as64(x):
        return torch.as_tensor(x).double()

    image, mask, normals, offsets = map(as64, (image, mask, normals, offsets))
    gt_rgb, gt_mask, gt_normals = map(as64, (gt_rgb, gt_mask, gt_normals))
    if image.shape != gt_rgb.shape or mask.shape != gt_mask.shape:
        raise InvalidInputError(
            "rendered %r / %r, ground truth %r / %r"
            % (tuple(image.shape), tuple(mask.shape), tuple(gt_rgb.shape), tuple(gt_mask.shape))
        )
    zero = image.new_zeros(())
    terms = {}
    terms["mask"] = (mask - gt_mask).abs().mean()
    valid = gt_mask > 0.5
    if valid.any():
        terms["normal"] = _safe_norm(normals[valid] - gt_normals[valid]).mean()
    else:
        terms["normal"] = zero
    smoothed = laplacian @ offsets
    terms["lap"] = (smoothed * smoothed).sum(dim=1).mean()
    terms["rgb"] = (image - gt_rgb).abs().mean()
    terms["vgg"] = zero
    if weights.vgg > 0 and perceptual is not None:
        fake = perceptual(_to_nchw(image))
        real = perceptual(_to_nchw(gt_rgb))
        terms["vgg"] = sum(
            (f.double() - r.double()).abs().mean() for f, r in zip(fake, real)
        )
    terms["gan"] = zero
    if weights.gan > 0 and discriminator is not None:
        terms["gan"] = F.softplus(-discriminator(_to_nchw(image))).mean().double()
    total = zero
    for name in LOSS_TERMS:
        total = total + getattr(weights, name) * terms[name]
    return total, terms


def softness_at(step, steps, base, anneal_at):
    """base halved once for every anneal fraction already passed."""
    passed = sum(1 for a in anneal_at if step >= a * steps)
    return base * 0.5**passed


# ===================================================
# Training
# ===================================================


class Stage1Trainer:
    """Fits GeometryNet, AppearanceNet and the head to a dataset's frames.

    on_step is an EventHook triggered with (step, loss, breakdown) after every
    optimizer step.

    """

    def __init__(self, dataset, config, frame_indices=None):
        self.dataset = dataset
        self.body = dataset.body
        self.config = config
        s1 = config.stage1
        configure_torch(config.seed, config.threads)
        if frame_indices is None:
            frame_indices = dataset.split_indices("train")
        self.frame_indices = list(frame_indices)
        if not self.frame_indices:
            raise InvalidInputError("no training frames")
        self.geometry = GeometryNet(self.body.joint_count, self.body.vertex_count, s1.hidden)
        self.appearance = AppearanceNet(s1.feature_channels, s1.unet_channels, s1.unet_depth)
        self.head = ConvHead(s1.feature_channels, s1.head_channels)
        self.perceptual = (
            RandomFeatureExtractor(config.seed) if s1.weights.vgg > 0 else None
        )
        self.discriminator = PatchDiscriminator() if s1.weights.gan > 0 else None
        parameters = (
            list(self.geometry.parameters())
            + list(self.appearance.parameters())
            + list(self.head.parameters())
        )
        self.optimizer = torch.optim.Adam(parameters, lr=s1.learning_rate)
        self.d_optimizer = (
            torch.optim.Adam(
                self.discriminator.parameters(), lr=s1.discriminator_learning_rate
            )
            if self.discriminator is not None
            else None
        )
        self.laplacian = self.body.laplacian()
        self.resolution = (config.render.uv_resolution,) * 2
        self.curve = []
        self.on_step = EventHook()
        self.on_step.subscribe(self._log_step)

    def _log_step(self, step, loss, breakdown):
        if step % self.config.stage1.log_every == 0:
            _log.info(
                "stage 1 step %d: loss %.6f (%s)",
                step,
                loss,
                ", ".join("%s %.4g" % item for item in sorted(breakdown.items())),
            )

    def forward(self, frame, softness):
        geometry = build_geometry(self.geometry, self.body, frame.pose)
        appearance = extract_appearance(
            self.appearance, self.body, geometry, self.resolution
        )
        rendered = render_explicit(
            self.body, geometry, appearance, frame.camera, self.head, softness
        )
        return geometry, rendered

    def step(self, step):
        s1 = self.config.stage1
        frame = self.dataset.frames[self.frame_indices[step % len(self.frame_indices)]]
        softness = softness_at(step, s1.steps, self.config.render.softness, s1.anneal_at)
        geometry, rendered = self.forward(frame, softness)
        total, terms = stage1_loss(
            rendered.image,
            rendered.mask,
            rendered.normals,
            geometry.offsets.total,
            frame.rgb,
            frame.mask.astype(np.float64),
            frame.normal_map,
            s1.weights,
            self.laplacian,
            self.perceptual,
            self.discriminator,
        )
        breakdown = {name: float(value) for name, value in terms.items()}
        if not torch.isfinite(total):
            raise TrainingDivergedError(
                "stage 1 loss is not finite at step %d" % step,
                {"step": step, "frame": frame.index_in_sequence, "terms": breakdown},
            )
        self.optimizer.zero_grad()
        total.backward()
        self.optimizer.step()
        if self.discriminator is not None:
            real = _to_nchw(torch.as_tensor(frame.rgb))
            fake = _to_nchw(rendered.image.detach())
            d_loss = (
                F.softplus(-self.discriminator(real)).mean()
                + F.softplus(self.discriminator(fake)).mean()
            )
            self.d_optimizer.zero_grad()
            d_loss.backward()
            self.d_optimizer.step()
        return float(total), breakdown

    def run(self):
        s1 = self.config.stage1
        monitor = DivergenceMonitor("stage 1", s1.divergence_factor, s1.divergence_patience)
        for step in range(s1.steps):
            loss, breakdown = self.step(step)
            self.curve.append(loss)
            monitor.update(step, loss, breakdown)
            self.on_step(step, loss, breakdown)
        return self.checkpoint()

    def checkpoint(self):
        return Stage1Checkpoint(
            self.body,
            self.geometry,
            self.appearance,
            self.head,
            {
                "config": config_to_dict(self.config),
                "seed": self.config.seed,
                "steps": len(self.curve),
                "curve": list(self.curve),
                "frames": list(self.frame_indices),
                "softness": self.config.render.softness,
                "uv_resolution": self.config.render.uv_resolution,
            },
        )


class DivergenceMonitor:
    """Aborts when the loss stays above factor x the first loss for patience steps."""

    def __init__(self, name, factor, patience):
        self.name = name
        self.factor = factor
        self.patience = patience
        self.initial = None
        self.above = 0

    def update(self, step, loss, breakdown=None):
        if self.initial is None:
            self.initial = loss
            return
        if loss > self.factor * self.initial:
            self.above += 1
        else:
            self.above = 0
        if self.above >= self.patience:
            raise TrainingDivergedError(
                "%s diverged: loss %.6g above %g x initial %.6g for %d steps"
                % (self.name, loss, self.factor, self.initial, self.above),
                {
                    "step": step,
                    "loss": loss,
                    "initial": self.initial,
                    "terms": dict(breakdown or {}),
                },
            )


def train_stage1(dataset, config, frame_indices=None, on_step=None):
    trainer = Stage1Trainer(dataset, config, frame_indices)
    if on_step is not None:
        trainer.on_step.subscribe(on_step)
    return trainer.run()


# ===================================================
# Checkpoint
# ===================================================


class Stage1Checkpoint:
    """Trained Stage-1 networks bound to their body model."""

    KIND = "stage1"

    def __init__(self, body, geometry, appearance, head, metadata):
        self.body = body
        self.geometry_net = geometry
        self.appearance_net = appearance
        self.head = head
        self.metadata = dict(metadata)
        for module in (geometry, appearance, head):
            module.eval()

    @property
    def curve(self):
        return self.metadata.get("curve", [])

    @property
    def softness(self):
        """The softness reached at the end of the annealing schedule."""
        config = self.metadata.get("config", {}).get("stage1", {})
        anneal = config.get("anneal_at", [])
        return self.metadata["softness"] * 0.5 ** len(anneal)

    @property
    def resolution(self):
        return (self.metadata["uv_resolution"],) * 2

    def geometry(self, pose):
        with torch.no_grad():
            return build_geometry(self.geometry_net, self.body, pose)

    def appearance(self, geometry):
        with torch.no_grad():
            return extract_appearance(
                self.appearance_net, self.body, geometry, self.resolution
            )

    def render(self, geometry, camera, appearance=None):
        if appearance is None:
            appearance = self.appearance(geometry)
        with torch.no_grad():
            return render_explicit(
                self.body, geometry, appearance, camera, self.head, self.softness
            )

    def save(self, path):
        tensors = {}
        tensors.update(state_tensors("geometry", self.geometry_net))
        tensors.update(state_tensors("appearance", self.appearance_net))
        tensors.update(state_tensors("head", self.head))
        metadata = dict(self.metadata)
        metadata.update(
            {
                "kind": self.KIND,
                "joint_count": self.body.joint_count,
                "vertex_count": self.body.vertex_count,
                "hidden": list(self.geometry_net.hidden),
                "feature_channels": self.appearance_net.out_channels,
                "unet_channels": self.appearance_net.base_channels,
                "unet_depth": self.appearance_net.depth,
                "head_channels": self.head.conv.out_channels,
            }
        )
        save_checkpoint(path, tensors, metadata)

    @classmethod
    def load(cls, path, body):
        tensors, metadata = load_checkpoint(path, "stage 1 checkpoint")
        if metadata.get("kind") != cls.KIND:
            raise CorruptArtifactError(path, "not a stage 1 checkpoint")
        if metadata["vertex_count"] != body.vertex_count:
            raise CorruptArtifactError(
                path,
                "trained for %d vertices, body has %d"
                % (metadata["vertex_count"], body.vertex_count),
            )
        geometry = GeometryNet(metadata["joint_count"], metadata["vertex_count"], metadata["hidden"])
        appearance = AppearanceNet(
            metadata["feature_channels"], metadata["unet_channels"], metadata["unet_depth"]
        )
        head = ConvHead(metadata["feature_channels"], metadata["head_channels"])
        load_module_state(geometry, "geometry", tensors, path)
        load_module_state(appearance, "appearance", tensors, path)
        load_module_state(head, "head", tensors, path)
        return cls(body, geometry, appearance, head, metadata)
