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

Synthetic ground truth with motion-dependent clothing.

A band of the body (the "skirt") carries a scalar offset along the outward
normal. The offset of each vertex is a damped spring pulled toward a
pose-dependent rest offset, so after a fast movement the cloth lags behind
and the same pose can show different geometry depending on how it was
reached.

Motion is described by MotionScripts: sequences of segments, each a base pose
plus sinusoids anchored at the start or at the end of the segment (the
sinusoids vanish at the anchor frame, so a segment anchored at its end
finishes exactly on its base pose).

"""

__all__ = [
    "TAU_GAP",
    "ClothConfig",
    "SkirtRestOffset",
    "skirt_cloth_config",
    "ClothTrajectory",
    "simulate_offsets",
    "oscillator_energy",
    "SinusoidComponent",
    "MotionSegment",
    "MotionScript",
    "FrameRecord",
    "SequenceInfo",
    "Dataset",
    "procedural_albedo",
    "render_ground_truth",
    "generate_sequence",
    "random_script",
    "paired_scripts",
    "default_scripts",
    "generate_dataset",
    "write_dataset",
    "read_dataset",
]

from dataclasses import dataclass, field
import json
import logging
import math
import os
import struct

import numpy as np
import torch

from qcore.caching import cached_per_instance

from . import mesh
from .body_model import (
    CameraModel,
    PoseState,
    load_body_model,
    pose_mesh,
    save_body_model,
)
from .diff_renderer import front_facing, rasterize_soft, read_png, write_png
from .errors import (
    CorruptArtifactError,
    InvalidInputError,
    MissingArtifactError,
    SimulationError,
)

_log = logging.getLogger(__name__)

# Chamfer distance that the final frames of every default paired test sequence
# exceed; obtained by simulating the default pairs and rounding down
TAU_GAP = 0.005

DATASET_FORMAT_VERSION = 1
GT_MAGIC = b"DGT1"
_GT_HEADER = struct.Struct("<4sII")

_LIGHT_DIRECTION = np.array([0.3, 0.5, 1.0]) / np.linalg.norm([0.3, 0.5, 1.0])
_AMBIENT = 0.3

_SKIRT_JOINTS = ("left_hip", "left_knee", "right_hip", "right_knee")


# ===================================================
# Cloth dynamics
# ===================================================


@dataclass
class ClothConfig:
    """Spring parameters of the cloth band.

    rest_offset_fn maps a PoseState to V rest offsets (meters, along the
    outward normal); affected_vertex_mask selects the vertices that move.

    """

    stiffness: float
    damping: float
    affected_vertex_mask: np.ndarray
    rest_offset_fn: object
    dt: float = 1.0 / 30.0

    def __post_init__(self):
        self.affected_vertex_mask = np.asarray(self.affected_vertex_mask, dtype=bool)
        if not self.stiffness > 0:
            raise InvalidInputError("stiffness must be positive")
        if not self.damping >= 0:
            raise InvalidInputError("damping must be nonnegative")
        if not self.dt > 0:
            raise InvalidInputError("dt must be positive")

    @property
    def is_underdamped(self):
        return self.damping**2 <= 4.0 * self.stiffness

    @property
    def period(self):
        return 2.0 * math.pi / math.sqrt(self.stiffness)

    def to_dict(self):
        describe = getattr(self.rest_offset_fn, "to_dict", None)
        return {
            "stiffness": self.stiffness,
            "damping": self.damping,
            "dt": self.dt,
            "affected_vertex_count": int(self.affected_vertex_mask.sum()),
            "rest_offset": describe() if describe else repr(self.rest_offset_fn),
        }


class SkirtRestOffset:
    """Rest offset that widens the lower band as the legs move apart.

    offset(v) = weight(v) * (base + gain * sum of |hip and knee angles|), where
    weight ramps from 0 at the top of the band to 1 a ramp length below it.

    """

    def __init__(self, body, band=(-0.85, -0.2), base=0.01, gain=0.04, ramp=0.15):
        self.band = tuple(band)
        self.base = base
        self.gain = gain
        self.ramp = ramp
        heights = body.template_vertices[:, 1]
        lo, hi = self.band
        inside = (heights >= lo) & (heights <= hi)
        self.weights = np.where(inside, np.clip((hi - heights) / ramp, 0.0, 1.0), 0.0)
        self.joints = [
            body.joint_names.index(name)
            for name in _SKIRT_JOINTS
            if name in body.joint_names
        ]

    def spread(self, pose):
        return float(np.linalg.norm(pose.joint_rotations[self.joints], axis=1).sum())

    def __call__(self, pose):
        return self.weights * (self.base + self.gain * self.spread(pose))

    def to_dict(self):
        return {
            "kind": "skirt",
            "band": list(self.band),
            "base": self.base,
            "gain": self.gain,
            "ramp": self.ramp,
        }


def skirt_cloth_config(
    body,
    stiffness=110.0,
    damping=2.0,
    dt=1.0 / 30.0,
    band=(-0.85, -0.2),
    base=0.01,
    gain=0.04,
):
    rest = SkirtRestOffset(body, band=band, base=base, gain=gain)
    return ClothConfig(stiffness, damping, rest.weights > 0, rest, dt)


@dataclass
class ClothTrajectory:
    """Per-frame cloth state: scalar offsets, velocities and rest offsets (T x V)."""

    offsets: np.ndarray
    velocities: np.ndarray
    rest: np.ndarray
    normals: np.ndarray  # T x V x 3, outward normals of the posed body

    @property
    def frame_count(self):
        return len(self.offsets)

    def vectors(self):
        """The offset fields as T x V x 3 displacements along the normals."""
        return self.offsets[..., None] * self.normals


def simulate_offsets(body, pose_sequence, cfg):
    """Integrates the cloth springs over a pose sequence.

    Each affected vertex obeys x'' = -k (x - x_rest(pose_t)) - c x' with
    semi-implicit Euler: the velocity is updated first and the new velocity
    moves the offset. The state starts at rest with zero velocity.

    """
    if not pose_sequence:
        raise InvalidInputError("pose sequence is empty")
    mask = cfg.affected_vertex_mask
    if mask.shape != (body.vertex_count,):
        raise InvalidInputError("affected_vertex_mask must have one entry per vertex")
    count = len(pose_sequence)
    offsets = np.zeros((count, body.vertex_count))
    velocities = np.zeros_like(offsets)
    rest = np.zeros_like(offsets)
    normals = np.zeros((count, body.vertex_count, 3))
    k, c, dt = cfg.stiffness, cfg.damping, cfg.dt
    weld = body.weld()
    x = v = None
    for t, pose in enumerate(pose_sequence):
        if not pose.is_finite():
            raise SimulationError("non-finite pose at frame %d" % t)
        target = np.where(mask, np.asarray(cfg.rest_offset_fn(pose), dtype=np.float64), 0.0)
        if t == 0:
            x = target.copy()
            v = np.zeros_like(x)
        else:
            with np.errstate(over="ignore", invalid="ignore"):
                v = v + dt * (-k * (x - target) - c * v)
                x = x + dt * v
            if not (np.isfinite(x).all() and np.isfinite(v).all()):
                raise SimulationError(
                    "cloth simulation diverged at frame %d; reduce dt or stiffness" % t
                )
        offsets[t] = x
        velocities[t] = v
        rest[t] = target
        normals[t] = mesh.vertex_normals(pose_mesh(body, pose), body.faces, weld)
    return ClothTrajectory(offsets, velocities, rest, normals)


def oscillator_energy(offset, velocity, rest, stiffness, dt):
    """Quadratic invariant of the semi-implicit Euler spring.

    For an undamped spring with fixed rest offset this quantity is exactly
    conserved by the integrator; damping makes it decay.

    """
    x = np.asarray(offset) - np.asarray(rest)
    v = np.asarray(velocity)
    return v * v + stiffness * x * x - dt * stiffness * x * v


# ===================================================
# Motion scripts
# ===================================================


@dataclass(frozen=True)
class SinusoidComponent:
    joint: str
    axis: int
    amplitude: float
    frequency: float
    phase: float = 0.0

    def to_dict(self):
        return {
            "joint": self.joint,
            "axis": self.axis,
            "amplitude": self.amplitude,
            "frequency": self.frequency,
            "phase": self.phase,
        }


@dataclass(frozen=True)
class MotionSegment:
    """frames frames of base pose plus sinusoids.

    base maps joint names to axis-angle vectors. With anchor="start" the
    sinusoid clock is 0 at the first frame, with anchor="end" at the last.

    """

    frames: int
    base: dict = field(default_factory=dict)
    components: tuple = ()
    anchor: str = "start"

    def __post_init__(self):
        if self.frames < 1:
            raise InvalidInputError("a motion segment needs at least one frame")
        if self.anchor not in ("start", "end"):
            raise InvalidInputError("anchor must be 'start' or 'end'")

    def rotations(self, joint_names, dt):
        index = {name: k for k, name in enumerate(joint_names)}
        base = np.zeros((len(joint_names), 3))
        for name, rotvec in self.base.items():
            if name not in index:
                raise InvalidInputError("unknown joint %r" % (name,))
            base[index[name]] = rotvec
        out = np.repeat(base[None], self.frames, axis=0)
        frames = np.arange(self.frames)
        if self.anchor == "end":
            frames = frames - (self.frames - 1)
        clock = frames * dt
        for comp in self.components:
            if comp.joint not in index:
                raise InvalidInputError("unknown joint %r" % (comp.joint,))
            out[:, index[comp.joint], comp.axis] += comp.amplitude * np.sin(
                2.0 * math.pi * comp.frequency * clock + comp.phase
            )
        return out

    def to_dict(self):
        return {
            "frames": self.frames,
            "base": {k: list(map(float, v)) for k, v in sorted(self.base.items())},
            "components": [c.to_dict() for c in self.components],
            "anchor": self.anchor,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            frames=data["frames"],
            base={k: tuple(v) for k, v in data["base"].items()},
            components=tuple(SinusoidComponent(**c) for c in data["components"]),
            anchor=data["anchor"],
        )


@dataclass(frozen=True)
class MotionScript:
    name: str
    segments: tuple
    dt: float = 1.0 / 30.0

    @property
    def frame_count(self):
        return sum(s.frames for s in self.segments)

    def poses(self, body):
        rotations = np.concatenate(
            [s.rotations(body.joint_names, self.dt) for s in self.segments]
        )
        return [
            PoseState(r, np.zeros(3), timestamp=t) for t, r in enumerate(rotations)
        ]

    def to_dict(self):
        return {
            "name": self.name,
            "dt": self.dt,
            "segments": [s.to_dict() for s in self.segments],
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            data["name"],
            tuple(MotionSegment.from_dict(s) for s in data["segments"]),
            data["dt"],
        )


def random_script(rng, name, frames, dt=1.0 / 30.0, segment_frames=(30, 60)):
    """A training script of random swings and hold-then-jump segments."""
    segments = []
    remaining = frames
    while remaining > 0:
        length = min(remaining, int(rng.integers(*segment_frames, endpoint=True)))
        base = {
            joint: tuple(rng.uniform(-0.4, 0.4, size=3) * np.array([1.0, 0.3, 1.0]))
            for joint in _SKIRT_JOINTS
            if rng.random() < 0.6
        }
        components = tuple(
            SinusoidComponent(
                joint=joint,
                axis=int(rng.choice([0, 2])),
                amplitude=float(rng.uniform(0.1, 0.5)),
                frequency=float(rng.uniform(0.3, 1.5)),
            )
            for joint in _SKIRT_JOINTS + ("spine", "left_shoulder", "right_shoulder")
            if rng.random() < 0.4
        )
        anchor = "end" if rng.random() < 0.5 else "start"
        segments.append(MotionSegment(length, base, components, anchor))
        remaining -= length
    return MotionScript(name, tuple(segments), dt)


def paired_scripts(
    name, target_pose, far_pose, hold_frames, dt=1.0 / 30.0, settled_frames=None
):
    """Two scripts that end in target_pose after different histories.

    The first holds far_pose and jumps to target_pose on its last frame; the
    second holds target_pose throughout (settled_frames frames, hold_frames + 1
    by default), so its cloth is settled at the end.

    """
    moving = MotionScript(
        "%s_a" % name,
        (MotionSegment(hold_frames, far_pose), MotionSegment(1, target_pose)),
        dt,
    )
    if settled_frames is None:
        settled_frames = hold_frames + 1
    settled = MotionScript(
        "%s_b" % name, (MotionSegment(settled_frames, target_pose),), dt
    )
    return moving, settled


def default_scripts(seed, train_frames=600, test_frames=100, dt=1.0 / 30.0):
    """(train scripts, test scripts); test scripts come in motion-matched pairs.

    The test scripts add up to exactly test_frames, which must be 0 or at least
    4 (each pair needs a moving sequence of two frames and its settled twin).
    Frames that do not divide evenly go to the last sequences.

    """
    if test_frames < 0 or 0 < test_frames < 4:
        raise InvalidInputError(
            "a test split needs 0 or at least 4 frames, got %d" % test_frames
        )
    rng = np.random.default_rng(seed)
    train = []
    remaining = train_frames
    index = 0
    while remaining > 0:
        length = min(remaining, 100)
        train.append(random_script(rng, "train_%02d" % index, length, dt))
        remaining -= length
        index += 1

    test = []
    pair_frames = 50
    pairs = max(1, test_frames // pair_frames) if test_frames else 0
    sequences = 2 * pairs
    base, extra = divmod(test_frames, sequences) if pairs else (0, 0)
    lengths = [base + (k >= sequences - extra) for k in range(sequences)]
    for p in range(pairs):
        target = {
            "left_hip": (float(rng.uniform(0.0, 0.1)), 0.0, 0.05),
            "right_hip": (float(rng.uniform(0.0, 0.1)), 0.0, -0.05),
        }
        far = {
            "left_hip": (0.6, 0.0, float(rng.uniform(0.3, 0.5))),
            "left_knee": (-0.6, 0.0, 0.0),
            "right_hip": (-0.4, 0.0, -float(rng.uniform(0.3, 0.5))),
            "right_knee": (-0.5, 0.0, 0.0),
        }
        test.extend(
            paired_scripts(
                "test_%02d" % p,
                target,
                far,
                lengths[2 * p] - 1,
                dt,
                settled_frames=lengths[2 * p + 1],
            )
        )
    return train, test


# ===================================================
# Ground-truth rendering
# ===================================================


def procedural_albedo(body):
    """Per-vertex colors: a hue per dominant joint modulated by horizontal stripes."""
    hues = np.linspace(0.0, 1.0, body.joint_count, endpoint=False)
    region = np.argmax(body.skin_weights, axis=1)
    hue = hues[region]
    # hsv -> rgb at saturation 0.6, value 0.9
    k = (np.array([5.0, 3.0, 1.0])[None, :] + hue[:, None] * 6.0) % 6.0
    rgb = 0.9 - 0.9 * 0.6 * np.clip(np.minimum(k, 4.0 - k), 0.0, 1.0)
    stripes = 0.5 + 0.5 * (np.sin(2.0 * math.pi * body.template_vertices[:, 1] / 0.08) > 0)
    return rgb * (0.65 + 0.35 * stripes)[:, None]


def render_ground_truth(body, vertices, camera, albedo=None):
    """Hard-rasterized Lambertian image, binary mask and camera-frame normal map."""
    if albedo is None:
        albedo = procedural_albedo(body)
    vertices = np.asarray(vertices, dtype=np.float64)
    normals = mesh.vertex_normals(vertices, body.faces, body.weld())
    shade = _AMBIENT + (1.0 - _AMBIENT) * np.clip(normals @ _LIGHT_DIRECTION, 0.0, 1.0)
    with torch.no_grad():
        out = rasterize_soft(
            torch.as_tensor(vertices),
            body.faces,
            torch.as_tensor(albedo * shade[:, None]),
            camera,
            weld=body.weld(),
        )
    mask = out.coverage
    rgb = np.clip(out.head_rgb.numpy(), 0.0, 1.0) * mask[..., None]
    normal_map = out.normal_map.numpy() * mask[..., None]
    return rgb, mask, normal_map


@dataclass(eq=False)
class FrameRecord:
    pose: PoseState
    camera: CameraModel
    rgb: np.ndarray
    mask: np.ndarray
    normal_map: np.ndarray
    gt_surface: np.ndarray
    sequence: str = ""
    index_in_sequence: int = 0


def generate_sequence(body, motion_script, cloth_cfg, camera, seed=0, pixel_noise=0.0):
    """Simulates and renders a motion script; deterministic given seed."""
    poses = motion_script.poses(body)
    trajectory = simulate_offsets(body, poses, cloth_cfg)
    vectors = trajectory.vectors()
    rng = np.random.default_rng(seed)
    albedo = procedural_albedo(body)
    frames = []
    for t, pose in enumerate(poses):
        surface = pose_mesh(body, pose) + vectors[t]
        if not front_facing(surface, body.faces, camera).any():
            _log.warning(
                "%s frame %d: every face points away from the camera",
                motion_script.name,
                t,
            )
        rgb, mask, normal_map = render_ground_truth(body, surface, camera, albedo)
        if pixel_noise:
            noise = rng.normal(0.0, pixel_noise, size=rgb.shape)
            rgb = np.clip(rgb + noise * mask[..., None], 0.0, 1.0)
        frames.append(
            FrameRecord(
                pose=pose,
                camera=camera,
                rgb=rgb,
                mask=mask,
                normal_map=normal_map,
                gt_surface=surface,
                sequence=motion_script.name,
                index_in_sequence=t,
            )
        )
    return frames


# ===================================================
# Datasets
# ===================================================


@dataclass(frozen=True)
class SequenceInfo:
    name: str
    split: str
    start: int
    frame_count: int
    script: MotionScript

    @property
    def stop(self):
        return self.start + self.frame_count

    def to_dict(self):
        return {
            "name": self.name,
            "split": self.split,
            "start": self.start,
            "frame_count": self.frame_count,
            "script": self.script.to_dict(),
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            data["name"],
            data["split"],
            data["start"],
            data["frame_count"],
            MotionScript.from_dict(data["script"]),
        )


class Dataset:
    """Frames of several sequences with their body model and provenance."""

    def __init__(self, body, frames, sequences, seed, cloth=None, config=None):
        self.body = body
        self.frames = list(frames)
        self.sequences = list(sequences)
        self.seed = seed
        self.cloth = dict(cloth or {})
        self.config = dict(config or {})

    def __len__(self):
        return len(self.frames)

    @cached_per_instance()
    def sequence_of(self, frame_index):
        for info in self.sequences:
            if info.start <= frame_index < info.stop:
                return info
        raise InvalidInputError("frame %d is not in any sequence" % frame_index)

    def split_indices(self, split):
        return [
            i
            for info in self.sequences
            if info.split == split
            for i in range(info.start, info.stop)
        ]

    def history(self, frame_index, length):
        """Frame indices newest first, padded with the sequence's first frame."""
        start = self.sequence_of(frame_index).start
        return [max(frame_index - k, start) for k in range(length)]

    def paired_finals(self):
        """(index of moving final frame, index of settled final frame) per test pair."""
        tests = {info.name: info for info in self.sequences if info.split == "test"}
        pairs = []
        for name in sorted(tests):
            if name.endswith("_a") and name[:-2] + "_b" in tests:
                pairs.append(
                    (tests[name].stop - 1, tests[name[:-2] + "_b"].stop - 1)
                )
        return pairs


def generate_dataset(
    body,
    camera,
    seed,
    train_frames=600,
    test_frames=100,
    cloth_cfg=None,
    config=None,
    pixel_noise=0.0,
):
    if cloth_cfg is None:
        cloth_cfg = skirt_cloth_config(body)
    train, test = default_scripts(seed, train_frames, test_frames, cloth_cfg.dt)
    frames = []
    sequences = []
    for split, scripts in (("train", train), ("test", test)):
        for script in scripts:
            records = generate_sequence(
                body,
                script,
                cloth_cfg,
                camera,
                seed=seed + len(sequences),
                pixel_noise=pixel_noise,
            )
            sequences.append(
                SequenceInfo(script.name, split, len(frames), len(records), script)
            )
            frames.extend(records)
            _log.info("generated %s (%d frames)", script.name, len(records))
    return Dataset(body, frames, sequences, seed, cloth_cfg.to_dict(), config)


def _frame_name(index):
    return "{:06d}.png".format(index)


def write_dataset(dataset, directory):
    """Writes frames/, masks/, normals/, meta.json, gt_surfaces.bin and body.json."""
    for sub in ("frames", "masks", "normals"):
        os.makedirs(os.path.join(directory, sub), exist_ok=True)
    for i, frame in enumerate(dataset.frames):
        name = _frame_name(i)
        write_png(os.path.join(directory, "frames", name), frame.rgb)
        write_png(os.path.join(directory, "masks", name), frame.mask.astype(np.float64))
        encoded = np.where(frame.mask[..., None], frame.normal_map * 0.5 + 0.5, 0.5)
        write_png(os.path.join(directory, "normals", name), encoded)
    save_body_model(dataset.body, os.path.join(directory, "body.json"))
    meta = {
        "format_version": DATASET_FORMAT_VERSION,
        "seed": dataset.seed,
        "cloth": dataset.cloth,
        "config": dataset.config,
        "sequences": [s.to_dict() for s in dataset.sequences],
        "frames": [
            {
                "pose": f.pose.to_dict(),
                "camera": f.camera.to_dict(),
                "sequence": f.sequence,
                "index_in_sequence": f.index_in_sequence,
            }
            for f in dataset.frames
        ],
    }
    with open(os.path.join(directory, "meta.json"), "w", encoding="utf-8") as f:
        json.dump(meta, f, sort_keys=True, indent=1)
    surfaces = np.stack([f.gt_surface for f in dataset.frames]).astype("<f4")
    with open(os.path.join(directory, "gt_surfaces.bin"), "wb") as f:
        f.write(_GT_HEADER.pack(GT_MAGIC, len(dataset.frames), dataset.body.vertex_count))
        f.write(surfaces.tobytes())


def _read_surfaces(path, frame_count, vertex_count):
    if not os.path.exists(path):
        raise MissingArtifactError(path, "ground-truth surfaces")
    with open(path, "rb") as f:
        header = f.read(_GT_HEADER.size)
        if len(header) != _GT_HEADER.size:
            raise CorruptArtifactError(path, "truncated header")
        magic, frames, vertices = _GT_HEADER.unpack(header)
        if magic != GT_MAGIC:
            raise CorruptArtifactError(path, "bad magic %r" % (magic,))
        if (frames, vertices) != (frame_count, vertex_count):
            raise CorruptArtifactError(
                path,
                "holds %d frames of %d vertices, expected %d of %d"
                % (frames, vertices, frame_count, vertex_count),
            )
        data = np.frombuffer(f.read(), dtype="<f4")
    if data.size != frames * vertices * 3:
        raise CorruptArtifactError(path, "truncated surface data")
    return data.reshape(frames, vertices, 3).astype(np.float64)


def read_dataset(directory):
    meta_path = os.path.join(directory, "meta.json")
    if not os.path.exists(meta_path):
        raise MissingArtifactError(meta_path, "dataset metadata")
    try:
        with open(meta_path, encoding="utf-8") as f:
            meta = json.load(f)
    except ValueError as e:
        raise CorruptArtifactError(meta_path, str(e))
    if meta.get("format_version") != DATASET_FORMAT_VERSION:
        raise CorruptArtifactError(meta_path, "unsupported format_version")
    body = load_body_model(os.path.join(directory, "body.json"))
    surfaces = _read_surfaces(
        os.path.join(directory, "gt_surfaces.bin"), len(meta["frames"]), body.vertex_count
    )
    frames = []
    for i, entry in enumerate(meta["frames"]):
        name = _frame_name(i)
        paths = [os.path.join(directory, sub, name) for sub in ("frames", "masks", "normals")]
        for path in paths:
            if not os.path.exists(path):
                raise MissingArtifactError(path, "frame image")
        rgb = read_png(paths[0])[..., :3]
        mask = read_png(paths[1]) > 0.5
        if mask.ndim == 3:
            mask = mask[..., 0]
        normal_map = read_png(paths[2])[..., :3] * 2.0 - 1.0
        length = np.linalg.norm(normal_map, axis=-1, keepdims=True)
        normal_map = np.where(mask[..., None], normal_map / np.maximum(length, 1e-12), 0.0)
        frames.append(
            FrameRecord(
                pose=PoseState.from_dict(entry["pose"]),
                camera=CameraModel.from_dict(entry["camera"]),
                rgb=rgb,
                mask=mask,
                normal_map=normal_map,
                gt_surface=surfaces[i],
                sequence=entry["sequence"],
                index_in_sequence=entry["index_in_sequence"],
            )
        )
    sequences = [SequenceInfo.from_dict(s) for s in meta["sequences"]]
    return Dataset(body, frames, sequences, meta["seed"], meta["cloth"], meta["config"])
