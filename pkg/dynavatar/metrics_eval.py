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

Evaluation metrics and the ablation harness.

    ssim(a, b)            Gaussian-window SSIM (11x11, sigma 1.5, k1 0.01, k2 0.03, L 1)
    optical_flow(a, b)    Horn-Schunck, 100 Jacobi iterations, alpha 1 on 0..255 grayscale
    tof(va, vb)           mean endpoint error between the two videos' flows
    chamfer(ma, mb)       symmetric mean nearest-point distance of area-weighted samples

tOF values are only comparable between runs of this package; the flow
estimator and its constants are fixed here for that reason. LPIPS needs a
pretrained network and is reported as unsupported.

"""

__all__ = [
    "LPIPS_UNSUPPORTED",
    "ABLATION_ORDER",
    "ssim",
    "optical_flow",
    "tof",
    "chamfer",
    "mask_iou",
    "EvalReport",
    "evaluate_variant",
    "run_ablation",
    "DisambiguationResult",
    "motion_disambiguation",
]

import csv
from dataclasses import dataclass, field
import json
import logging
import os

import numpy as np
import scipy.ndimage
from scipy.spatial import cKDTree
from skimage.color import rgb2gray
from skimage.metrics import structural_similarity

from .config import config_to_dict
from .errors import InvalidInputError, MissingArtifactError
from .explicit_stage import Stage1Checkpoint
from .mesh import TriangleMesh
from .motion_stage import Stage2Checkpoint, Variant, animate

_log = logging.getLogger(__name__)

LPIPS_UNSUPPORTED = "unsupported (pretrained dependency)"
ABLATION_ORDER = (Variant.stage1_only, Variant.no_stage1, Variant.full)
METRICS = ("ssim", "tof", "chamfer")

_AVERAGE_KERNEL = np.array(
    [[1 / 12, 1 / 6, 1 / 12], [1 / 6, 0.0, 1 / 6], [1 / 12, 1 / 6, 1 / 12]]
)
_KERNEL_X = np.array([[-1.0, 1.0], [-1.0, 1.0]]) * 0.25
_KERNEL_Y = np.array([[-1.0, -1.0], [1.0, 1.0]]) * 0.25
_KERNEL_T = np.ones((2, 2)) * 0.25


# ===================================================
# Image metrics
# ===================================================


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidInputError("image shapes differ: %r != %r" % (a.shape, b.shape))
    if a.ndim not in (2, 3):
        raise InvalidInputError("expected an H x W or H x W x C image, got %r" % (a.shape,))
    return a, b


def ssim(a, b):
    """Mean SSIM over 11x11 Gaussian windows; color images average their channels."""
    a, b = _check_pair(a, b)
    for image in (a, b):
        if image.size and (image.min() < 0.0 or image.max() > 1.0):
            raise InvalidInputError("ssim expects values in [0, 1]")
    return float(
        structural_similarity(
            a,
            b,
            data_range=1.0,
            gaussian_weights=True,
            sigma=1.5,
            use_sample_covariance=False,
            K1=0.01,
            K2=0.03,
            channel_axis=-1 if a.ndim == 3 else None,
        )
    )


def _intensity(image):
    if image.ndim == 3:
        image = rgb2gray(image[..., :3]) if image.shape[-1] >= 3 else image[..., 0]
    return image * 255.0


def optical_flow(prev, next, alpha=1.0, iterations=100):
    """Horn-Schunck flow from prev to next: H x W x 2 of (x, y) displacements in pixels."""
    prev, next = _check_pair(prev, next)
    im1 = _intensity(prev)
    im2 = _intensity(next)
    fx = scipy.ndimage.convolve(im1, _KERNEL_X) + scipy.ndimage.convolve(im2, _KERNEL_X)
    fy = scipy.ndimage.convolve(im1, _KERNEL_Y) + scipy.ndimage.convolve(im2, _KERNEL_Y)
    ft = scipy.ndimage.convolve(im1, _KERNEL_T) + scipy.ndimage.convolve(im2, -_KERNEL_T)
    u = np.zeros_like(im1)
    v = np.zeros_like(im1)
    denominator = alpha**2 + fx**2 + fy**2
    for _ in range(iterations):
        u_avg = scipy.ndimage.convolve(u, _AVERAGE_KERNEL)
        v_avg = scipy.ndimage.convolve(v, _AVERAGE_KERNEL)
        der = (fx * u_avg + fy * v_avg + ft) / denominator
        u = u_avg - fx * der
        v = v_avg - fy * der
    return np.stack([u, v], axis=-1)


def _flows(video):
    return [optical_flow(video[t], video[t + 1]) for t in range(len(video) - 1)]


def frame_tof(video_a, video_b):
    """Endpoint error per consecutive frame pair."""
    if len(video_a) != len(video_b):
        raise InvalidInputError(
            "videos have %d and %d frames" % (len(video_a), len(video_b))
        )
    errors = []
    for flow_a, flow_b in zip(_flows(video_a), _flows(video_b)):
        errors.append(float(np.linalg.norm(flow_a - flow_b, axis=-1).mean()))
    return errors


def tof(video_a, video_b):
    errors = frame_tof(video_a, video_b)
    if not errors:
        _log.warning("tof: fewer than two frames; no frame pairs to compare")
        return 0.0
    return float(np.mean(errors))


def chamfer(mesh_a, mesh_b, samples=10000, seed=0):
    """Symmetric mean nearest-point distance; both meshes are sampled with the same seed."""
    for m in (mesh_a, mesh_b):
        if m.is_empty:
            raise InvalidInputError("chamfer distance of an empty mesh")
    points_a = mesh_a.sample_surface(samples, np.random.default_rng(seed))
    points_b = mesh_b.sample_surface(samples, np.random.default_rng(seed))
    a_to_b, _ = cKDTree(points_b).query(points_a)
    b_to_a, _ = cKDTree(points_a).query(points_b)
    return 0.5 * (float(a_to_b.mean()) + float(b_to_a.mean()))


def mask_iou(predicted, target):
    predicted = np.asarray(predicted, dtype=bool)
    target = np.asarray(target, dtype=bool)
    union = (predicted | target).sum()
    if union == 0:
        return 1.0
    return float((predicted & target).sum() / union)


# ===================================================
# Reports
# ===================================================


def _mean(values):
    present = [v for v in values if v is not None]
    return float(np.mean(present)) if present else None


@dataclass
class EvalReport:
    """Per-frame metrics of one variant on the held-out frames.

    rows are dicts {"frame", "sequence", "ssim", "tof", "chamfer", "iou"}; a
    metric that doesn't apply to a frame (tOF on a sequence's first frame,
    Chamfer on an empty surface) is None. The aggregate is the mean of the
    present per-frame values.

    """

    variant: str
    rows: list
    config: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)
    metrics: tuple = METRICS

    def aggregate(self):
        result = {name: _mean([row.get(name) for row in self.rows]) for name in self.metrics}
        result["lpips"] = LPIPS_UNSUPPORTED
        return result

    def to_dict(self):
        return {
            "variant": self.variant,
            "metrics": list(self.metrics),
            "frames": self.rows,
            "aggregate": self.aggregate(),
            "config": self.config,
            "provenance": self.provenance,
        }

    def write(self, path):
        """Writes the report as JSON; an existing report is never replaced."""
        if os.path.exists(path):
            raise InvalidInputError("evaluation report %s already exists" % path)
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        with open(path, "x", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, sort_keys=True, indent=2)
            f.write("\n")

    def write_csv(self, path):
        columns = ["frame", "sequence"] + list(self.metrics) + ["lpips"]
        with open(path, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(columns)
            for row in self.rows:
                values = [row.get(c) for c in columns[:-1]] + [LPIPS_UNSUPPORTED]
                writer.writerow(["" if v is None else v for v in values])

    @classmethod
    def read(cls, path):
        if not os.path.exists(path):
            raise MissingArtifactError(path, "evaluation report")
        with open(path, encoding="utf-8") as f:
            data = json.load(f)
        return cls(
            data["variant"],
            data["frames"],
            data.get("config", {}),
            data.get("provenance", {}),
            tuple(data.get("metrics", METRICS)),
        )


# ===================================================
# Variant evaluation
# ===================================================


def _test_sequences(dataset, frame_indices):
    wanted = set(frame_indices)
    groups = []
    for info in dataset.sequences:
        if info.split != "test":
            continue
        frames = [i for i in range(info.start, info.stop) if i in wanted]
        if frames:
            groups.append((info.name, frames))
    return groups


def predict_sequence(dataset, frames, stage1, stage2, config, variant, with_images=True):
    """(meshes, images) predicted by a variant for consecutive frames of one sequence."""
    body = dataset.body
    poses = [dataset.frames[i].pose for i in frames]
    camera = dataset.frames[frames[0]].camera
    if variant == Variant.stage1_only:
        meshes, images = [], []
        for pose in poses:
            geometry = stage1.geometry(pose)
            meshes.append(TriangleMesh(geometry.numpy(), body.faces))
            if with_images:
                rendered = stage1.render(geometry, camera)
                images.append(np.clip(rendered.image.detach().numpy(), 0.0, 1.0))
        return meshes, images
    if stage2 is None:
        raise InvalidInputError("variant %s needs a stage 2 checkpoint" % variant.short_name)
    animated = animate(
        body, poses, stage1, stage2, camera, config, variant, with_images=with_images
    )
    meshes = [frame.mesh for frame in animated]
    images = [np.clip(frame.image, 0.0, 1.0) for frame in animated] if with_images else []
    return meshes, images


def evaluate_variant(
    dataset, stage1, stage2, config, variant, frame_indices=None, provenance=None
):
    """EvalReport of one variant over the held-out frames (all test frames by default)."""
    ev = config.evaluation
    if frame_indices is None:
        frame_indices = dataset.split_indices("test")
    rows = []
    for name, frames in _test_sequences(dataset, frame_indices):
        _log.info("evaluating %s on %s (%d frames)", variant.short_name, name, len(frames))
        meshes, images = predict_sequence(dataset, frames, stage1, stage2, config, variant)
        truth = [dataset.frames[i].rgb for i in frames]
        pair_errors = frame_tof(images, truth) if "tof" in ev.metrics else []
        for k, index in enumerate(frames):
            record = dataset.frames[index]
            row = {"frame": index, "sequence": name}
            if "ssim" in ev.metrics:
                row["ssim"] = ssim(images[k], record.rgb)
            if "tof" in ev.metrics:
                row["tof"] = pair_errors[k - 1] if k > 0 else None
            if "chamfer" in ev.metrics:
                if meshes[k].is_empty:
                    _log.warning("frame %d: empty surface, chamfer skipped", index)
                    row["chamfer"] = None
                else:
                    gt = TriangleMesh(record.gt_surface, dataset.body.faces)
                    row["chamfer"] = chamfer(meshes[k], gt, ev.chamfer_samples, config.seed)
            row["iou"] = mask_iou(images[k].max(axis=-1) > 0, record.mask)
            rows.append(row)
    return EvalReport(
        variant.short_name,
        rows,
        config_to_dict(config),
        dict(provenance or {}),
        tuple(m for m in METRICS if m in ev.metrics),
    )


def run_ablation(dataset, config, stage1_path, stage2_paths, provenance=None):
    """Reports for stage1_only, no_stage1 and full, in that order.

    stage2_paths maps Variant.no_stage1 and Variant.full to their Stage-2
    checkpoint files. A missing checkpoint is reported with the variant that
    needs it.

    """
    required = [(Variant.stage1_only, stage1_path)]
    required += [(v, stage2_paths.get(v)) for v in (Variant.no_stage1, Variant.full)]
    for variant, path in required:
        if not path or not os.path.exists(path):
            raise MissingArtifactError(
                path or "<unset>", "checkpoint for variant %s" % variant.short_name
            )
    body = dataset.body
    stage1 = Stage1Checkpoint.load(stage1_path, body)
    reports = []
    for variant in ABLATION_ORDER:
        stage2 = None
        if variant != Variant.stage1_only:
            stage2 = Stage2Checkpoint.load(stage2_paths[variant], body)
        reports.append(
            evaluate_variant(dataset, stage1, stage2, config, variant, provenance=provenance)
        )
    return reports


@dataclass
class DisambiguationResult:
    variant: str
    # one entry per paired final frame: frame, matched and mismatched distances
    outcomes: list

    @property
    def success_rate(self):
        if not self.outcomes:
            return 0.0
        return sum(o["matched"] < o["mismatched"] for o in self.outcomes) / len(self.outcomes)

    def to_dict(self):
        return {
            "variant": self.variant,
            "outcomes": self.outcomes,
            "success_rate": self.success_rate,
        }


def _final_surface(dataset, final_index, stage1, stage2, config, variant):
    start = dataset.sequence_of(final_index).start
    first = max(start, final_index - stage2.history + 1)
    frames = list(range(first, final_index + 1))
    meshes, _ = predict_sequence(
        dataset, frames, stage1, stage2, config, variant, with_images=False
    )
    return meshes[-1]


def motion_disambiguation(dataset, stage1, stage2, config, variant=Variant.full):
    """Checks whether predictions at identical final poses follow their own history.

    For every test pair ending in the same pose after different histories, the
    prediction at each final frame should be closer (Chamfer) to its own
    ground-truth surface than to the other sequence's.

    """
    ev = config.evaluation
    outcomes = []
    for moving, settled in dataset.paired_finals():
        truth = {
            i: TriangleMesh(dataset.frames[i].gt_surface, dataset.body.faces)
            for i in (moving, settled)
        }
        for own, other in ((moving, settled), (settled, moving)):
            predicted = _final_surface(dataset, own, stage1, stage2, config, variant)
            if predicted.is_empty:
                _log.warning("frame %d: empty surface counts as a failure", own)
                outcomes.append({"frame": own, "matched": float("inf"), "mismatched": 0.0})
                continue
            outcomes.append(
                {
                    "frame": own,
                    "matched": chamfer(predicted, truth[own], ev.chamfer_samples, config.seed),
                    "mismatched": chamfer(
                        predicted, truth[other], ev.chamfer_samples, config.seed
                    ),
                }
            )
    result = DisambiguationResult(variant.short_name, outcomes)
    _log.info(
        "motion disambiguation (%s): %.0f%% of %d frames",
        variant.short_name,
        100 * result.success_rate,
        len(outcomes),
    )
    return result
