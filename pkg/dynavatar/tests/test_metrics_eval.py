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

import csv
import functools
import os
import tempfile

import numpy as np

from qcore.asserts import AssertRaises, assert_eq, assert_ge, assert_in, assert_is, assert_le, assert_lt

from dynavatar.asserts import assert_all_between
from dynavatar.errors import InvalidInputError, MissingArtifactError
from dynavatar.explicit_stage import train_stage1
from dynavatar.mesh import TriangleMesh, icosphere
from dynavatar.metrics_eval import (
    LPIPS_UNSUPPORTED,
    DisambiguationResult,
    EvalReport,
    chamfer,
    evaluate_variant,
    mask_iou,
    motion_disambiguation,
    optical_flow,
    run_ablation,
    ssim,
    tof,
)
from dynavatar.motion_stage import Variant, train_stage2
from dynavatar.testing import slow, tiny_config, tiny_dataset


@functools.cache
def _trained():
    config = tiny_config()
    dataset = tiny_dataset(config)
    stage1 = train_stage1(dataset, tiny_config(stage1={"steps": 1}))
    stage2 = train_stage2(dataset, stage1, tiny_config(stage2={"steps": 1}))
    return dataset, stage1, stage2


def _blob(size=48, center=(24.0, 24.0), sigma=4.0):
    rows, cols = np.mgrid[0:size, 0:size].astype(np.float64)
    return np.exp(-((cols - center[0]) ** 2 + (rows - center[1]) ** 2) / (2 * sigma**2))


def _pattern(shift, size=48, period=16.0):
    rows, cols = np.mgrid[0:size, 0:size].astype(np.float64)
    phase = 2 * np.pi / period
    return 0.5 + 0.4 * np.sin(phase * (cols - shift)) * np.sin(phase * rows)


def _square(z):
    vertices = np.array([[0.0, 0.0, z], [1.0, 0.0, z], [1.0, 1.0, z], [0.0, 1.0, z]])
    return TriangleMesh(vertices, np.array([[0, 1, 2], [0, 2, 3]]))


class TestSSIM:
    def test_identical(self):
        image = np.random.default_rng(0).uniform(size=(32, 32, 3))
        assert_lt(abs(ssim(image, image) - 1.0), 1e-12)

    def test_constant_images(self):
        c1 = 0.01**2
        value = ssim(np.zeros((32, 32)), np.ones((32, 32)))
        assert_lt(abs(value - c1 / (1.0 + c1)), 1e-10)

    def test_symmetric(self):
        rng = np.random.default_rng(1)
        a = rng.uniform(size=(32, 32))
        b = np.clip(a + rng.normal(0.0, 0.1, size=a.shape), 0.0, 1.0)
        assert_lt(abs(ssim(a, b) - ssim(b, a)), 1e-12)
        assert_lt(ssim(a, b), 1.0)

    def test_rejects_bad_input(self):
        with AssertRaises(InvalidInputError):
            ssim(np.zeros((32, 32)), np.zeros((32, 31)))
        with AssertRaises(InvalidInputError):
            ssim(np.zeros((32, 32)), np.full((32, 32), 2.0))


class TestOpticalFlow:
    def test_identical_frames(self):
        image = _blob()
        flow = optical_flow(image, image)
        assert_eq((48, 48, 2), flow.shape)
        assert_lt(float(np.abs(flow).max()), 1e-3)

    def test_constant_frames(self):
        flow = optical_flow(np.full((16, 16), 0.2), np.full((16, 16), 0.7))
        assert_eq(0.0, float(np.abs(flow).max()))

    def test_translated_blob(self):
        before = _blob(center=(24.0, 24.0))
        after = _blob(center=(25.0, 24.0))
        flow = optical_flow(before, after)
        region = before > 0.2
        magnitude = np.linalg.norm(flow, axis=-1)[region].mean()
        assert_ge(magnitude, 0.5)
        assert_le(magnitude, 1.5)

    def test_color_frames(self):
        image = np.stack([_blob()] * 3, axis=-1)
        assert_eq((48, 48, 2), optical_flow(image, image).shape)


class TestTOF:
    def test_same_video(self):
        video = [_pattern(t) for t in range(3)]
        assert_eq(0.0, tof(video, video))

    def test_static_against_moving(self):
        moving = [_pattern(t) for t in range(4)]
        static = [_pattern(0)] * 4
        assert_lt(0.3, tof(static, moving))

    def test_length_mismatch(self):
        with AssertRaises(InvalidInputError):
            tof([_pattern(0)] * 3, [_pattern(0)] * 2)

    def test_single_frame(self):
        assert_eq(0.0, tof([_pattern(0)], [_pattern(1)]))


class TestChamfer:
    def test_same_mesh(self):
        vertices, faces = icosphere(2)
        m = TriangleMesh(vertices, faces)
        assert_eq(0.0, chamfer(m, m, samples=2000))

    def test_parallel_squares(self):
        value = chamfer(_square(0.0), _square(0.1))
        assert_lt(abs(value - 0.1), 0.005)

    def test_concentric_spheres(self):
        vertices, faces = icosphere(4)
        value = chamfer(TriangleMesh(vertices, faces), TriangleMesh(1.1 * vertices, faces))
        assert_lt(abs(value - 0.1), 0.01)

    def test_empty_mesh(self):
        with AssertRaises(InvalidInputError):
            chamfer(TriangleMesh.empty(), _square(0.0))


def test_mask_iou():
    a = np.zeros((4, 4), dtype=bool)
    b = np.zeros((4, 4), dtype=bool)
    assert_eq(1.0, mask_iou(a, b))
    a[0, :2] = True
    b[0, 1:3] = True
    assert_eq(1.0 / 3.0, mask_iou(a, b))


class TestEvalReport:
    def _report(self):
        rows = [
            {"frame": 4, "sequence": "test_00_a", "ssim": 0.5, "tof": None, "chamfer": 0.02, "iou": 0.9},
            {"frame": 5, "sequence": "test_00_a", "ssim": 0.7, "tof": 0.2, "chamfer": None, "iou": 0.8},
        ]
        return EvalReport("full", rows, {"seed": 0}, {"dataset": "abc"})

    def test_aggregate_skips_missing_values(self):
        aggregate = self._report().aggregate()
        assert_lt(abs(aggregate["ssim"] - 0.6), 1e-12)
        assert_lt(abs(aggregate["tof"] - 0.2), 1e-12)
        assert_lt(abs(aggregate["chamfer"] - 0.02), 1e-12)
        assert_eq(LPIPS_UNSUPPORTED, aggregate["lpips"])

    def test_write_once(self):
        report = self._report()
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "eval", "full.json")
            report.write(path)
            with AssertRaises(InvalidInputError):
                report.write(path)
            loaded = EvalReport.read(path)
            assert_eq(report.rows, loaded.rows)
            assert_eq(report.provenance, loaded.provenance)
            assert_eq("full", loaded.variant)
            with AssertRaises(MissingArtifactError):
                EvalReport.read(os.path.join(tmp, "missing.json"))

    def test_csv(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "full.csv")
            self._report().write_csv(path)
            with open(path, newline="", encoding="utf-8") as f:
                lines = list(csv.reader(f))
        assert_eq(["frame", "sequence", "ssim", "tof", "chamfer", "lpips"], lines[0])
        assert_eq("", lines[1][3])
        assert_eq(LPIPS_UNSUPPORTED, lines[2][5])


class TestEvaluation:
    def test_stage1_only(self):
        dataset, stage1, _ = _trained()
        config = tiny_config()
        report = evaluate_variant(dataset, stage1, None, config, Variant.stage1_only)
        test_frames = dataset.split_indices("test")
        assert_eq(test_frames, [row["frame"] for row in report.rows])
        for row in report.rows:
            assert_all_between(-1.0, 1.0, row["ssim"])
            assert_all_between(0.0, 1.0, row["iou"])
            assert np.isfinite(row["chamfer"])
            first = dataset.sequence_of(row["frame"]).start == row["frame"]
            assert_is(first, row["tof"] is None)

    def test_full_variant(self):
        dataset, stage1, stage2 = _trained()
        report = evaluate_variant(dataset, stage1, stage2, tiny_config(), Variant.full)
        assert_eq(len(dataset.split_indices("test")), len(report.rows))
        assert_eq(["chamfer", "frame", "iou", "sequence", "ssim", "tof"], sorted(report.rows[0]))

    def test_missing_checkpoint_names_variant(self):
        dataset, stage1, stage2 = _trained()
        with tempfile.TemporaryDirectory() as tmp:
            stage1_path = os.path.join(tmp, "stage1.bin")
            full_path = os.path.join(tmp, "full.bin")
            stage1.save(stage1_path)
            stage2.save(full_path)
            paths = {Variant.full: full_path, Variant.no_stage1: os.path.join(tmp, "nope.bin")}
            with AssertRaises(MissingArtifactError) as ctx:
                run_ablation(dataset, tiny_config(), stage1_path, paths)
        assert_in("no_stage1", str(ctx.expected_exception_found))

    def test_ablation_order(self):
        dataset, stage1, stage2 = _trained()
        with tempfile.TemporaryDirectory() as tmp:
            stage1_path = os.path.join(tmp, "stage1.bin")
            stage2_path = os.path.join(tmp, "stage2.bin")
            stage1.save(stage1_path)
            stage2.save(stage2_path)
            paths = {Variant.full: stage2_path, Variant.no_stage1: stage2_path}
            reports = run_ablation(dataset, tiny_config(), stage1_path, paths, {"run": "test"})
        assert_eq(["stage1_only", "no_stage1", "full"], [r.variant for r in reports])
        assert_eq({"run": "test"}, reports[0].provenance)


class TestDisambiguation:
    def test_success_rate(self):
        outcomes = [
            {"frame": 1, "matched": 0.1, "mismatched": 0.2},
            {"frame": 3, "matched": 0.3, "mismatched": 0.2},
        ]
        result = DisambiguationResult("full", outcomes)
        assert_eq(0.5, result.success_rate)
        assert_eq(0.5, result.to_dict()["success_rate"])
        assert_eq(0.0, DisambiguationResult("full", []).success_rate)

    def test_paired_finals(self):
        dataset, stage1, stage2 = _trained()
        result = motion_disambiguation(dataset, stage1, stage2, tiny_config())
        assert_eq(2 * len(dataset.paired_finals()), len(result.outcomes))
        assert_all_between(0.0, 1.0, result.success_rate)


@slow
def test_history_separates_identical_final_poses():
    config = tiny_config(
        render={"height": 64, "width": 64, "focal": 100.0},
        dataset={"train_frames": 200, "test_frames": 20},
        stage1={"steps": 1000, "log_every": 200},
        stage2={"steps": 3000, "log_every": 200, "history": 4, "width": 128, "depth": 6,
                "skip_layer": 3, "rays_per_step": 256, "trace_steps": 48},
        evaluation={"mc_resolution": 48, "chamfer_samples": 2000},
    )
    dataset = tiny_dataset(config)
    stage1 = train_stage1(dataset, config)
    stage2 = train_stage2(dataset, stage1, config)
    full = motion_disambiguation(dataset, stage1, stage2, config, Variant.full)
    static = motion_disambiguation(dataset, stage1, stage2, config, Variant.no_motion)
    assert_ge(full.success_rate, static.success_rate)
