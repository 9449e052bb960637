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

import functools
import json
import os
import tempfile

import numpy as np

from qcore.asserts import AssertRaises, assert_eq, assert_gt, assert_in, assert_is, assert_lt

from dynavatar.asserts import assert_all_between, assert_array_eq, assert_shape
from dynavatar.body_model import PoseState, pose_mesh
from dynavatar.checkpoint import file_digest
from dynavatar.diff_renderer import default_camera
from dynavatar.errors import (
    CorruptArtifactError,
    InvalidInputError,
    MissingArtifactError,
    SimulationError,
)
from dynavatar.synth_data import (
    ClothConfig,
    MotionScript,
    MotionSegment,
    SinusoidComponent,
    default_scripts,
    generate_sequence,
    oscillator_energy,
    paired_scripts,
    read_dataset,
    render_ground_truth,
    simulate_offsets,
    skirt_cloth_config,
    write_dataset,
)
from dynavatar.testing import tiny_body, tiny_camera, tiny_dataset

_SPREAD = {"left_hip": (0.6, 0.0, 0.4), "right_hip": (-0.4, 0.0, -0.4)}


@functools.cache
def _dataset():
    return tiny_dataset()


def _jump(body, frames, hold=1):
    """hold frames at rest, then frames frames at a spread pose."""
    script = MotionScript(
        "jump", (MotionSegment(hold), MotionSegment(frames, _SPREAD))
    )
    return script.poses(body)


class TestClothConfig:
    def test_validation(self):
        mask = np.ones(4, dtype=bool)
        with AssertRaises(InvalidInputError):
            ClothConfig(0.0, 1.0, mask, lambda pose: np.zeros(4))
        with AssertRaises(InvalidInputError):
            ClothConfig(1.0, -1.0, mask, lambda pose: np.zeros(4))
        with AssertRaises(InvalidInputError):
            ClothConfig(1.0, 1.0, mask, lambda pose: np.zeros(4), dt=0.0)

    def test_damping_regime(self):
        mask = np.ones(4, dtype=bool)
        cfg = ClothConfig(100.0, 2.0, mask, lambda pose: np.zeros(4))
        assert_is(True, cfg.is_underdamped)
        assert_lt(abs(cfg.period - 2 * np.pi / 10.0), 1e-12)
        assert_is(False, ClothConfig(1.0, 3.0, mask, lambda pose: np.zeros(4)).is_underdamped)

    def test_skirt_band(self):
        body = tiny_body()
        cfg = skirt_cloth_config(body)
        heights = body.template_vertices[cfg.affected_vertex_mask, 1]
        assert_gt(len(heights), 0)
        assert_all_between(-0.85, -0.2, heights)
        assert_eq(int(cfg.affected_vertex_mask.sum()), cfg.to_dict()["affected_vertex_count"])
        assert_eq("skirt", cfg.to_dict()["rest_offset"]["kind"])


class TestSimulation:
    def test_starts_at_rest(self):
        body = tiny_body()
        cfg = skirt_cloth_config(body)
        poses = [PoseState.identity(body.joint_count, t) for t in range(5)]
        trajectory = simulate_offsets(body, poses, cfg)
        assert_eq(5, trajectory.frame_count)
        assert_shape((5, body.vertex_count, 3), trajectory.vectors())
        assert_array_eq(trajectory.rest, trajectory.offsets, tolerance=1e-15)
        assert_array_eq(np.zeros_like(trajectory.velocities), trajectory.velocities)
        assert_array_eq(
            np.zeros((5, int((~cfg.affected_vertex_mask).sum()))),
            trajectory.offsets[:, ~cfg.affected_vertex_mask],
        )

    def test_cloth_lags_behind(self):
        body = tiny_body()
        cfg = skirt_cloth_config(body)
        trajectory = simulate_offsets(body, _jump(body, 3), cfg)
        band = cfg.affected_vertex_mask
        gap = np.abs(trajectory.offsets[1] - trajectory.rest[1])[band]
        assert_gt(gap.max(), 0.0)
        # rest offsets grow with the leg spread
        assert_gt(trajectory.rest[1][band].sum(), trajectory.rest[0][band].sum())

    def test_undamped_energy_is_conserved(self):
        body = tiny_body()
        rest = skirt_cloth_config(body)
        cfg = ClothConfig(110.0, 0.0, rest.affected_vertex_mask, rest.rest_offset_fn)
        trajectory = simulate_offsets(body, _jump(body, 120), cfg)
        band = cfg.affected_vertex_mask
        energies = [
            oscillator_energy(
                trajectory.offsets[t], trajectory.velocities[t], trajectory.rest[t], cfg.stiffness, cfg.dt
            )[band]
            for t in range(1, trajectory.frame_count)
        ]
        scale = np.abs(energies[0]).max()
        assert_gt(scale, 0.0)
        for e in energies[1:]:
            assert_lt(np.abs(e - energies[0]).max(), 1e-9 * scale)

    def test_undamped_step_period(self):
        body = tiny_body()
        dt = 1.0 / 120.0
        cfg = ClothConfig(
            110.0,
            0.0,
            np.ones(body.vertex_count, dtype=bool),
            lambda pose: np.full(body.vertex_count, 0.0 if pose.timestamp == 0 else 0.05),
            dt=dt,
        )
        poses = [PoseState.identity(body.joint_count, t) for t in range(300)]
        trajectory = simulate_offsets(body, poses, cfg)
        y = trajectory.offsets[:, 0] - 0.05
        rising = np.nonzero((y[:-1] < 0.0) & (y[1:] >= 0.0))[0]
        crossings = rising + (-y[rising] / (y[rising + 1] - y[rising]))
        assert_gt(len(crossings), 2)
        measured = np.diff(crossings).mean() * dt
        expected = 2.0 * np.pi / np.sqrt(110.0)
        assert_lt(abs(measured - expected) / expected, 0.02)

    def test_damping_dissipates(self):
        body = tiny_body()
        cfg = skirt_cloth_config(body, damping=2.0)
        trajectory = simulate_offsets(body, _jump(body, 60), cfg)
        band = cfg.affected_vertex_mask

        def energy(t):
            return oscillator_energy(
                trajectory.offsets[t], trajectory.velocities[t], trajectory.rest[t], cfg.stiffness, cfg.dt
            )[band].sum()

        assert_lt(energy(60), 0.1 * energy(1))

    def test_bad_input(self):
        body = tiny_body()
        cfg = skirt_cloth_config(body)
        with AssertRaises(InvalidInputError):
            simulate_offsets(body, [], cfg)
        bad = np.full((body.joint_count, 3), np.nan)
        with AssertRaises(SimulationError):
            simulate_offsets(body, [PoseState.identity(body.joint_count), PoseState(bad)], cfg)
        short = ClothConfig(1.0, 0.0, np.ones(3, dtype=bool), cfg.rest_offset_fn)
        with AssertRaises(InvalidInputError):
            simulate_offsets(body, [PoseState.identity(body.joint_count)], short)

    def test_unstable_step_diverges(self):
        body = tiny_body()
        rest = skirt_cloth_config(body)
        cfg = ClothConfig(1e6, 0.0, rest.affected_vertex_mask, rest.rest_offset_fn, dt=0.1)
        with AssertRaises(SimulationError):
            simulate_offsets(body, _jump(body, 200), cfg)


class TestMotionScripts:
    def test_anchors(self):
        body = tiny_body()
        wave = (SinusoidComponent("spine", 0, 0.3, 1.0, phase=0.0),)
        start = MotionSegment(10, {"spine": (0.1, 0.0, 0.0)}, wave, "start")
        end = MotionSegment(10, {"spine": (0.1, 0.0, 0.0)}, wave, "end")
        spine = body.joint_names.index("spine")
        assert_lt(abs(start.rotations(body.joint_names, 0.1)[0, spine, 0] - 0.1), 1e-12)
        assert_lt(abs(end.rotations(body.joint_names, 0.1)[-1, spine, 0] - 0.1), 1e-12)
        assert_gt(abs(start.rotations(body.joint_names, 0.1)[-1, spine, 0] - 0.1), 1e-3)

    def test_segment_validation(self):
        with AssertRaises(InvalidInputError):
            MotionSegment(0)
        with AssertRaises(InvalidInputError):
            MotionSegment(3, anchor="middle")
        with AssertRaises(InvalidInputError):
            MotionSegment(3, {"tail": (0.0, 0.0, 0.0)}).rotations(tiny_body().joint_names, 0.1)

    def test_poses(self):
        body = tiny_body()
        script = MotionScript("s", (MotionSegment(2), MotionSegment(3, _SPREAD)))
        poses = script.poses(body)
        assert_eq(5, script.frame_count)
        assert_eq(list(range(5)), [p.timestamp for p in poses])
        assert_is(True, poses[2].same_pose(poses[4]))
        assert_is(False, poses[0].same_pose(poses[2]))

    def test_script_json(self):
        script = MotionScript(
            "s",
            (MotionSegment(4, {"spine": (0.1, 0.2, 0.3)}, (SinusoidComponent("spine", 2, 0.2, 0.5),), "end"),),
        )
        assert_eq(script, MotionScript.from_dict(json.loads(json.dumps(script.to_dict()))))

    def test_paired_scripts_share_the_final_pose(self):
        body = tiny_body()
        moving, settled = paired_scripts("p", {"spine": (0.1, 0.0, 0.0)}, _SPREAD, 5)
        assert_eq(("p_a", "p_b"), (moving.name, settled.name))
        assert_eq(moving.frame_count, settled.frame_count)
        assert_is(True, moving.poses(body)[-1].same_pose(settled.poses(body)[-1]))
        assert_is(False, moving.poses(body)[-2].same_pose(settled.poses(body)[-2]))

    def test_default_scripts(self):
        train, test = default_scripts(3, train_frames=250, test_frames=100)
        assert_eq(250, sum(s.frame_count for s in train))
        assert_eq(["train_00", "train_01", "train_02"], [s.name for s in train])
        assert_eq(["test_00_a", "test_00_b", "test_01_a", "test_01_b"], [s.name for s in test])
        assert_eq(100, sum(s.frame_count for s in test))
        again, _ = default_scripts(3, train_frames=250, test_frames=100)
        assert_eq(train, again)
        assert_eq([], default_scripts(0, train_frames=10, test_frames=0)[1])

    def test_test_split_frame_counts(self):
        body = tiny_body()
        for requested in (4, 5, 7, 51, 100, 102, 157):
            _, test = default_scripts(1, train_frames=0, test_frames=requested)
            assert_eq(requested, sum(s.frame_count for s in test), extra=requested)
            for moving, settled in zip(test[::2], test[1::2]):
                assert_is(True, moving.poses(body)[-1].same_pose(settled.poses(body)[-1]))
                assert_gt(moving.frame_count, 1)
        for requested in (1, 2, 3, -1):
            with AssertRaises(InvalidInputError):
                default_scripts(0, train_frames=10, test_frames=requested)


class TestDataset:
    def test_layout(self):
        dataset = _dataset()
        assert_eq(10, len(dataset))
        assert_eq(6, len(dataset.split_indices("train")))
        assert_eq([6, 7, 8, 9], dataset.split_indices("test"))
        assert_eq([(7, 9)], dataset.paired_finals())
        frame = dataset.frames[7]
        assert_eq("test_00_a", frame.sequence)
        assert_eq(1, frame.index_in_sequence)
        assert_is(True, frame.pose.same_pose(dataset.frames[9].pose))

    def test_history(self):
        dataset = _dataset()
        assert_eq([7, 6, 6], dataset.history(7, 3))
        assert_eq([2, 1, 0], dataset.history(2, 3))
        with AssertRaises(InvalidInputError):
            dataset.sequence_of(99)

    def test_same_final_pose_different_surface(self):
        dataset = _dataset()
        moving, settled = dataset.paired_finals()[0]
        gap = np.abs(dataset.frames[moving].gt_surface - dataset.frames[settled].gt_surface)
        assert_gt(gap.max(), 1e-4)

    def test_deterministic(self):
        a = _dataset()
        b = tiny_dataset()
        for x, y in zip(a.frames, b.frames):
            assert_array_eq(x.rgb, y.rgb)
            assert_array_eq(x.gt_surface, y.gt_surface)

    def test_same_seed_writes_identical_files(self):
        with tempfile.TemporaryDirectory() as first, tempfile.TemporaryDirectory() as second:
            write_dataset(tiny_dataset(seed=5), first)
            write_dataset(tiny_dataset(seed=5), second)
            listings = []
            for root in (first, second):
                listings.append(
                    sorted(
                        os.path.relpath(os.path.join(parent, name), root)
                        for parent, _, names in os.walk(root)
                        for name in names
                    )
                )
            assert_eq(listings[0], listings[1])
            assert_in("meta.json", listings[0])
            for relative in listings[0]:
                assert_eq(
                    file_digest(os.path.join(first, relative)),
                    file_digest(os.path.join(second, relative)),
                    extra=relative,
                )

    def test_ground_truth_images(self):
        body = tiny_body()
        camera = tiny_camera()
        vertices = pose_mesh(body, PoseState.identity(body.joint_count))
        rgb, mask, normal_map = render_ground_truth(body, vertices, camera)
        assert_shape((32, 32, 3), rgb)
        assert_shape((32, 32), mask)
        assert_gt(int(mask.sum()), 0)
        assert_all_between(0.0, 1.0, rgb)
        assert_array_eq(np.zeros(int((~mask).sum())), rgb[~mask].sum(axis=-1))
        lengths = np.linalg.norm(normal_map[mask], axis=-1)
        assert_array_eq(np.ones_like(lengths), lengths, tolerance=1e-6)


class TestDatasetFiles:
    def test_round_trip(self):
        dataset = _dataset()
        with tempfile.TemporaryDirectory() as tmp:
            write_dataset(dataset, tmp)
            loaded = read_dataset(tmp)
        assert_eq(len(dataset), len(loaded))
        assert_eq(dataset.sequences, loaded.sequences)
        assert_eq(dataset.seed, loaded.seed)
        assert_eq(dataset.body.vertex_count, loaded.body.vertex_count)
        for original, copy in zip(dataset.frames, loaded.frames):
            assert_array_eq(original.mask, copy.mask)
            assert_array_eq(original.rgb, copy.rgb, tolerance=0.5 / 255 + 1e-9)
            assert_array_eq(original.gt_surface, copy.gt_surface, tolerance=1e-6)
            assert_is(True, original.pose.same_pose(copy.pose))
            assert_eq(original.sequence, copy.sequence)

    def test_missing(self):
        with tempfile.TemporaryDirectory() as tmp:
            with AssertRaises(MissingArtifactError):
                read_dataset(tmp)
            write_dataset(_dataset(), tmp)
            os.remove(os.path.join(tmp, "masks", "000003.png"))
            with AssertRaises(MissingArtifactError):
                read_dataset(tmp)

    def test_corrupt(self):
        with tempfile.TemporaryDirectory() as tmp:
            write_dataset(_dataset(), tmp)
            surfaces = os.path.join(tmp, "gt_surfaces.bin")
            with open(surfaces, "rb") as f:
                data = f.read()
            with open(surfaces, "wb") as f:
                f.write(data[:-12])
            with AssertRaises(CorruptArtifactError):
                read_dataset(tmp)

            meta_path = os.path.join(tmp, "meta.json")
            with open(meta_path, encoding="utf-8") as f:
                meta = json.load(f)
            meta["format_version"] = 99
            with open(meta_path, "w", encoding="utf-8") as f:
                json.dump(meta, f)
            with AssertRaises(CorruptArtifactError):
                read_dataset(tmp)


def test_generate_sequence():
    body = tiny_body()
    camera = tiny_camera()
    cloth = skirt_cloth_config(body)
    script = MotionScript("s", (MotionSegment(2), MotionSegment(1, _SPREAD)))
    clean = generate_sequence(body, script, cloth, camera, seed=1)
    noisy = generate_sequence(body, script, cloth, camera, seed=1, pixel_noise=0.05)
    again = generate_sequence(body, script, cloth, camera, seed=1, pixel_noise=0.05)
    assert_eq(["s"] * 3, [f.sequence for f in clean])
    assert_eq([0, 1, 2], [f.index_in_sequence for f in clean])
    for c, n, a in zip(clean, noisy, again):
        assert_array_eq(n.rgb, a.rgb)
        assert_array_eq(c.mask, n.mask)
        assert_array_eq(c.gt_surface, n.gt_surface)
        assert_array_eq(np.zeros(int((~c.mask).sum())), n.rgb[~c.mask].sum(axis=-1))
        assert_all_between(0.0, 1.0, n.rgb)
    assert_gt(float(np.abs(noisy[0].rgb - clean[0].rgb).max()), 0.0)


def test_mask_centroid_follows_leg_swing():
    body = tiny_body()
    camera = default_camera((64, 64), 100.0)
    dt = 1.0 / 30.0
    frequency = 1.0
    frames = 90
    swing = tuple(
        SinusoidComponent(joint, 2, 0.5, frequency)
        for joint in ("left_hip", "right_hip", "left_knee", "right_knee")
    )
    script = MotionScript("swing", (MotionSegment(frames, components=swing),), dt)
    sequence = generate_sequence(body, script, skirt_cloth_config(body, dt=dt), camera)
    columns = np.arange(64)[None, :]
    centroid = np.array([(f.mask * columns).sum() / f.mask.sum() for f in sequence])
    spectrum = np.abs(np.fft.rfft(centroid - centroid.mean()))
    # three seconds of a 1 Hz swing peak in bin 3
    assert_eq(3, int(np.argmax(spectrum)))
