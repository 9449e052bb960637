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

Command-line driver.

    python -m dynavatar generate
    python -m dynavatar train --stage 1
    python -m dynavatar train --stage 2 [--variant no_stage1]
    python -m dynavatar animate [--script script.json] [--frames 20]
    python -m dynavatar eval [--variant stage1_only|no_stage1|full|no_motion]
    python -m dynavatar ablate

Every path is relative to --workdir. Artifacts:

    dataset/                        frames, masks, normals, meta.json, ...
    stage1/checkpoint.bin
    stage2_<variant>/checkpoint.bin
    animation/NNNN.obj, NNNN.png, manifest.json
    eval/<variant>.json, eval/<variant>.csv
    ablation/<variant>.json, ablation/disambiguation.json

Each artifact directory also gets config.json (loadable with --config) and
run.json (config hash, content hashes of the inputs and outputs, wall time).

Flag precedence, lowest first: defaults, --config, DYNAVATAR_SEED, flags.
Exit codes: 0 success, 1 internal error, 2 missing or invalid input.

"""

__all__ = ["main", "build_parser", "resolve_config", "frame_split"]

import argparse
import json
import logging
import os
import sys

import numpy as np

from qcore.microtime import SECOND, format_utime_as_iso_8601, utime

from .body_model import load_body_model, default_body
from .checkpoint import file_digest
from .config import config_hash, config_to_dict, load_config
from .diff_renderer import default_camera, write_png
from .errors import InvalidInputError, MissingArtifactError
from .explicit_stage import Stage1Checkpoint, train_stage1
from .metrics_eval import evaluate_variant, motion_disambiguation, run_ablation
from .motion_stage import Stage2Checkpoint, Variant, animate, train_stage2
from .synth_data import (
    MotionScript,
    generate_dataset,
    random_script,
    read_dataset,
    skirt_cloth_config,
    write_dataset,
)

_log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_INPUT = 2

DATASET_DIR = "dataset"
STAGE1_DIR = "stage1"
CHECKPOINT_NAME = "checkpoint.bin"
ANIMATION_DIR = "animation"
EVAL_DIR = "eval"
ABLATION_DIR = "ablation"
DEFAULT_ANIMATION_FRAMES = 20


def stage2_dir(variant):
    return "stage2_%s" % variant.short_name


def frame_split(total):
    """(train, test) frame counts for --frames: the default 600/100 ratio.

    The test count is even and either 0 or at least 4.

    """
    test = total * 100 // 700
    test -= test % 2
    if test < 4:
        test = 0
    return total - test, test


# ===================================================
# Provenance
# ===================================================


class _Run:
    """Collects the provenance of one command and writes run.json."""

    def __init__(self, command, config, workdir):
        self.command = command
        self.config = config
        self.workdir = workdir
        self.started = utime()
        self.inputs = {}
        self.outputs = {}

    def _relative(self, path):
        return os.path.relpath(path, self.workdir)

    def _digests(self, path):
        if os.path.isdir(path):
            for root, _, names in sorted(os.walk(path)):
                for name in sorted(names):
                    yield os.path.join(root, name)
        else:
            yield path

    def add_input(self, path):
        for item in self._digests(path):
            self.inputs[self._relative(item)] = file_digest(item)

    def add_output(self, path):
        for item in self._digests(path):
            if os.path.basename(item) in ("run.json", "config.json"):
                continue
            self.outputs[self._relative(item)] = file_digest(item)

    def provenance(self, dataset):
        """Checkpoint and dataset metadata hashes plus the dataset seed, for reports."""
        hashes = {
            path: digest
            for path, digest in self.inputs.items()
            if path.endswith((".bin", "meta.json"))
        }
        return {"inputs": hashes, "dataset_seed": dataset.seed}

    def finish(self, directory):
        os.makedirs(directory, exist_ok=True)
        with open(os.path.join(directory, "config.json"), "w", encoding="utf-8") as f:
            json.dump(config_to_dict(self.config), f, sort_keys=True, indent=2)
            f.write("\n")
        record = {
            "command": self.command,
            "config_hash": config_hash(self.config),
            "seed": self.config.seed,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "started_at": format_utime_as_iso_8601(self.started),
            "wall_time_seconds": (utime() - self.started) / SECOND,
        }
        with open(os.path.join(directory, "run.json"), "w", encoding="utf-8") as f:
            json.dump(record, f, sort_keys=True, indent=2)
            f.write("\n")


# ===================================================
# Commands
# ===================================================


def _path(workdir, *parts):
    return os.path.join(workdir, *parts)


def _body(config, workdir):
    if config.body.model_path:
        return load_body_model(_path(workdir, config.body.model_path))
    return default_body(
        config.body.subdivisions, n_lon=config.body.n_lon, n_rings=config.body.n_rings
    )


def _camera(config):
    r = config.render
    return default_camera(r.image_size, r.focal, r.camera_distance, r.camera_height)


def _dataset(workdir, run):
    directory = _path(workdir, DATASET_DIR)
    dataset = read_dataset(directory)
    run.add_input(directory)
    return dataset


def _stage1(workdir, body, run):
    path = _path(workdir, STAGE1_DIR, CHECKPOINT_NAME)
    checkpoint = Stage1Checkpoint.load(path, body)
    run.add_input(path)
    return checkpoint


def _stage2(workdir, body, variant, run):
    path = _path(workdir, stage2_dir(variant), CHECKPOINT_NAME)
    checkpoint = Stage2Checkpoint.load(path, body)
    run.add_input(path)
    return checkpoint


def cmd_generate(config, workdir, args):
    run = _Run("generate", config, workdir)
    body = _body(config, workdir)
    c = config.cloth
    cloth = skirt_cloth_config(
        body, c.stiffness, c.damping, c.dt, (c.band_low, c.band_high), c.base, c.gain
    )
    dataset = generate_dataset(
        body,
        _camera(config),
        config.seed,
        config.dataset.train_frames,
        config.dataset.test_frames,
        cloth,
        config_to_dict(config),
        pixel_noise=config.dataset.pixel_noise,
    )
    directory = _path(workdir, DATASET_DIR)
    write_dataset(dataset, directory)
    run.add_output(directory)
    run.finish(directory)
    print(
        "dataset: %d frames (%d train, %d test) in %d sequences, %d vertices -> %s"
        % (
            len(dataset.frames),
            len(dataset.split_indices("train")),
            len(dataset.split_indices("test")),
            len(dataset.sequences),
            dataset.body.vertex_count,
            directory,
        )
    )


def cmd_train(config, workdir, args):
    run = _Run("train --stage %d" % args.stage, config, workdir)
    dataset = _dataset(workdir, run)
    if args.stage == 1:
        checkpoint = train_stage1(dataset, config)
        directory = _path(workdir, STAGE1_DIR)
    else:
        variant = Variant.parse(args.variant or "full")
        stage1 = _stage1(workdir, dataset.body, run)
        checkpoint = train_stage2(dataset, stage1, config, variant)
        directory = _path(workdir, stage2_dir(variant))
    path = os.path.join(directory, CHECKPOINT_NAME)
    checkpoint.save(path)
    run.add_output(path)
    run.finish(directory)
    print("stage %d checkpoint -> %s" % (args.stage, path))


def _animation_script(config, workdir, args):
    if args.script:
        path = _path(workdir, args.script)
        if not os.path.exists(path):
            raise MissingArtifactError(path, "pose script")
        try:
            with open(path, encoding="utf-8") as f:
                return MotionScript.from_dict(json.load(f)), path
        except (ValueError, KeyError) as e:
            raise InvalidInputError("unreadable pose script %s: %s" % (path, e))
    frames = args.frames or DEFAULT_ANIMATION_FRAMES
    rng = np.random.default_rng(config.seed + 1)
    return random_script(rng, "novel", frames, config.cloth.dt), None


def cmd_animate(config, workdir, args):
    run = _Run("animate", config, workdir)
    variant = Variant.parse(args.variant or "full")
    if variant == Variant.stage1_only:
        raise InvalidInputError("animate needs a stage 2 variant")
    body = _body(config, workdir)
    stage1 = _stage1(workdir, body, run)
    trained = Variant.no_stage1 if variant == Variant.no_stage1 else Variant.full
    stage2 = _stage2(workdir, body, trained, run)
    script, script_path = _animation_script(config, workdir, args)
    if script_path:
        run.add_input(script_path)
    directory = _path(workdir, ANIMATION_DIR)
    os.makedirs(directory, exist_ok=True)
    manifest = {"script": script.to_dict(), "variant": variant.short_name, "frames": []}

    def save(frame):
        name = "%04d" % frame.index
        frame.mesh.write_obj(os.path.join(directory, name + ".obj"))
        write_png(os.path.join(directory, name + ".png"), frame.image)
        manifest["frames"].append(
            {
                "index": frame.index,
                "mesh": name + ".obj",
                "image": name + ".png",
                "flagged": frame.flagged,
                "vertices": len(frame.mesh.vertices),
            }
        )

    animate(
        body,
        script.poses(body),
        stage1,
        stage2,
        _camera(config),
        config,
        variant,
        on_frame=save,
    )
    with open(os.path.join(directory, "manifest.json"), "w", encoding="utf-8") as f:
        json.dump(manifest, f, sort_keys=True, indent=2)
        f.write("\n")
    run.add_output(directory)
    run.finish(directory)
    flagged = sum(f["flagged"] for f in manifest["frames"])
    print("animation: %d frames (%d flagged) -> %s" % (len(manifest["frames"]), flagged, directory))


def cmd_eval(config, workdir, args):
    run = _Run("eval", config, workdir)
    variant = Variant.parse(args.variant or "full")
    dataset = _dataset(workdir, run)
    stage1 = _stage1(workdir, dataset.body, run)
    stage2 = None
    if variant != Variant.stage1_only:
        trained = Variant.no_stage1 if variant == Variant.no_stage1 else Variant.full
        stage2 = _stage2(workdir, dataset.body, trained, run)
    directory = _path(workdir, EVAL_DIR)
    path = os.path.join(directory, variant.short_name + ".json")
    if os.path.exists(path):
        raise InvalidInputError("evaluation report %s already exists" % path)
    report = evaluate_variant(
        dataset, stage1, stage2, config, variant, provenance=run.provenance(dataset)
    )
    report.write(path)
    report.write_csv(os.path.join(directory, variant.short_name + ".csv"))
    run.add_output(path)
    run.finish(directory)
    print("%s: %s" % (variant.short_name, json.dumps(report.aggregate(), sort_keys=True)))


def cmd_ablate(config, workdir, args):
    run = _Run("ablate", config, workdir)
    dataset = _dataset(workdir, run)
    stage1_path = _path(workdir, STAGE1_DIR, CHECKPOINT_NAME)
    stage2_paths = {
        v: _path(workdir, stage2_dir(v), CHECKPOINT_NAME)
        for v in (Variant.no_stage1, Variant.full)
    }
    # missing checkpoints are reported by run_ablation with their variant
    for path in [stage1_path] + list(stage2_paths.values()):
        if os.path.exists(path):
            run.add_input(path)
    reports = run_ablation(
        dataset, config, stage1_path, stage2_paths, provenance=run.provenance(dataset)
    )
    directory = _path(workdir, ABLATION_DIR)
    for report in reports:
        path = os.path.join(directory, report.variant + ".json")
        report.write(path)
        report.write_csv(os.path.join(directory, report.variant + ".csv"))
        run.add_output(path)

    stage1 = Stage1Checkpoint.load(stage1_path, dataset.body)
    full = Stage2Checkpoint.load(stage2_paths[Variant.full], dataset.body)
    disambiguation = {
        v.short_name: motion_disambiguation(dataset, stage1, full, config, v).to_dict()
        for v in (Variant.full, Variant.no_motion)
    }
    path = os.path.join(directory, "disambiguation.json")
    with open(path, "w", encoding="utf-8") as f:
        json.dump(disambiguation, f, sort_keys=True, indent=2)
        f.write("\n")
    run.add_output(path)
    run.finish(directory)
    for report in reports:
        print("%s: %s" % (report.variant, json.dumps(report.aggregate(), sort_keys=True)))
    for name, result in sorted(disambiguation.items()):
        print("motion disambiguation (%s): %.2f" % (name, result["success_rate"]))


_COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "animate": cmd_animate,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


# ===================================================
# Entry point
# ===================================================


def build_parser():
    parser = argparse.ArgumentParser(
        prog="dynavatar", description="Two-stage motion-dependent avatar pipeline."
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        "--workdir",
        help="directory all paths are relative to (default: the configured workdir)",
    )
    common.add_argument("--config", help="TOML (or JSON) experiment configuration")
    common.add_argument("--seed", type=int, help="overrides the configured seed")
    common.add_argument(
        "--frames",
        type=int,
        help="generate: total frame count; animate: length of the novel script",
    )
    common.add_argument("--steps", type=int, help="train: optimization steps")
    common.add_argument("--verbose", action="store_true", help="debug logging")
    commands = parser.add_subparsers(dest="command", required=True)
    commands.add_parser("generate", parents=[common], help="synthesize the dataset")
    train = commands.add_parser("train", parents=[common], help="train one stage")
    train.add_argument("--stage", type=int, choices=(1, 2), required=True)
    train.add_argument("--variant", choices=("full", "no_stage1"))
    animate_parser = commands.add_parser(
        "animate", parents=[common], help="animate a novel pose script"
    )
    animate_parser.add_argument("--script", help="MotionScript JSON file")
    animate_parser.add_argument("--variant", choices=("full", "no_stage1", "no_motion"))
    evaluate = commands.add_parser("eval", parents=[common], help="evaluate one variant")
    evaluate.add_argument(
        "--variant", choices=("stage1_only", "no_stage1", "full", "no_motion")
    )
    commands.add_parser("ablate", parents=[common], help="run the three-way ablation")
    return parser


def resolve_config(args, environ=None):
    """ExperimentConfig for parsed arguments, with flag overrides applied."""
    workdir = args.workdir or "."
    config_path = os.path.join(workdir, args.config) if args.config else None
    overrides = {"seed": args.seed}
    if args.command == "generate" and args.frames is not None:
        if args.frames < 1:
            raise InvalidInputError("--frames must be at least 1")
        train, test = frame_split(args.frames)
        overrides["dataset.train_frames"] = train
        overrides["dataset.test_frames"] = test
    if args.command == "train" and args.steps is not None:
        overrides["stage%d.steps" % args.stage] = args.steps
    return load_config(config_path, environ, overrides)


def main(argv=None, environ=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        config = resolve_config(args, environ)
        workdir = args.workdir or config.workdir
        os.makedirs(workdir, exist_ok=True)
        _COMMANDS[args.command](config, workdir, args)
    except InvalidInputError as e:
        _log.error("%s", e)
        print("error: %s" % e, file=sys.stderr)
        return EXIT_INPUT
    except Exception:
        _log.exception("%s failed", args.command)
        return EXIT_INTERNAL
    return EXIT_OK
