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

import os
import tempfile

import numpy as np
import torch
from torch import nn

from qcore.asserts import AssertRaises, assert_eq, assert_ne

from dynavatar.asserts import assert_array_eq
from dynavatar.checkpoint import (
    MAGIC,
    file_digest,
    load_checkpoint,
    load_module_state,
    save_checkpoint,
    state_tensors,
)
from dynavatar.errors import CorruptArtifactError, MissingArtifactError


def _tensors():
    return {
        "b.weight": np.arange(6, dtype=np.float32).reshape(2, 3),
        "a.bias": np.array([0.5, -1.5], dtype=np.float32),
    }


def test_round_trip():
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "nested", "ckpt.bin")
        save_checkpoint(path, _tensors(), {"kind": "test", "steps": 3})
        tensors, metadata = load_checkpoint(path)
    assert_eq({"kind": "test", "steps": 3}, metadata)
    assert_eq(["a.bias", "b.weight"], sorted(tensors))
    for name, expected in _tensors().items():
        assert_eq(torch.float32, tensors[name].dtype)
        assert_array_eq(expected, tensors[name])


def test_identical_contents_give_identical_bytes():
    with tempfile.TemporaryDirectory() as tmp:
        first = os.path.join(tmp, "first.bin")
        second = os.path.join(tmp, "second.bin")
        save_checkpoint(first, _tensors(), {"x": 1, "a": [1, 2]})
        reordered = dict(reversed(list(_tensors().items())))
        save_checkpoint(second, reordered, {"a": [1, 2], "x": 1})
        assert_eq(file_digest(first), file_digest(second))
        save_checkpoint(second, _tensors(), {"x": 2, "a": [1, 2]})
        assert_ne(file_digest(first), file_digest(second))


def test_missing_file():
    with AssertRaises(MissingArtifactError) as ctx:
        load_checkpoint("/nonexistent/ckpt.bin", "stage 1 checkpoint")
    assert_eq("missing stage 1 checkpoint: /nonexistent/ckpt.bin", str(ctx.expected_exception_found))
    with AssertRaises(MissingArtifactError):
        file_digest("/nonexistent/ckpt.bin")


def test_bad_magic():
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "ckpt.bin")
        with open(path, "wb") as f:
            f.write(b"NOTACKPT" + b"\x00" * 16)
        with AssertRaises(CorruptArtifactError):
            load_checkpoint(path)


def test_truncated():
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "ckpt.bin")
        save_checkpoint(path, _tensors(), {})
        with open(path, "rb") as f:
            data = f.read()
        with open(path, "wb") as f:
            f.write(data[:-4])
        with AssertRaises(CorruptArtifactError):
            load_checkpoint(path)
        with open(path, "wb") as f:
            f.write(MAGIC + b"\x02")
        with AssertRaises(CorruptArtifactError):
            load_checkpoint(path)


def test_module_state():
    torch.manual_seed(0)
    source = nn.Linear(3, 2)
    target = nn.Linear(3, 2)
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "ckpt.bin")
        save_checkpoint(path, state_tensors("net", source), {})
        tensors, _ = load_checkpoint(path)
        load_module_state(target, "net", tensors, path)
        assert_array_eq(source.weight, target.weight)
        assert_array_eq(source.bias, target.bias)
        with AssertRaises(CorruptArtifactError):
            load_module_state(nn.Linear(3, 2), "other", tensors, path)
