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

Checkpoint container: named float32 tensors plus JSON metadata.

Layout (little-endian):

    8 bytes   magic b"DAVCKPT1"
    4 bytes   header length n
    n bytes   UTF-8 JSON header {"metadata": ..., "tensors": [...]}
    ...       raw float32 data of every tensor, in header order

The header is written with sorted keys, so identical contents give identical
bytes.

"""

__all__ = ["save_checkpoint", "load_checkpoint", "file_digest", "state_tensors"]

import hashlib
import json
import os
import struct

import numpy as np
import torch

from .errors import CorruptArtifactError, MissingArtifactError

MAGIC = b"DAVCKPT1"
_LENGTH = struct.Struct("<I")


def state_tensors(prefix, module):
    """The module's state dict as numpy float32 arrays keyed prefix.name."""
    return {
        "%s.%s" % (prefix, name): value.detach().cpu().numpy().astype("<f4")
        for name, value in module.state_dict().items()
    }


def save_checkpoint(path, tensors, metadata):
    names = sorted(tensors)
    entries = []
    blobs = []
    offset = 0
    for name in names:
        array = np.ascontiguousarray(np.asarray(tensors[name], dtype="<f4"))
        entries.append({"name": name, "shape": list(array.shape), "offset": offset})
        blobs.append(array.tobytes())
        offset += array.nbytes
    header = json.dumps(
        {"metadata": metadata, "tensors": entries}, sort_keys=True
    ).encode("utf-8")
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(_LENGTH.pack(len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path, what="checkpoint"):
    """Returns (tensors as torch float32, metadata)."""
    if not os.path.exists(path):
        raise MissingArtifactError(path, what)
    with open(path, "rb") as f:
        data = f.read()
    if data[: len(MAGIC)] != MAGIC:
        raise CorruptArtifactError(path, "not a checkpoint file")
    start = len(MAGIC) + _LENGTH.size
    if len(data) < start:
        raise CorruptArtifactError(path, "truncated header")
    (length,) = _LENGTH.unpack(data[len(MAGIC) : start])
    try:
        header = json.loads(data[start : start + length].decode("utf-8"))
    except ValueError as e:
        raise CorruptArtifactError(path, "unreadable header: %s" % e)
    body = data[start + length :]
    tensors = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        end = entry["offset"] + 4 * count
        if end > len(body):
            raise CorruptArtifactError(path, "tensor %s is truncated" % entry["name"])
        array = np.frombuffer(body[entry["offset"] : end], dtype="<f4")
        tensors[entry["name"]] = torch.from_numpy(
            array.reshape(entry["shape"]).astype(np.float32)
        )
    return tensors, header["metadata"]


def load_module_state(module, prefix, tensors, path):
    state = {}
    for name, current in module.state_dict().items():
        key = "%s.%s" % (prefix, name)
        if key not in tensors:
            raise CorruptArtifactError(path, "missing tensor %s" % key)
        state[name] = tensors[key].to(current.dtype).reshape(current.shape)
    module.load_state_dict(state)


def file_digest(path):
    """SHA-256 of a file's contents, hex encoded."""
    if not os.path.exists(path):
        raise MissingArtifactError(path)
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()
