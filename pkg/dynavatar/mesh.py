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

Triangle mesh primitives shared by the body model, the renderers and the metrics.

Vertex arrays are V x 3 and face arrays F x 3 (int64). Functions that take
part in training accept torch tensors; the rest work on numpy arrays.

"""

__all__ = [
    "TriangleMesh",
    "unique_edges",
    "weld_map",
    "face_normals",
    "vertex_normals",
    "icosphere",
    "uv_sphere",
    "triangle_pixel_pairs",
    "barycentric_coordinates",
    "read_obj",
]

from dataclasses import dataclass

import numpy as np
import torch

from .errors import InvalidInputError


@dataclass(frozen=True)
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    @property
    def is_empty(self):
        return len(self.faces) == 0

    def face_areas(self):
        if self.is_empty:
            return np.zeros(0)
        tri = self.vertices[self.faces]
        return 0.5 * np.linalg.norm(
            np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1
        )

    def sample_surface(self, count, rng):
        """Draws count points uniformly by area."""
        if self.is_empty:
            raise InvalidInputError("can't sample an empty mesh")
        areas = self.face_areas()
        total = areas.sum()
        if total <= 0:
            raise InvalidInputError("mesh has zero surface area")
        face = rng.choice(len(self.faces), size=count, p=areas / total)
        r1 = np.sqrt(rng.random(count))
        r2 = rng.random(count)
        tri = self.vertices[self.faces[face]]
        return (
            (1.0 - r1)[:, None] * tri[:, 0]
            + (r1 * (1.0 - r2))[:, None] * tri[:, 1]
            + (r1 * r2)[:, None] * tri[:, 2]
        )

    def write_obj(self, path):
        """Writes an ASCII OBJ with 1-based face indices."""
        lines = ["v %.6f %.6f %.6f" % tuple(v) for v in self.vertices]
        lines.extend("f %d %d %d" % tuple(f + 1) for f in self.faces)
        with open(path, "w", encoding="utf-8") as f:
            f.write("\n".join(lines))
            f.write("\n")


def read_obj(path):
    vertices = []
    faces = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                vertices.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                faces.append([int(x.split("/")[0]) - 1 for x in parts[1:4]])
    return TriangleMesh(
        np.asarray(vertices, dtype=np.float64).reshape(-1, 3),
        np.asarray(faces, dtype=np.int64).reshape(-1, 3),
    )


def unique_edges(faces):
    """Returns (edges, face_edges).

    edges is E x 2 with edges[:, 0] < edges[:, 1], sorted lexicographically.
    face_edges is F x 3; face_edges[f, k] is the edge opposite to corner k, i.e.
    between corners (k + 1) % 3 and (k + 2) % 3.

    """
    faces = np.asarray(faces, dtype=np.int64)
    if len(faces) == 0:
        return np.zeros((0, 2), dtype=np.int64), np.zeros((0, 3), dtype=np.int64)
    corner_edges = np.stack(
        [faces[:, [1, 2]], faces[:, [2, 0]], faces[:, [0, 1]]], axis=1
    ).reshape(-1, 2)
    corner_edges = np.sort(corner_edges, axis=1)
    edges, inverse = np.unique(corner_edges, axis=0, return_inverse=True)
    return edges, inverse.reshape(-1, 3)


def weld_map(vertices):
    """Maps every vertex to the lowest index sharing its exact position."""
    vertices = np.asarray(vertices)
    if len(vertices) == 0:
        return np.zeros(0, dtype=np.int64)
    _, first, inverse = np.unique(
        vertices, axis=0, return_index=True, return_inverse=True
    )
    return first[inverse.reshape(-1)].astype(np.int64)


def face_normals(vertices, faces):
    """Unnormalized face normals (length = twice the face area), torch or numpy."""
    tri = vertices[faces]
    e1 = tri[:, 1] - tri[:, 0]
    e2 = tri[:, 2] - tri[:, 0]
    if isinstance(vertices, torch.Tensor):
        return torch.cross(e1, e2, dim=1)
    return np.cross(e1, e2)


def vertex_normals(vertices, faces, weld=None):
    """Area-weighted unit vertex normals.

    Vertices sharing a weld id (seam duplicates) receive the same normal.

    """
    is_torch = isinstance(vertices, torch.Tensor)
    if not is_torch:
        vertices = torch.as_tensor(np.asarray(vertices, dtype=np.float64))
    faces_t = torch.as_tensor(np.asarray(faces, dtype=np.int64))
    count = vertices.shape[0]
    weld_t = (
        torch.arange(count)
        if weld is None
        else torch.as_tensor(np.asarray(weld, dtype=np.int64))
    )
    normals = face_normals(vertices, faces_t)
    accum = torch.zeros_like(vertices)
    for k in range(3):
        accum = accum.index_add(0, weld_t[faces_t[:, k]], normals)
    accum = accum[weld_t]
    result = accum / accum.norm(dim=1, keepdim=True).clamp_min(1e-12)
    return result if is_torch else result.numpy()


def icosphere(level=2, radius=1.0):
    """A closed icosahedral sphere with outward-facing counter-clockwise faces."""
    t = (1.0 + 5.0**0.5) / 2.0
    vertices = [
        [-1, t, 0],
        [1, t, 0],
        [-1, -t, 0],
        [1, -t, 0],
        [0, -1, t],
        [0, 1, t],
        [0, -1, -t],
        [0, 1, -t],
        [t, 0, -1],
        [t, 0, 1],
        [-t, 0, -1],
        [-t, 0, 1],
    ]
    faces = [
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ]
    vertices = np.asarray(vertices, dtype=np.float64)
    vertices /= np.linalg.norm(vertices, axis=1, keepdims=True)
    faces = np.asarray(faces, dtype=np.int64)
    for _ in range(level):
        edges, face_edges = unique_edges(faces)
        mids = 0.5 * (vertices[edges[:, 0]] + vertices[edges[:, 1]])
        mids /= np.linalg.norm(mids, axis=1, keepdims=True)
        m = face_edges + len(vertices)
        a, b, c = faces[:, 0], faces[:, 1], faces[:, 2]
        # m[:, 0] lies on bc, m[:, 1] on ca, m[:, 2] on ab
        faces = np.concatenate(
            [
                np.stack([a, m[:, 2], m[:, 1]], axis=1),
                np.stack([b, m[:, 0], m[:, 2]], axis=1),
                np.stack([c, m[:, 1], m[:, 0]], axis=1),
                np.stack([m[:, 0], m[:, 1], m[:, 2]], axis=1),
            ]
        )
        vertices = np.concatenate([vertices, mids])
    return vertices * radius, faces


def uv_sphere(n_lon, n_rings, radius=1.0):
    """A closed latitude/longitude sphere with single pole vertices.

    Has n_lon * n_rings + 2 vertices and 2 * n_lon * n_rings faces.

    """
    theta = np.pi * (np.arange(n_rings) + 1.0) / (n_rings + 1.0)
    phi = 2.0 * np.pi * np.arange(n_lon) / n_lon
    th, ph = np.meshgrid(theta, phi, indexing="ij")
    ring = np.stack(
        [np.sin(th) * np.cos(ph), np.cos(th), -np.sin(th) * np.sin(ph)], axis=-1
    ).reshape(-1, 3)
    top = n_lon * n_rings
    bottom = top + 1
    vertices = np.concatenate([ring, [[0.0, 1.0, 0.0], [0.0, -1.0, 0.0]]])

    def idx(r, j):
        return r * n_lon + j % n_lon

    faces = []
    for j in range(n_lon):
        faces.append([top, idx(0, j), idx(0, j + 1)])
        faces.append([bottom, idx(n_rings - 1, j + 1), idx(n_rings - 1, j)])
        for r in range(n_rings - 1):
            faces.append([idx(r, j), idx(r + 1, j), idx(r + 1, j + 1)])
            faces.append([idx(r, j), idx(r + 1, j + 1), idx(r, j + 1)])
    return vertices * radius, np.asarray(faces, dtype=np.int64)


def triangle_pixel_pairs(xy, height, width, margin=0.0):
    """Enumerates (pixel, face) candidates from per-face bounding boxes.

    xy is F x 3 x 2 in pixel units (x right, y down); pixel (i, j) has its
    center at (j + 0.5, i + 0.5). Returns flat pixel indices i * width + j and
    face indices, both int64, for every pixel center inside a face's bounding
    box grown by margin.

    """
    xy = np.asarray(xy, dtype=np.float64)
    if len(xy) == 0:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty
    lo = xy.min(axis=1) - margin
    hi = xy.max(axis=1) + margin
    j0 = np.clip(np.ceil(lo[:, 0] - 0.5), 0, width).astype(np.int64)
    j1 = np.clip(np.floor(hi[:, 0] - 0.5), -1, width - 1).astype(np.int64)
    i0 = np.clip(np.ceil(lo[:, 1] - 0.5), 0, height).astype(np.int64)
    i1 = np.clip(np.floor(hi[:, 1] - 0.5), -1, height - 1).astype(np.int64)
    nx = np.maximum(j1 - j0 + 1, 0)
    ny = np.maximum(i1 - i0 + 1, 0)
    counts = nx * ny
    total = int(counts.sum())
    face = np.repeat(np.arange(len(xy), dtype=np.int64), counts)
    start = np.repeat(np.cumsum(counts) - counts, counts)
    offset = np.arange(total, dtype=np.int64) - start
    nx_rep = np.repeat(nx, counts)
    rows = np.repeat(i0, counts) + offset // nx_rep
    cols = np.repeat(j0, counts) + offset % nx_rep
    return rows * width + cols, face


def barycentric_coordinates(points, a, b, c):
    """Barycentric coordinates of 2D points w.r.t. triangles, row by row.

    Works on numpy arrays and torch tensors; degenerate triangles give
    non-finite values, which callers filter.

    """
    v0 = b - a
    v1 = c - a
    v2 = points - a
    den = v0[..., 0] * v1[..., 1] - v1[..., 0] * v0[..., 1]
    l1 = (v2[..., 0] * v1[..., 1] - v1[..., 0] * v2[..., 1]) / den
    l2 = (v0[..., 0] * v2[..., 1] - v2[..., 0] * v0[..., 1]) / den
    l0 = 1.0 - l1 - l2
    if isinstance(points, torch.Tensor):
        return torch.stack([l0, l1, l2], dim=-1)
    return np.stack([l0, l1, l2], axis=-1)
