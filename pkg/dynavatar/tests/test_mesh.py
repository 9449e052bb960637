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

from qcore.asserts import AssertRaises, assert_eq, assert_le, assert_lt

from dynavatar.asserts import assert_array_eq
from dynavatar.errors import InvalidInputError
from dynavatar.mesh import (
    TriangleMesh,
    barycentric_coordinates,
    face_normals,
    icosphere,
    read_obj,
    triangle_pixel_pairs,
    unique_edges,
    uv_sphere,
    vertex_normals,
    weld_map,
)


class TestIcosphere:
    def test_counts(self):
        v, f = icosphere(0)
        assert_eq((12, 3), v.shape)
        assert_eq((20, 3), f.shape)
        assert_eq(30, len(unique_edges(f)[0]))
        v, f = icosphere(2)
        assert_eq(162, len(v))
        assert_eq(320, len(f))

    def test_on_sphere_and_outward(self):
        v, f = icosphere(2, radius=0.7)
        assert_array_eq(np.full(len(v), 0.7), np.linalg.norm(v, axis=1), tolerance=1e-12)
        centroids = v[f].mean(axis=1)
        assert (np.sum(face_normals(v, f) * centroids, axis=1) > 0).all()


def test_uv_sphere_counts():
    v, f = uv_sphere(8, 5)
    assert_eq(8 * 5 + 2, len(v))
    assert_eq(2 * 8 * 5, len(f))
    edges, _ = unique_edges(f)
    # closed genus-0 surface
    assert_eq(2, len(v) - len(edges) + len(f))


def test_unique_edges_opposite_corners():
    edges, face_edges = unique_edges([[0, 1, 2]])
    assert_eq([[0, 1], [0, 2], [1, 2]], edges.tolist())
    assert_eq([[2, 1, 0]], face_edges.tolist())


def test_weld_map():
    vertices = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
    assert_eq([0, 1, 0, 1], weld_map(vertices).tolist())
    assert_eq(0, len(weld_map(np.zeros((0, 3)))))


def test_vertex_normals_radial_on_icosahedron():
    v, f = icosphere(0)
    normals = vertex_normals(v, f)
    assert_array_eq(v, normals, tolerance=1e-9)
    # torch input stays torch
    normals_t = vertex_normals(torch.as_tensor(v), f)
    assert isinstance(normals_t, torch.Tensor)
    assert_array_eq(normals, normals_t, tolerance=1e-12)


def test_vertex_normals_shared_by_welded_duplicates():
    v, f = icosphere(1)
    # duplicate vertex 0 and let one face use the copy
    v2 = np.concatenate([v, v[:1]])
    f2 = f.copy()
    first = np.flatnonzero((f2 == 0).any(axis=1))[0]
    f2[first][f2[first] == 0] = len(v)
    normals = vertex_normals(v2, f2, weld_map(v2))
    assert_array_eq(normals[0], normals[len(v)])
    assert_array_eq(vertex_normals(v, f)[0], normals[0], tolerance=1e-12)


class TestTriangleMesh:
    def test_areas_and_sampling(self):
        v, f = icosphere(3)
        m = TriangleMesh(v, f)
        area = m.face_areas().sum()
        assert_lt(abs(area - 4 * np.pi), 0.2)
        points = m.sample_surface(2000, np.random.default_rng(0))
        radii = np.linalg.norm(points, axis=1)
        assert_le(radii.max(), 1.0 + 1e-12)
        assert_lt(0.98, radii.min())

    def test_sampling_is_seeded(self):
        m = TriangleMesh(*icosphere(1))
        a = m.sample_surface(100, np.random.default_rng(3))
        b = m.sample_surface(100, np.random.default_rng(3))
        assert_array_eq(a, b)

    def test_empty(self):
        m = TriangleMesh.empty()
        assert m.is_empty
        assert_eq(0, len(m.face_areas()))
        with AssertRaises(InvalidInputError):
            m.sample_surface(10, np.random.default_rng(0))

    def test_obj_file(self):
        m = TriangleMesh(*icosphere(1))
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "sphere.obj")
            m.write_obj(path)
            loaded = read_obj(path)
        assert_eq(m.faces.tolist(), loaded.faces.tolist())
        assert_array_eq(m.vertices, loaded.vertices, tolerance=1e-6)


def test_triangle_pixel_pairs_bounding_box():
    xy = np.array([[[0.2, 0.2], [3.8, 0.2], [0.2, 3.8]]])
    pixels, faces = triangle_pixel_pairs(xy, 4, 4)
    assert_eq(list(range(16)), sorted(pixels.tolist()))
    assert_eq([0] * 16, faces.tolist())
    # outside the image
    pixels, _ = triangle_pixel_pairs(xy + 10.0, 4, 4)
    assert_eq(0, len(pixels))


def test_barycentric_coordinates():
    a = np.array([[0.0, 0.0]])
    b = np.array([[1.0, 0.0]])
    c = np.array([[0.0, 1.0]])
    centroid = (a + b + c) / 3.0
    assert_array_eq([[1 / 3, 1 / 3, 1 / 3]], barycentric_coordinates(centroid, a, b, c), 1e-12)
    assert_array_eq([[0.0, 1.0, 0.0]], barycentric_coordinates(b, a, b, c), 1e-12)
