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

Miniature articulated body model.

A BodyModel is a template mesh with a joint tree, linear blend skinning
weights and a single-chart UV atlas. The atlas is stored per vertex, so the
cylindrical seam and the poles are represented by duplicated vertices that
share a position; weld() maps those duplicates back together.

Typical use:

    body = default_body()
    vertices = pose_mesh(body, PoseState.identity(body.joint_count))
    grid = uv_rasterize(body, vertices)
    back, fallback = uv_sample(grid, body.uv_coords)

"""

__all__ = [
    "FORMAT_VERSION",
    "DEFAULT_UV_RESOLUTION",
    "BodyModel",
    "PoseState",
    "CameraModel",
    "UVGrid",
    "joint_transforms",
    "pose_mesh",
    "subdivide",
    "uv_rasterize",
    "uv_sample",
    "laplacian_operator",
    "UniformLaplacian",
    "build_body",
    "default_body",
    "load_skeleton",
    "load_body_model",
    "save_body_model",
]

from dataclasses import dataclass, field
import json
import logging
import os.path

import numpy as np
import scipy.ndimage
import scipy.sparse
from scipy.spatial.transform import Rotation
import torch

from qcore.caching import cached_per_instance

from . import mesh
from .errors import CorruptArtifactError, InvalidInputError, MissingArtifactError

_log = logging.getLogger(__name__)

FORMAT_VERSION = 1
DEFAULT_UV_RESOLUTION = (128, 128)
SKELETON_PATH = os.path.join(os.path.dirname(__file__), "data", "skeleton.json")

# an atlas is checked for overlap by rasterizing it at this resolution
_ATLAS_CHECK_RESOLUTION = (256, 256)


class BodyModel:
    """Template mesh, skeleton, skinning weights and UV atlas.

    Instances are treated as immutable after construction; derived geometry
    (edges, welds, the Laplacian, UV rasterization plans) is cached per
    instance.

    """

    def __init__(
        self,
        template_vertices,
        faces,
        joint_rest_positions,
        parent_index,
        skin_weights,
        uv_coords,
        joint_names=None,
    ):
        self.template_vertices = np.asarray(template_vertices, dtype=np.float64)
        self.faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
        self.joint_rest_positions = np.asarray(joint_rest_positions, dtype=np.float64)
        self.parent_index = np.asarray(parent_index, dtype=np.int64)
        self.skin_weights = np.asarray(skin_weights, dtype=np.float64)
        self.uv_coords = np.asarray(uv_coords, dtype=np.float64)
        if joint_names is None:
            joint_names = ["joint_%d" % k for k in range(len(self.parent_index))]
        self.joint_names = list(joint_names)
        self._validate()

    @property
    def vertex_count(self):
        return len(self.template_vertices)

    @property
    def joint_count(self):
        return len(self.parent_index)

    def _validate(self):
        v = self.vertex_count
        k = self.joint_count
        if self.template_vertices.shape != (v, 3):
            raise InvalidInputError("template_vertices must be V x 3")
        if self.joint_rest_positions.shape != (k, 3):
            raise InvalidInputError(
                "joint_rest_positions has shape %r, expected (%d, 3)"
                % (self.joint_rest_positions.shape, k)
            )
        if self.skin_weights.shape != (v, k):
            raise InvalidInputError(
                "skin_weights has shape %r, expected (%d, %d)"
                % (self.skin_weights.shape, v, k)
            )
        if self.uv_coords.shape != (v, 2):
            raise InvalidInputError("uv_coords must be V x 2")
        if len(self.joint_names) != k:
            raise InvalidInputError("expected %d joint names" % k)
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= v):
            raise InvalidInputError("faces reference vertices outside [0, %d)" % v)
        if (self.skin_weights < 0).any():
            raise InvalidInputError("skin weights must be nonnegative")
        row_error = np.abs(self.skin_weights.sum(axis=1) - 1.0)
        if v and row_error.max() > 1e-6:
            raise InvalidInputError(
                "skin weight row %d sums to %r"
                % (int(row_error.argmax()), 1.0 + float(row_error.max()))
            )
        # the root comes first and every parent precedes its children, which
        # makes the joints a single tree and gives forward kinematics its order
        if k == 0 or self.parent_index[0] != -1:
            raise InvalidInputError("joint 0 must be the root (parent -1)")
        for j in range(1, k):
            if not 0 <= self.parent_index[j] < j:
                raise InvalidInputError(
                    "joint %d has parent %d; parents must precede children"
                    % (j, self.parent_index[j])
                )

    @cached_per_instance()
    def edges(self):
        return mesh.unique_edges(self.faces)

    @cached_per_instance()
    def weld(self):
        return mesh.weld_map(self.template_vertices)

    @cached_per_instance()
    def laplacian(self):
        return UniformLaplacian(self.vertex_count, self.edges()[0])

    @cached_per_instance()
    def uv_plan(self, resolution):
        return _rasterize_plan(self.uv_coords, self.faces, resolution)

    def rest_normals(self):
        return mesh.vertex_normals(self.template_vertices, self.faces, self.weld())

    def __repr__(self):
        return "BodyModel(V=%d, F=%d, K=%d)" % (
            self.vertex_count,
            len(self.faces),
            self.joint_count,
        )


@dataclass(frozen=True, eq=False)
class PoseState:
    """Axis-angle rotation per joint plus a root translation at one frame."""

    joint_rotations: np.ndarray
    root_translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    timestamp: int = 0

    def __post_init__(self):
        object.__setattr__(
            self,
            "joint_rotations",
            np.asarray(self.joint_rotations, dtype=np.float64).reshape(-1, 3),
        )
        object.__setattr__(
            self,
            "root_translation",
            np.asarray(self.root_translation, dtype=np.float64).reshape(3),
        )
        if self.timestamp < 0:
            raise InvalidInputError("timestamp must be nonnegative")

    @classmethod
    def identity(cls, joint_count, timestamp=0):
        return cls(np.zeros((joint_count, 3)), np.zeros(3), timestamp)

    @property
    def joint_count(self):
        return len(self.joint_rotations)

    def is_finite(self):
        return bool(
            np.isfinite(self.joint_rotations).all()
            and np.isfinite(self.root_translation).all()
        )

    def flat(self):
        """The network input: axis-angle rotations concatenated, 3K values."""
        return self.joint_rotations.reshape(-1).copy()

    def same_pose(self, other):
        """True if rotations and translation match exactly; timestamps are ignored."""
        return bool(
            np.array_equal(self.joint_rotations, other.joint_rotations)
            and np.array_equal(self.root_translation, other.root_translation)
        )

    def to_dict(self):
        return {
            "joint_rotations": self.joint_rotations.tolist(),
            "root_translation": self.root_translation.tolist(),
            "timestamp": int(self.timestamp),
        }

    @classmethod
    def from_dict(cls, data):
        return cls(data["joint_rotations"], data["root_translation"], data["timestamp"])


@dataclass(frozen=True, eq=False)
class CameraModel:
    """Pinhole camera: x_cam = rotation @ x_world + translation, +z forward, y down."""

    rotation: np.ndarray
    translation: np.ndarray
    focal: np.ndarray
    principal_point: np.ndarray
    image_size: tuple

    def __post_init__(self):
        rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(
            self, "translation", np.asarray(self.translation, dtype=np.float64)
        )
        object.__setattr__(self, "focal", np.asarray(self.focal, dtype=np.float64))
        object.__setattr__(
            self, "principal_point", np.asarray(self.principal_point, dtype=np.float64)
        )
        object.__setattr__(self, "image_size", tuple(int(s) for s in self.image_size))
        if np.abs(rotation @ rotation.T - np.eye(3)).max() > 1e-6:
            raise InvalidInputError("camera rotation is not orthonormal")
        if (self.focal <= 0).any():
            raise InvalidInputError("focal lengths must be positive")

    @classmethod
    def look_at(cls, eye, target, focal, image_size, up=(0.0, 1.0, 0.0)):
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        rotation = np.stack([right, down, forward])
        height, width = image_size
        focal = np.broadcast_to(np.asarray(focal, dtype=np.float64), (2,)).copy()
        return cls(
            rotation,
            -rotation @ eye,
            focal,
            np.array([width / 2.0, height / 2.0]),
            (height, width),
        )

    @property
    def height(self):
        return self.image_size[0]

    @property
    def width(self):
        return self.image_size[1]

    @property
    def center(self):
        return -self.rotation.T @ self.translation

    def to_camera(self, points):
        """World to camera coordinates; torch tensors stay differentiable."""
        if isinstance(points, torch.Tensor):
            r = torch.as_tensor(self.rotation, dtype=points.dtype, device=points.device)
            t = torch.as_tensor(
                self.translation, dtype=points.dtype, device=points.device
            )
            return points @ r.T + t
        return np.asarray(points) @ self.rotation.T + self.translation

    def project(self, points):
        """Returns (pixel xy, depth); pixel (i, j) is centered at (j + 0.5, i + 0.5)."""
        cam = self.to_camera(points)
        depth = cam[..., 2]
        # python floats keep numpy scalars from swallowing torch tensors
        fx, fy = float(self.focal[0]), float(self.focal[1])
        cx, cy = float(self.principal_point[0]), float(self.principal_point[1])
        x = fx * cam[..., 0] / depth + cx
        y = fy * cam[..., 1] / depth + cy
        if isinstance(points, torch.Tensor):
            return torch.stack([x, y], dim=-1), depth
        return np.stack([x, y], axis=-1), depth

    def rays(self, pixels):
        """World-space (origins, unit directions) through pixel centers (row, col)."""
        pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
        x = (pixels[:, 1] + 0.5 - self.principal_point[0]) / self.focal[0]
        y = (pixels[:, 0] + 0.5 - self.principal_point[1]) / self.focal[1]
        d = np.stack([x, y, np.ones_like(x)], axis=1) @ self.rotation
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        return np.broadcast_to(self.center, d.shape).copy(), d

    def all_pixels(self):
        rows, cols = np.meshgrid(
            np.arange(self.height), np.arange(self.width), indexing="ij"
        )
        return np.stack([rows.ravel(), cols.ravel()], axis=1)

    def to_dict(self):
        return {
            "rotation": self.rotation.tolist(),
            "translation": self.translation.tolist(),
            "focal": self.focal.tolist(),
            "principal_point": self.principal_point.tolist(),
            "image_size": list(self.image_size),
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            data["rotation"],
            data["translation"],
            data["focal"],
            data["principal_point"],
            data["image_size"],
        )


@dataclass
class UVGrid:
    """An H x W x C feature image over the atlas plus its validity mask.

    values is a numpy array or a torch tensor; valid is a boolean numpy array.

    """

    values: object
    valid: np.ndarray

    @property
    def resolution(self):
        return self.valid.shape

    @property
    def channels(self):
        return self.values.shape[-1]


# ===================================================
# Skinning
# ===================================================


def joint_transforms(body, pose):
    """Forward kinematics: K x 4 x 4 skinning transforms T_k (rest space to posed)."""
    if pose.joint_count != body.joint_count:
        raise InvalidInputError(
            "pose has %d joints, body has %d" % (pose.joint_count, body.joint_count)
        )
    rotations = Rotation.from_rotvec(pose.joint_rotations).as_matrix()
    rest = body.joint_rest_positions
    world = np.zeros((body.joint_count, 4, 4))
    for k in range(body.joint_count):
        local = np.eye(4)
        local[:3, :3] = rotations[k]
        parent = body.parent_index[k]
        if parent < 0:
            local[:3, 3] = rest[k] + pose.root_translation
            world[k] = local
        else:
            local[:3, 3] = rest[k] - rest[parent]
            world[k] = world[parent] @ local
    skinning = world.copy()
    skinning[:, :3, 3] -= np.einsum("kij,kj->ki", world[:, :3, :3], rest)
    return skinning


def pose_mesh(body, pose):
    """Linear blend skinning of the template: V x 3 posed vertices."""
    transforms = joint_transforms(body, pose)
    blended = np.einsum("vk,kij->vij", body.skin_weights, transforms)
    return (
        np.einsum("vij,vj->vi", blended[:, :3, :3], body.template_vertices)
        + blended[:, :3, 3]
    )


# ===================================================
# Subdivision and the Laplacian
# ===================================================


def subdivide(body):
    """Splits every face into four at its edge midpoints.

    The new vertex count is V + E; midpoint attributes (position, skin weights,
    UV) are averages of the edge endpoints.

    Open meshes are accepted: a boundary edge gets a midpoint like any other
    edge and both of its halves stay on the boundary. Only edges shared by
    more than two faces are rejected.

    """
    edges, face_edges = body.edges()
    incidence = np.bincount(face_edges.ravel(), minlength=len(edges))
    if (incidence > 2).any():
        bad = edges[int(np.argmax(incidence))]
        raise InvalidInputError(
            "non-manifold edge (%d, %d) has %d incident faces"
            % (bad[0], bad[1], incidence.max())
        )

    def with_midpoints(values):
        return np.concatenate(
            [values, 0.5 * (values[edges[:, 0]] + values[edges[:, 1]])]
        )

    m = face_edges + body.vertex_count
    a, b, c = body.faces[:, 0], body.faces[:, 1], body.faces[:, 2]
    # m[:, 0] lies on bc, m[:, 1] on ca, m[:, 2] on ab
    faces = np.concatenate(
        [
            np.stack([a, m[:, 2], m[:, 1]], axis=1),
            np.stack([b, m[:, 0], m[:, 2]], axis=1),
            np.stack([c, m[:, 1], m[:, 0]], axis=1),
            np.stack([m[:, 0], m[:, 1], m[:, 2]], axis=1),
        ]
    )
    return BodyModel(
        with_midpoints(body.template_vertices),
        faces,
        body.joint_rest_positions,
        body.parent_index,
        with_midpoints(body.skin_weights),
        with_midpoints(body.uv_coords),
        joint_names=body.joint_names,
    )


class UniformLaplacian:
    """Uniform graph Laplacian L = I - D^-1 A of a mesh.

    L[i, i] = 1 and L[i, j] = -1 / deg(i) for every neighbor j. Applying it
    with @ computes field - (A @ field) / deg, so constant fields map to zero up
    to rounding; matrix holds the same operator as a scipy sparse matrix.

    """

    def __init__(self, vertex_count, edges):
        rows = np.concatenate([edges[:, 0], edges[:, 1]])
        cols = np.concatenate([edges[:, 1], edges[:, 0]])
        degree = np.bincount(rows, minlength=vertex_count).astype(np.float64)
        if (degree == 0).any():
            raise InvalidInputError("vertex %d is isolated" % int(np.argmin(degree)))
        self.degree = degree
        self.adjacency = scipy.sparse.csr_matrix(
            (np.ones(len(rows)), (rows, cols)), shape=(vertex_count, vertex_count)
        )
        self.matrix = (
            scipy.sparse.identity(vertex_count, format="csr")
            - scipy.sparse.diags(1.0 / degree) @ self.adjacency
        ).tocsr()
        coo = self.adjacency.tocoo()
        self._indices = torch.as_tensor(np.stack([coo.row, coo.col]), dtype=torch.int64)
        self._values = coo.data

    @property
    def shape(self):
        return self.matrix.shape

    def __matmul__(self, field):
        if isinstance(field, torch.Tensor):
            adjacency = torch.sparse_coo_tensor(
                self._indices,
                torch.as_tensor(self._values, dtype=field.dtype),
                self.shape,
            )
            degree = torch.as_tensor(self.degree, dtype=field.dtype)
            flat = field.reshape(field.shape[0], -1)
            neighbors = torch.sparse.mm(adjacency, flat).reshape(field.shape)
            return field - neighbors / degree.reshape((-1,) + (1,) * (field.ndim - 1))
        field = np.asarray(field, dtype=np.float64)
        neighbors = self.adjacency @ field
        return field - neighbors / self.degree.reshape((-1,) + (1,) * (field.ndim - 1))


def laplacian_operator(body):
    """The body's uniform Laplacian; computed once per model."""
    return body.laplacian()


# ===================================================
# UV mapping
# ===================================================


@dataclass(frozen=True)
class _RasterPlan:
    texels: np.ndarray  # T flat texel indices
    vertex_ids: np.ndarray  # T x 3
    weights: np.ndarray  # T x 3 barycentric weights
    valid: np.ndarray  # H x W


def _rasterize_plan(uv_coords, faces, resolution):
    height, width = resolution
    tri = uv_coords[faces] * np.array([width, height], dtype=np.float64)
    pix, face = mesh.triangle_pixel_pairs(tri, height, width)
    centers = np.stack([pix % width + 0.5, pix // width + 0.5], axis=1)
    t = tri[face]
    with np.errstate(divide="ignore", invalid="ignore"):
        bary = mesh.barycentric_coordinates(centers, t[:, 0], t[:, 1], t[:, 2])
    inside = np.isfinite(bary).all(axis=1) & (bary >= -1e-9).all(axis=1)
    pix, face, bary = pix[inside], face[inside], bary[inside]
    # pairs are ordered by face, so the first hit per texel is the lowest face
    texels, first = np.unique(pix, return_index=True)
    valid = np.zeros(height * width, dtype=bool)
    valid[texels] = True
    return _RasterPlan(
        texels, faces[face[first]], bary[first], valid.reshape(height, width)
    )


def uv_rasterize(body, per_vertex_attr, resolution=DEFAULT_UV_RESOLUTION):
    """Inverse UV mapping: per-vertex attributes to an H x W x C UVGrid.

    Texel (i, j) samples UV point ((j + 0.5) / W, (i + 0.5) / H). Texels
    outside every UV triangle are invalid and zero. Torch input stays
    differentiable.

    """
    is_torch = isinstance(per_vertex_attr, torch.Tensor)
    attr = per_vertex_attr if is_torch else np.asarray(per_vertex_attr)
    if attr.shape[0] != body.vertex_count:
        raise InvalidInputError(
            "attribute has %d rows, body has %d vertices"
            % (attr.shape[0], body.vertex_count)
        )
    if attr.ndim == 1:
        attr = attr[:, None]
    plan = body.uv_plan(tuple(resolution))
    height, width = plan.valid.shape
    channels = attr.shape[1]
    if is_torch:
        ids = torch.as_tensor(plan.vertex_ids)
        w = torch.as_tensor(plan.weights, dtype=attr.dtype)
        values = (attr[ids] * w[..., None]).sum(dim=1)
        flat = attr.new_zeros((height * width, channels))
        flat = flat.index_copy(0, torch.as_tensor(plan.texels), values)
        grid = flat.reshape(height, width, channels)
    else:
        values = (attr[plan.vertex_ids] * plan.weights[..., None]).sum(axis=1)
        flat = np.zeros((height * width, channels), dtype=np.result_type(attr, 0.0))
        flat[plan.texels] = values
        grid = flat.reshape(height, width, channels)
    return UVGrid(grid, plan.valid)


def uv_sample(grid, uv_points):
    """Bilinear lookup restricted to valid texels.

    Returns (samples N x C, fallback N booleans). Where all four neighbors
    are invalid the nearest valid texel is used and the point is flagged.

    """
    uv_points = np.asarray(uv_points, dtype=np.float64).reshape(-1, 2)
    if (uv_points < -1e-9).any() or (uv_points > 1.0 + 1e-9).any():
        raise InvalidInputError("uv points must lie in [0, 1]^2")
    height, width = grid.valid.shape
    x = uv_points[:, 0] * width - 0.5
    y = uv_points[:, 1] * height - 0.5
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    fx = x - x0
    fy = y - y0
    corners = []
    for dy, dx, w in (
        (0, 0, (1 - fy) * (1 - fx)),
        (0, 1, (1 - fy) * fx),
        (1, 0, fy * (1 - fx)),
        (1, 1, fy * fx),
    ):
        cy = np.clip(y0 + dy, 0, height - 1)
        cx = np.clip(x0 + dx, 0, width - 1)
        corners.append((cy * width + cx, w * grid.valid[cy, cx]))
    index = np.stack([c[0] for c in corners], axis=1)
    weight = np.stack([c[1] for c in corners], axis=1)
    total = weight.sum(axis=1)
    fallback = total <= 1e-12
    if fallback.any():
        _, (ny, nx) = scipy.ndimage.distance_transform_edt(
            ~grid.valid, return_indices=True
        )
        ry = np.clip(np.round(y[fallback]).astype(np.int64), 0, height - 1)
        rx = np.clip(np.round(x[fallback]).astype(np.int64), 0, width - 1)
        index[fallback, 0] = ny[ry, rx] * width + nx[ry, rx]
        weight[fallback] = np.array([1.0, 0.0, 0.0, 0.0])
        total = np.where(fallback, 1.0, total)
    weight = weight / total[:, None]

    values = grid.values
    channels = values.shape[-1]
    if isinstance(values, torch.Tensor):
        flat = values.reshape(height * width, channels)
        w = torch.as_tensor(weight, dtype=flat.dtype)
        samples = (flat[torch.as_tensor(index)] * w[..., None]).sum(dim=1)
    else:
        flat = np.asarray(values).reshape(height * width, channels)
        samples = (flat[index] * weight[..., None]).sum(axis=1)
    return samples, fallback


def validate_atlas(body, resolution=_ATLAS_CHECK_RESOLUTION):
    """Rejects atlases with out-of-range, degenerate or overlapping UV triangles."""
    uv = body.uv_coords
    if (uv < 0).any() or (uv > 1).any():
        raise InvalidInputError("uv coordinates must lie in [0, 1]^2")
    tri = uv[body.faces]
    area = 0.5 * (
        (tri[:, 1, 0] - tri[:, 0, 0]) * (tri[:, 2, 1] - tri[:, 0, 1])
        - (tri[:, 2, 0] - tri[:, 0, 0]) * (tri[:, 1, 1] - tri[:, 0, 1])
    )
    if len(area) and np.abs(area).min() <= 1e-12:
        raise InvalidInputError(
            "face %d has a degenerate UV triangle" % int(np.abs(area).argmin())
        )
    height, width = resolution
    scaled = tri * np.array([width, height], dtype=np.float64)
    pix, face = mesh.triangle_pixel_pairs(scaled, height, width)
    centers = np.stack([pix % width + 0.5, pix // width + 0.5], axis=1)
    t = scaled[face]
    bary = mesh.barycentric_coordinates(centers, t[:, 0], t[:, 1], t[:, 2])
    strictly_inside = (bary > 1e-6).all(axis=1)
    counts = np.bincount(pix[strictly_inside], minlength=height * width)
    if (counts > 1).any():
        texel = int(np.argmax(counts))
        raise InvalidInputError(
            "overlapping UV triangles at texel (%d, %d)"
            % (texel // width, texel % width)
        )


# ===================================================
# Construction and persistence
# ===================================================


def load_skeleton(path=SKELETON_PATH):
    with open(path, encoding="utf-8") as f:
        return json.load(f)


def _segment_distance(points, start, end):
    seg = end - start
    length2 = float(seg @ seg)
    if length2 == 0.0:
        return np.linalg.norm(points - start, axis=1)
    t = np.clip((points - start) @ seg / length2, 0.0, 1.0)
    return np.linalg.norm(points - (start + t[:, None] * seg), axis=1)


def build_body(skeleton=None, n_lon=None, n_rings=None):
    """Builds the procedural body from a skeleton description.

    The surface is a closed surface of revolution with an elliptical cross
    section. Its atlas is a cylindrical unwrap: u follows the longitude, v
    runs from the top pole (v = 0) to the bottom pole (v = 1). The seam
    column and the poles are duplicated so every face has its own
    non-degenerate UV triangle.

    """
    if skeleton is None:
        skeleton = load_skeleton()
    n_lon = n_lon or skeleton["resolution"]["n_lon"]
    n_rings = n_rings or skeleton["resolution"]["n_rings"]
    surface = skeleton["surface"]
    profile = np.asarray(surface["profile"], dtype=np.float64)
    top, bottom = surface["top"], surface["bottom"]

    heights = top - (np.arange(n_rings) + 1.0) / (n_rings + 1.0) * (top - bottom)
    rx = np.interp(heights, profile[:, 0], profile[:, 1])
    rz = np.interp(heights, profile[:, 0], profile[:, 2])
    phi = 2.0 * np.pi * np.arange(n_lon) / n_lon
    ring = np.stack(
        [
            rx[:, None] * np.cos(phi)[None, :],
            np.broadcast_to(heights[:, None], (n_rings, n_lon)),
            -rz[:, None] * np.sin(phi)[None, :],
        ],
        axis=-1,
    )
    # the seam column repeats column 0 exactly
    ring = np.concatenate([ring, ring[:, :1]], axis=1)
    columns = n_lon + 1
    ring_uv = np.stack(
        np.meshgrid(
            np.arange(columns) / n_lon,
            0.05 + 0.9 * np.arange(n_rings) / max(n_rings - 1, 1),
            indexing="xy",
        ),
        axis=-1,
    )
    pole_u = (np.arange(n_lon) + 0.5) / n_lon
    vertices = np.concatenate(
        [
            ring.reshape(-1, 3),
            np.tile([0.0, top, 0.0], (n_lon, 1)),
            np.tile([0.0, bottom, 0.0], (n_lon, 1)),
        ]
    )
    uv = np.concatenate(
        [
            ring_uv.reshape(-1, 2),
            np.stack([pole_u, np.zeros(n_lon)], axis=1),
            np.stack([pole_u, np.ones(n_lon)], axis=1),
        ]
    )
    top_pole = n_rings * columns
    bottom_pole = top_pole + n_lon

    def idx(r, j):
        return r * columns + j

    faces = []
    for j in range(n_lon):
        faces.append([top_pole + j, idx(0, j), idx(0, j + 1)])
        faces.append(
            [bottom_pole + j, idx(n_rings - 1, j + 1), idx(n_rings - 1, j)]
        )
        for r in range(n_rings - 1):
            faces.append([idx(r, j), idx(r + 1, j), idx(r + 1, j + 1)])
            faces.append([idx(r, j), idx(r + 1, j + 1), idx(r, j + 1)])

    joints = skeleton["joints"]
    names = [j["name"] for j in joints]
    parents = [-1 if j["parent"] is None else names.index(j["parent"]) for j in joints]
    rest = np.asarray([j["position"] for j in joints], dtype=np.float64)
    distances = np.stack(
        [
            _segment_distance(
                vertices, np.asarray(j["position"]), np.asarray(j["bone_end"])
            )
            for j in joints
        ],
        axis=1,
    )
    logits = -((distances / skeleton["skin_falloff"]) ** 2)
    logits -= logits.max(axis=1, keepdims=True)
    weights = np.exp(logits)
    weights /= weights.sum(axis=1, keepdims=True)

    body = BodyModel(vertices, faces, rest, parents, weights, uv, joint_names=names)
    validate_atlas(body)
    return body


def default_body(subdivisions=1, skeleton=None, n_lon=None, n_rings=None):
    body = build_body(skeleton, n_lon=n_lon, n_rings=n_rings)
    for _ in range(subdivisions):
        body = subdivide(body)
    _log.debug("built default body: %r", body)
    return body


def save_body_model(body, path):
    data = {
        "format_version": FORMAT_VERSION,
        "template_vertices": body.template_vertices.tolist(),
        "faces": body.faces.tolist(),
        "joint_names": body.joint_names,
        "joint_rest_positions": body.joint_rest_positions.tolist(),
        "parent_index": body.parent_index.tolist(),
        "skin_weights": body.skin_weights.tolist(),
        "uv_coords": body.uv_coords.tolist(),
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, sort_keys=True)


def load_body_model(path):
    """Reads a model file and validates it, atlas included."""
    if not os.path.exists(path):
        raise MissingArtifactError(path, "body model")
    try:
        with open(path, encoding="utf-8") as f:
            data = json.load(f)
    except (OSError, ValueError) as e:
        raise CorruptArtifactError(path, str(e))
    if data.get("format_version") != FORMAT_VERSION:
        raise CorruptArtifactError(
            path, "unsupported format_version %r" % (data.get("format_version"),)
        )
    try:
        body = BodyModel(
            data["template_vertices"],
            data["faces"],
            data["joint_rest_positions"],
            data["parent_index"],
            data["skin_weights"],
            data["uv_coords"],
            joint_names=data.get("joint_names"),
        )
    except KeyError as e:
        raise CorruptArtifactError(path, "missing field %s" % e)
    validate_atlas(body)
    return body
