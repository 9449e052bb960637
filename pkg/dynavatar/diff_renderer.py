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

Differentiable renderers.

rasterize_soft() renders triangle meshes. Visibility is a hard z-buffer and
attributes are interpolated with screen-space barycentrics, so rgb, normals
and depth are differentiable inside each face. The silhouette is soft along
contour edges (mesh boundaries and front/back transitions), where each face
contributes sigmoid(d / sigma) and faces are aggregated as
1 - prod(1 - p_f).

sphere_trace() renders signed distance fields. Marching is done without
gradients; hit points are then made differentiable with respect to the field
parameters through the implicit-function relation

    x_hat = x0 - d * (s(x0; theta) - s0) / (n . d)

where n is the field gradient at the hit and s0 the detached value there.

A field is any object with an sdf(points) method taking and returning torch
tensors; fields that can shade also provide color(points, normals, view_dirs).

"""

__all__ = [
    "DEFAULT_SOFTNESS",
    "RasterOutput",
    "ImplicitRenderOutput",
    "TraceSettings",
    "default_camera",
    "front_facing",
    "rasterize_soft",
    "sphere_trace",
    "ray_min_sdf",
    "marching_cubes",
    "write_png",
    "read_png",
]

from dataclasses import dataclass
import logging

import imageio.v3 as iio
import numpy as np
import skimage.measure
import torch
import torch.nn.functional as F

from . import mesh
from .asserts import assert_all_between
from .body_model import CameraModel
from .errors import InvalidInputError

_log = logging.getLogger(__name__)

# edge blur width sigma as a fraction of the image diagonal (dimensionless);
# sigma = softness * hypot(H, W) pixels, about 0.72 px at 128x128
DEFAULT_SOFTNESS = 4e-3
# faces are considered out to this many softness widths from their contour
_MARGIN_WIDTHS = 7.0
_NEAR = 1e-6
_BIG = 1e30


@dataclass
class RasterOutput:
    """Images produced by rasterize_soft.

    rgb, silhouette, normal_map and depth are torch tensors (H x W x C or
    H x W). head_rgb holds the interpolated attribute before compositing
    against the background. face_index and coverage describe the hard
    z-buffer and are numpy arrays.

    """

    rgb: torch.Tensor
    silhouette: torch.Tensor
    normal_map: torch.Tensor
    depth: torch.Tensor
    head_rgb: torch.Tensor
    face_index: np.ndarray

    @property
    def coverage(self):
        return self.face_index >= 0

    @property
    def image_size(self):
        return self.face_index.shape


@dataclass
class ImplicitRenderOutput:
    """Result of sphere_trace.

    Per-ray arrays (pixels, hit_mask, soft_mask) have one row per traced
    pixel; per-hit tensors (surface_points, surface_normals, colors,
    differentiable) have one row per hit, in pixel order.

    """

    pixels: np.ndarray
    hit_mask: np.ndarray
    surface_points: torch.Tensor
    surface_normals: torch.Tensor
    colors: object
    differentiable: np.ndarray
    soft_mask: object
    image_size: tuple

    @property
    def hit_count(self):
        return int(self.hit_mask.sum())

    def hit_pixels(self):
        return self.pixels[self.hit_mask]

    def hit_image(self):
        image = np.zeros(self.image_size, dtype=bool)
        rows, cols = self.hit_pixels().T
        image[rows, cols] = True
        return image

    def color_image(self, background=0.0):
        height, width = self.image_size
        image = np.full((height, width, 3), background, dtype=np.float64)
        if self.colors is not None and self.hit_count:
            rows, cols = self.hit_pixels().T
            image[rows, cols] = self.colors.detach().cpu().numpy()
        return image


@dataclass(frozen=True)
class TraceSettings:
    epsilon: float = 1e-4
    max_steps: int = 64
    bound_radius: float = 1.5
    bound_center: tuple = (0.0, 0.0, 0.0)
    grazing_threshold: float = 1e-3


def default_camera(image_size=(128, 128), focal=200.0, distance=3.0, height=-0.12):
    """The frontal camera used for datasets: looks at the body center along -z."""
    return CameraModel.look_at(
        (0.0, height, distance), (0.0, height, 0.0), focal, image_size
    )


# ===================================================
# Mesh rasterization
# ===================================================


def _signed_area2(tri):
    return (tri[:, 1, 0] - tri[:, 0, 0]) * (tri[:, 2, 1] - tri[:, 0, 1]) - (
        tri[:, 2, 0] - tri[:, 0, 0]
    ) * (tri[:, 1, 1] - tri[:, 0, 1])


def front_facing(vertices, faces, camera):
    """Boolean per face: True if the face normal points toward the camera."""
    vertices = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    normals = mesh.face_normals(vertices, faces)
    centroids = vertices[faces].mean(axis=1)
    return ((camera.center - centroids) * normals).sum(axis=1) > 0


def _contour_edges(vertices_np, faces, usable, camera, weld):
    """F x 3 booleans: edge k of face f lies on a contour."""
    keyed = faces if weld is None else np.asarray(weld)[faces]
    _, face_edges = mesh.unique_edges(keyed)
    facing = front_facing(vertices_np, faces, camera)
    edge_count = face_edges.max() + 1 if len(face_edges) else 0
    front = np.bincount(
        face_edges[usable & facing].ravel(), minlength=edge_count
    )
    back = np.bincount(face_edges[usable & ~facing].ravel(), minlength=edge_count)
    contour = ((front + back) == 1) | ((front > 0) & (back > 0))
    return contour[face_edges]


def _pixel_centers(pix, width, dtype=None):
    centers = np.stack([pix % width + 0.5, pix // width + 0.5], axis=1).astype(
        np.float64
    )
    if dtype is None:
        return centers
    return torch.as_tensor(centers, dtype=dtype)


def _empty_raster(height, width, channels, dtype):
    zeros = torch.zeros((height, width), dtype=dtype)
    return RasterOutput(
        rgb=torch.zeros((height, width, channels), dtype=dtype),
        silhouette=zeros,
        normal_map=torch.zeros((height, width, 3), dtype=dtype),
        depth=zeros.clone(),
        head_rgb=torch.zeros((height, width, channels), dtype=dtype),
        face_index=np.full((height, width), -1, dtype=np.int64),
    )


def rasterize_soft(
    vertices,
    faces,
    per_vertex_color,
    camera,
    softness=DEFAULT_SOFTNESS,
    weld=None,
    background=0.0,
):
    """Renders a triangle mesh into a RasterOutput.

    vertices (V x 3) and per_vertex_color (V x C) may be numpy arrays or torch
    tensors; outputs are torch tensors in the dtype of vertices. softness is
    the edge blur width as a fraction of the image diagonal, so the blur is
    softness * hypot(H, W) pixels. weld maps seam duplicates to a
    shared id so they don't count as mesh boundaries. Degenerate faces and
    faces crossing the camera plane contribute nothing.

    """
    if softness <= 0:
        raise InvalidInputError("softness must be positive, got %r" % (softness,))
    verts = torch.as_tensor(vertices)
    if not verts.is_floating_point():
        verts = verts.double()
    dtype = verts.dtype
    colors = torch.as_tensor(per_vertex_color, dtype=dtype)
    if colors.ndim == 1:
        colors = colors[:, None]
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    height, width = camera.image_size
    if verts.ndim != 2 or verts.shape[1] != 3:
        raise InvalidInputError("vertices must be V x 3")
    if colors.shape[0] != verts.shape[0]:
        raise InvalidInputError(
            "%d colors for %d vertices" % (colors.shape[0], verts.shape[0])
        )
    if not torch.isfinite(verts).all():
        raise InvalidInputError("vertices must be finite")
    channels = colors.shape[1]
    if len(faces) == 0 or verts.shape[0] == 0:
        return _empty_raster(height, width, channels, dtype)

    xy, depth = camera.project(verts)
    verts_np = verts.detach().cpu().numpy().astype(np.float64)
    xy_np = xy.detach().cpu().numpy().astype(np.float64)
    depth_np = depth.detach().cpu().numpy().astype(np.float64)
    tri_xy = xy_np[faces]
    with np.errstate(invalid="ignore"):
        area2 = _signed_area2(tri_xy)
    usable = (depth_np[faces] > _NEAR).all(axis=1) & (np.abs(area2) > 1e-12)
    usable_faces = np.flatnonzero(usable)
    if len(usable_faces) == 0:
        return _empty_raster(height, width, channels, dtype)

    # hard z-buffer
    pix, local = mesh.triangle_pixel_pairs(tri_xy[usable_faces], height, width)
    face = usable_faces[local]
    tri = tri_xy[face]
    bary = mesh.barycentric_coordinates(
        _pixel_centers(pix, width), tri[:, 0], tri[:, 1], tri[:, 2]
    )
    inside = (bary >= -1e-9).all(axis=1)
    pix, face, bary = pix[inside], face[inside], bary[inside]
    pixel_depth = 1.0 / (bary / depth_np[faces[face]]).sum(axis=1)
    order = np.lexsort((face, pixel_depth, pix))
    hit_pix, first = np.unique(pix[order], return_index=True)
    hit_face = face[order][first]
    face_index = np.full(height * width, -1, dtype=np.int64)
    face_index[hit_pix] = hit_face

    faces_t = torch.as_tensor(faces)
    corner = faces_t[torch.as_tensor(hit_face)]
    tri_t = xy[corner]
    b = mesh.barycentric_coordinates(
        _pixel_centers(hit_pix, width, dtype), tri_t[:, 0], tri_t[:, 1], tri_t[:, 2]
    )

    def scatter(values):
        out = values.new_zeros((height * width,) + values.shape[1:])
        return out.index_copy(0, torch.as_tensor(hit_pix), values)

    def interpolate(attr):
        return (attr[corner] * b[..., None]).sum(dim=1)

    head = scatter(interpolate(colors)).reshape(height, width, channels)
    normals = mesh.vertex_normals(verts, faces, weld)
    normals_cam = normals @ torch.as_tensor(camera.rotation, dtype=dtype).T
    pixel_normals = interpolate(normals_cam)
    pixel_normals = pixel_normals / pixel_normals.norm(dim=1, keepdim=True).clamp_min(
        1e-12
    )
    normal_map = scatter(pixel_normals).reshape(height, width, 3)
    inv_depth = (b / depth[corner]).sum(dim=1)
    depth_map = scatter(1.0 / inv_depth).reshape(height, width)

    silhouette = _soft_silhouette(
        xy, tri_xy, area2, faces, usable, verts_np, camera, softness, weld, dtype
    )
    s = silhouette[..., None]
    rgb = s * head + (1.0 - s) * background
    return RasterOutput(
        rgb=rgb,
        silhouette=silhouette,
        normal_map=normal_map,
        depth=depth_map,
        head_rgb=head,
        face_index=face_index.reshape(height, width),
    )


def _soft_silhouette(
    xy, tri_xy, area2, faces, usable, verts_np, camera, softness, weld, dtype
):
    height, width = camera.image_size
    sigma = softness * float(np.hypot(height, width))
    contour = _contour_edges(verts_np, faces, usable, camera, weld) & usable[:, None]
    soft_faces = np.flatnonzero(usable & contour.any(axis=1))
    hard_faces = np.flatnonzero(usable & ~contour.any(axis=1))
    pix_s, local_s = mesh.triangle_pixel_pairs(
        tri_xy[soft_faces], height, width, margin=_MARGIN_WIDTHS * sigma
    )
    pix_h, local_h = mesh.triangle_pixel_pairs(tri_xy[hard_faces], height, width)
    pix = np.concatenate([pix_s, pix_h])
    face = np.concatenate([soft_faces[local_s], hard_faces[local_h]])
    orient = np.sign(area2[face])
    is_contour = contour[face]

    # signed distances to the three edge lines, positive inside; edge k is
    # opposite corner k
    centers = _pixel_centers(pix, width)
    tri = tri_xy[face]
    line = np.empty((len(face), 3))
    for k in range(3):
        a = tri[:, (k + 1) % 3]
        e = tri[:, (k + 2) % 3] - a
        p = centers - a
        line[:, k] = (
            orient
            * (e[:, 0] * p[:, 1] - e[:, 1] * p[:, 0])
            / np.linalg.norm(e, axis=1)
        )
    inside_internal = np.where(is_contour, True, line >= 0).all(axis=1)
    full = inside_internal & ~is_contour.any(axis=1)

    covered = np.zeros(height * width, dtype=bool)
    covered[pix[full]] = True
    soft = np.flatnonzero(inside_internal & is_contour.any(axis=1))
    log_empty = torch.zeros(height * width, dtype=dtype)
    if len(soft):
        corner = torch.as_tensor(faces[face[soft]])
        tri_t = xy[corner]
        centers_t = torch.as_tensor(centers[soft], dtype=dtype)
        distances = []
        for k in range(3):
            a = tri_t[:, (k + 1) % 3]
            e = tri_t[:, (k + 2) % 3] - a
            p = centers_t - a
            length2 = (e * e).sum(dim=1)
            t = ((p * e).sum(dim=1) / length2).clamp(0.0, 1.0)
            foot = p - t[:, None] * e
            unsigned = ((foot * foot).sum(dim=1)).clamp_min(1e-18).sqrt()
            side = torch.as_tensor(np.sign(line[soft, k]), dtype=dtype)
            side = torch.where(side == 0, torch.ones_like(side), side)
            signed = side * unsigned
            mask = torch.as_tensor(is_contour[soft, k])
            distances.append(torch.where(mask, signed, torch.full_like(signed, _BIG)))
        x = torch.stack(distances, dim=1).min(dim=1).values / sigma
        log_empty = log_empty.index_add(0, torch.as_tensor(pix[soft]), F.logsigmoid(-x))
    silhouette = 1.0 - torch.exp(log_empty)
    silhouette = torch.where(
        torch.as_tensor(covered), torch.ones_like(silhouette), silhouette
    )
    return silhouette.reshape(height, width)


# ===================================================
# Sphere tracing
# ===================================================


def _field_dtype(field):
    if isinstance(field, torch.nn.Module):
        for parameter in field.parameters():
            return parameter.dtype
    return getattr(field, "dtype", torch.float64)


def _bound_interval(origins, dirs, settings):
    center = np.asarray(settings.bound_center, dtype=np.float64)
    oc = origins - center
    b = (oc * dirs).sum(axis=1)
    c = (oc * oc).sum(axis=1) - settings.bound_radius**2
    disc = b * b - c
    root = np.sqrt(np.maximum(disc, 0.0))
    near = np.maximum(-b - root, 0.0)
    far = -b + root
    return near, far, (disc > 0) & (far > near)


def sphere_trace(
    field,
    camera,
    pixels=None,
    settings=None,
    differentiable=True,
    with_color=True,
    soft_mask_samples=0,
    mask_beta=0.005,
):
    """Sphere-traces the zero level set of field for the given (row, col) pixels.

    Rays start where they enter the bounding sphere and stop once |s| drops
    below settings.epsilon (hit), after settings.max_steps steps or once they
    leave the sphere (miss). Hits where the ray grazes the surface are
    reported but left out of the differentiable set.

    With soft_mask_samples > 0 the output also carries a differentiable soft
    hit mask sigmoid(-s_min / mask_beta), s_min being the smallest field value
    among evenly spaced samples along the ray and the hit point.

    """
    settings = settings or TraceSettings()
    if pixels is None:
        pixels = camera.all_pixels()
    pixels = np.asarray(pixels, dtype=np.int64).reshape(-1, 2)
    dtype = _field_dtype(field)
    origins_np, dirs_np = camera.rays(pixels)
    near, far, inside = _bound_interval(origins_np, dirs_np, settings)
    origins = torch.as_tensor(origins_np, dtype=dtype)
    dirs = torch.as_tensor(dirs_np, dtype=dtype)

    t = torch.as_tensor(near, dtype=dtype)
    t_far = torch.as_tensor(far, dtype=dtype)
    active = torch.as_tensor(inside)
    hit = torch.zeros(len(pixels), dtype=torch.bool)
    with torch.no_grad():
        for _ in range(settings.max_steps):
            idx = torch.nonzero(active & ~hit).squeeze(1)
            if len(idx) == 0:
                break
            s = field.sdf(origins[idx] + t[idx, None] * dirs[idx])
            done = s.abs() < settings.epsilon
            hit[idx[done]] = True
            moving = idx[~done]
            t[moving] = t[moving] + s[~done]
            active[moving] = t[moving] <= t_far[moving]
        # rays that ran out of steps are misses unless their last point converged
        idx = torch.nonzero(active & ~hit).squeeze(1)
        if len(idx):
            s = field.sdf(origins[idx] + t[idx, None] * dirs[idx])
            hit[idx[s.abs() < settings.epsilon]] = True

    hit_idx = torch.nonzero(hit).squeeze(1)
    d_hit = dirs[hit_idx]
    x0 = (origins[hit_idx] + t[hit_idx, None] * d_hit).detach().requires_grad_(True)
    if len(hit_idx):
        with torch.enable_grad():
            s = field.sdf(x0)
            (grad,) = torch.autograd.grad(s.sum(), x0, create_graph=differentiable)
    else:
        s = x0.new_zeros(0)
        grad = x0.new_zeros((0, 3))
    # the re-evaluation with grad may differ from the traced value in the last bits
    assert_all_between(
        -2 * settings.epsilon,
        2 * settings.epsilon,
        s.detach(),
        extra="sphere-trace hits must lie on the level set",
    )
    grad_norm = grad.norm(dim=1, keepdim=True).clamp_min(1e-12)
    normals = grad / grad_norm
    cosine = (normals * d_hit).sum(dim=1)
    ok = cosine.detach().abs() >= settings.grazing_threshold
    if differentiable:
        n_dot_d = (grad * d_hit).sum(dim=1).detach()
        n_dot_d = torch.where(ok, n_dot_d, torch.ones_like(n_dot_d))
        step = torch.where(ok, (s - s.detach()) / n_dot_d, torch.zeros_like(s))
        points = x0.detach() - d_hit * step[:, None]
    else:
        points = x0.detach()
        normals = normals.detach()

    colors = None
    if with_color and hasattr(field, "color") and len(hit_idx):
        colors = field.color(points, normals, d_hit)
        if not differentiable:
            colors = colors.detach()

    soft_mask = None
    if soft_mask_samples:
        soft_mask = _soft_hit_mask(
            field,
            origins,
            dirs,
            near,
            far,
            inside,
            hit_idx,
            s if differentiable else s.detach(),
            soft_mask_samples,
            mask_beta,
            dtype,
        )

    hit_np = hit.numpy()
    if len(pixels) and not hit_np.any() and inside.any():
        _log.debug("sphere trace: no hits among %d rays", len(pixels))
    return ImplicitRenderOutput(
        pixels=pixels,
        hit_mask=hit_np,
        surface_points=points,
        surface_normals=normals,
        colors=colors,
        differentiable=ok.numpy(),
        soft_mask=soft_mask,
        image_size=camera.image_size,
    )


def ray_min_sdf(field, origins, dirs, near, far, sample_count):
    """Smallest field value among sample_count evenly spaced points per ray."""
    dtype = origins.dtype
    fractions = (torch.arange(sample_count, dtype=dtype) + 0.5) / sample_count
    near_t = torch.as_tensor(near, dtype=dtype)
    far_t = torch.as_tensor(far, dtype=dtype)
    ts = near_t[:, None] + (far_t - near_t)[:, None] * fractions[None, :]
    points = origins[:, None, :] + ts[..., None] * dirs[:, None, :]
    values = field.sdf(points.reshape(-1, 3)).reshape(len(origins), sample_count)
    return values.min(dim=1).values


def _soft_hit_mask(
    field, origins, dirs, near, far, inside, hit_idx, hit_s, samples, beta, dtype
):
    s_min = torch.full((len(origins),), _BIG, dtype=dtype)
    rays = np.flatnonzero(inside)
    if len(rays):
        idx = torch.as_tensor(rays)
        sampled = ray_min_sdf(
            field, origins[idx], dirs[idx], near[rays], far[rays], samples
        )
        s_min = s_min.index_copy(0, idx, sampled)
    if len(hit_idx):
        s_min = s_min.index_copy(0, hit_idx, torch.minimum(s_min[hit_idx], hit_s))
    return torch.sigmoid(-s_min / beta)


# ===================================================
# Mesh extraction and image files
# ===================================================


def _evaluate_field(field, points, chunk):
    values = []
    for start in range(0, len(points), chunk):
        block = points[start : start + chunk]
        if hasattr(field, "sdf"):
            with torch.no_grad():
                out = field.sdf(torch.as_tensor(block, dtype=_field_dtype(field)))
            values.append(out.detach().cpu().numpy().astype(np.float64))
        else:
            values.append(np.asarray(field(block), dtype=np.float64))
    return np.concatenate(values) if values else np.zeros(0)


def marching_cubes(field, grid_bounds=((-1.0,) * 3, (1.0,) * 3), resolution=64, chunk=65536):
    """Extracts the zero level set of field on a regular grid as a TriangleMesh.

    field is either an object with an sdf() method or a callable mapping
    N x 3 numpy points to N values. A field that doesn't change sign on the
    grid gives an empty mesh.

    """
    lo = np.asarray(grid_bounds[0], dtype=np.float64)
    hi = np.asarray(grid_bounds[1], dtype=np.float64)
    counts = np.broadcast_to(np.asarray(resolution, dtype=np.int64), (3,))
    if (counts < 8).any():
        raise InvalidInputError("marching cubes needs at least 8 samples per axis")
    if (hi <= lo).any():
        raise InvalidInputError("grid bounds are empty")
    axes = [np.linspace(lo[i], hi[i], counts[i]) for i in range(3)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    volume = _evaluate_field(field, grid, chunk).reshape(tuple(counts))
    if not np.isfinite(volume).all():
        raise InvalidInputError("field returned non-finite values")
    if volume.min() >= 0.0 or volume.max() <= 0.0:
        _log.warning("marching cubes: field has no zero crossing on the grid")
        return mesh.TriangleMesh.empty()
    spacing = tuple((hi - lo) / (counts - 1))
    verts, faces, _, _ = skimage.measure.marching_cubes(
        volume, level=0.0, spacing=spacing, gradient_direction="ascent"
    )
    return mesh.TriangleMesh(
        verts.astype(np.float64) + lo, faces.astype(np.int64)
    )


def write_png(path, image):
    """Writes an H x W or H x W x 3 image with values in [0, 1] as 8-bit PNG."""
    if isinstance(image, torch.Tensor):
        image = image.detach().cpu().numpy()
    array = np.asarray(image, dtype=np.float64)
    pixels = np.floor(np.clip(array, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    iio.imwrite(path, pixels, extension=".png")


def read_png(path):
    return iio.imread(path).astype(np.float64) / 255.0
