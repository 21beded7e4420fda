"""Minimal software rasterizer: camera-space normal and view-depth maps with
vertex-position gradients for interior pixels.

Forward: perspective z-buffer over a triangle soup.  Each pixel casts a ray
through its center in camera space (direction (x, y, -1), unnormalized), so
the ray parameter t of a hit IS the view-space depth.  The per-pixel normal
is the barycentric blend of smooth vertex normals (area-weighted face-normal
accumulation -- chosen over angle weighting because its derivative is a plain
cross-product chain), renormalized and encoded as (n + 1) / 2.  Background
pixels encode normal (0.5, 0.5, 1.0) and depth = camera.far.

Backward: adjoints flow through the blend weights, the normalizations, the
ray-triangle intersection parameters (t, u, v), and the vertex-normal
accumulation, down to world-space vertex positions.  Pixels on a visibility
discontinuity -- next to background, or across an occlusion depth jump --
get their cotangents zeroed: a hard z-buffer has no useful derivative there.
Smooth face-to-face transitions on a connected surface stay active.

Determinism: faces are rasterized sequentially in index order with a
strict-less depth test, so the lower face id wins exact depth ties and
output bytes do not depend on scheduling.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numba import njit

from .mesh import TriMesh

BACKGROUND_NORMAL = (0.5, 0.5, 1.0)
OCCLUSION_DEPTH_JUMP = 0.02  # relative depth gap that separates surfaces


@dataclass(frozen=True)
class Camera:
    position: tuple[float, float, float]
    look_at: tuple[float, float, float] = (0.0, 0.0, 0.0)
    up: tuple[float, float, float] = (0.0, 0.0, 1.0)
    vfov_deg: float = 45.0
    resolution: tuple[int, int] = (256, 256)  # (width, height)
    near: float = 0.01
    far: float = 100.0

    def __post_init__(self):
        if not 0.0 < self.vfov_deg < 180.0:
            raise ValueError("vertical fov must lie in (0, 180) degrees")
        w, h = self.resolution
        if w < 1 or h < 1:
            raise ValueError("resolution must be at least 1x1")
        if not 0.0 < self.near < self.far:
            raise ValueError("need 0 < near < far")
        fwd = np.subtract(self.look_at, self.position, dtype=np.float64)
        if np.linalg.norm(fwd) < 1e-12:
            raise ValueError("camera position and look-at coincide")
        if np.linalg.norm(np.cross(fwd, np.asarray(self.up, dtype=np.float64))) < 1e-12:
            raise ValueError("up direction is parallel to the view direction")

    def basis(self) -> np.ndarray:
        """Rows: right, up, backward. world -> camera is p @ basis().T after
        subtracting the position; the camera looks along -z."""
        fwd = np.subtract(self.look_at, self.position, dtype=np.float64)
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(self.up, dtype=np.float64))
        right /= np.linalg.norm(right)
        up = np.cross(right, fwd)
        return np.stack([right, up, -fwd])

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64)
                - np.asarray(self.position, dtype=np.float64)) @ self.basis().T

    def tangents(self) -> tuple[float, float]:
        """Half-extent of the image plane at unit distance, per axis."""
        w, h = self.resolution
        ty = float(np.tan(np.radians(self.vfov_deg) * 0.5))
        return ty * w / h, ty


@dataclass
class RenderOutput:
    normal: np.ndarray     # (H, W, 3) encoded camera-space normals in [0, 1]
    depth: np.ndarray      # (H, W) view-space distance, far on background
    coverage: np.ndarray   # (H, W) bool
    face_id: np.ndarray    # (H, W) int64 into the concatenated face soup, -1 = none
    bary: np.ndarray       # (H, W, 2) intersection parameters (u, v)
    boundary: np.ndarray   # (H, W) bool, visibility-discontinuity pixels
    camera: Camera
    meshes: tuple[TriMesh, ...] = field(repr=False, default=())
    single_input: bool = True
    vertex_offsets: np.ndarray = field(repr=False, default=None)
    face_offsets: np.ndarray = field(repr=False, default=None)
    _world_vertices: np.ndarray = field(repr=False, default=None)
    _faces: np.ndarray = field(repr=False, default=None)

    def which_mesh(self, face_id: int) -> int:
        """Index of the input mesh owning a concatenated face id."""
        return int(np.searchsorted(self.face_offsets[1:], face_id, side="right"))


@njit(cache=True)
def _raster_kernel(verts, faces, width, height, tan_x, tan_y, near, far,
                   depth, fid, bary_u, bary_v):
    for f in range(faces.shape[0]):
        i0, i1, i2 = faces[f, 0], faces[f, 1], faces[f, 2]
        behind = False
        for idx in (i0, i1, i2):
            if verts[idx, 2] > -near:
                behind = True
        if behind:
            continue  # near-plane clipping not supported; skip the face
        # projected pixel coordinates of the corners
        lo_x, hi_x = 1e30, -1e30
        lo_y, hi_y = 1e30, -1e30
        for idx in (i0, i1, i2):
            inv = -1.0 / verts[idx, 2]
            sx = (verts[idx, 0] * inv / tan_x + 1.0) * 0.5 * width - 0.5
            sy = (1.0 - verts[idx, 1] * inv / tan_y) * 0.5 * height - 0.5
            lo_x = min(lo_x, sx)
            hi_x = max(hi_x, sx)
            lo_y = min(lo_y, sy)
            hi_y = max(hi_y, sy)
        jmin = max(0, int(np.ceil(lo_x)))
        jmax = min(width - 1, int(np.floor(hi_x)))
        imin = max(0, int(np.ceil(lo_y)))
        imax = min(height - 1, int(np.floor(hi_y)))
        if jmin > jmax or imin > imax:
            continue
        e1x = verts[i1, 0] - verts[i0, 0]
        e1y = verts[i1, 1] - verts[i0, 1]
        e1z = verts[i1, 2] - verts[i0, 2]
        e2x = verts[i2, 0] - verts[i0, 0]
        e2y = verts[i2, 1] - verts[i0, 1]
        e2z = verts[i2, 2] - verts[i0, 2]
        tx = -verts[i0, 0]
        ty = -verts[i0, 1]
        tz = -verts[i0, 2]
        for i in range(imin, imax + 1):
            dy = (1.0 - (i + 0.5) * 2.0 / height) * tan_y
            for j in range(jmin, jmax + 1):
                dx = ((j + 0.5) * 2.0 / width - 1.0) * tan_x
                # ray (0,0,0) + t * (dx, dy, -1)
                px = dy * e2z - (-1.0) * e2y
                py = (-1.0) * e2x - dx * e2z
                pz = dx * e2y - dy * e2x
                det = e1x * px + e1y * py + e1z * pz
                if det == 0.0:
                    continue
                inv_det = 1.0 / det
                u = (tx * px + ty * py + tz * pz) * inv_det
                if u < 0.0 or u > 1.0:
                    continue
                qx = ty * e1z - tz * e1y
                qy = tz * e1x - tx * e1z
                qz = tx * e1y - ty * e1x
                v = (dx * qx + dy * qy - qz) * inv_det
                if v < 0.0 or u + v > 1.0:
                    continue
                t = (e2x * qx + e2y * qy + e2z * qz) * inv_det
                if t <= near or t >= far:
                    continue
                if t < depth[i, j]:
                    depth[i, j] = t
                    fid[i, j] = f
                    bary_u[i, j] = u
                    bary_v[i, j] = v


def smooth_vertex_normals(mesh: TriMesh) -> np.ndarray:
    """Unit vertex normals from area-weighted face-normal accumulation."""
    acc = _normal_accumulators(mesh.vertices, mesh.faces)
    lengths = np.linalg.norm(acc, axis=1)
    lengths[lengths == 0.0] = 1.0
    return acc / lengths[:, None]


def _normal_accumulators(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    tri = vertices[faces]
    cross = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    acc = np.zeros_like(vertices)
    for k in range(3):
        np.add.at(acc, faces[:, k], cross)
    return acc


def _as_mesh_list(meshes) -> tuple[list[TriMesh], bool]:
    if isinstance(meshes, TriMesh):
        return [meshes], True
    out = list(meshes)
    if not out:
        raise ValueError("need at least one mesh to rasterize")
    return out, False


def rasterize(meshes, camera: Camera) -> RenderOutput:
    """Render one mesh or a list of meshes (a dressed state) into normal,
    depth, coverage, and hit-attribute maps."""
    mesh_list, single = _as_mesh_list(meshes)
    verts = np.concatenate([m.vertices for m in mesh_list], axis=0)
    v_off = np.cumsum([0] + [m.n_vertices for m in mesh_list])
    faces = np.concatenate(
        [m.faces + off for m, off in zip(mesh_list, v_off[:-1])], axis=0)
    f_off = np.cumsum([0] + [m.n_faces for m in mesh_list])

    width, height = camera.resolution
    tan_x, tan_y = camera.tangents()
    cam_verts = np.ascontiguousarray(camera.to_camera(verts))

    depth = np.full((height, width), camera.far, dtype=np.float64)
    fid = np.full((height, width), -1, dtype=np.int64)
    bary_u = np.zeros((height, width), dtype=np.float64)
    bary_v = np.zeros((height, width), dtype=np.float64)
    _raster_kernel(cam_verts, np.ascontiguousarray(faces), width, height,
                   tan_x, tan_y, camera.near, camera.far,
                   depth, fid, bary_u, bary_v)

    coverage = fid >= 0
    normal = np.empty((height, width, 3), dtype=np.float64)
    normal[:] = BACKGROUND_NORMAL
    if coverage.any():
        world_normals = np.concatenate(
            [smooth_vertex_normals(m) for m in mesh_list], axis=0)
        cam_normals = world_normals @ camera.basis().T
        hit_faces = faces[fid[coverage]]
        u = bary_u[coverage]
        v = bary_v[coverage]
        w = np.stack([1.0 - u - v, u, v], axis=1)
        blended = np.einsum("pk,pkc->pc", w, cam_normals[hit_faces])
        blended /= np.linalg.norm(blended, axis=1, keepdims=True)
        normal[coverage] = (blended + 1.0) * 0.5

    out = RenderOutput(
        normal=normal, depth=depth, coverage=coverage, face_id=fid,
        bary=np.stack([bary_u, bary_v], axis=-1),
        boundary=_boundary_mask(coverage, fid, depth),
        camera=camera, meshes=tuple(mesh_list), single_input=single,
        vertex_offsets=v_off, face_offsets=f_off,
        _world_vertices=verts.copy(), _faces=faces)
    return out


def _boundary_mask(coverage: np.ndarray, fid: np.ndarray,
                   depth: np.ndarray) -> np.ndarray:
    """Covered pixels sitting on a visibility discontinuity: next to
    background (silhouette) or across an occlusion-scale depth jump."""
    mask = np.zeros_like(coverage)
    for axis, shift in ((0, 1), (0, -1), (1, 1), (1, -1)):
        ncov = np.roll(coverage, shift, axis=axis)
        nfid = np.roll(fid, shift, axis=axis)
        ndep = np.roll(depth, shift, axis=axis)
        # the rolled-in edge row/column counts as background
        edge = np.zeros_like(coverage)
        idx = 0 if shift == 1 else -1
        if axis == 0:
            edge[idx, :] = True
        else:
            edge[:, idx] = True
        silhouette = coverage & (~ncov | edge)
        jump = (np.abs(depth - ndep)
                > OCCLUSION_DEPTH_JUMP * np.minimum(depth, ndep))
        occlusion = coverage & ncov & ~edge & (fid != nfid) & jump
        mask |= silhouette | occlusion
    return mask


class StaleRenderError(RuntimeError):
    """The mesh was edited between the forward and backward passes."""


def rasterize_gradients(output: RenderOutput, d_normal: np.ndarray | None = None,
                        d_depth: np.ndarray | None = None):
    """Pull pixel cotangents on the encoded normal map and/or the depth map
    back to world-space vertex-position cotangents.

    Boundary pixels (see RenderOutput.boundary) contribute nothing.  Returns
    one (n, 3) array per input mesh, or a bare array if a single mesh was
    rendered.
    """
    for m, lo, hi in zip(output.meshes, output.vertex_offsets[:-1],
                         output.vertex_offsets[1:]):
        if m.vertices.shape != (hi - lo, 3) or \
                not np.array_equal(m.vertices, output._world_vertices[lo:hi]):
            raise StaleRenderError(
                "mesh vertices changed since rasterize(); re-render before "
                "asking for gradients")

    height, width = output.depth.shape
    if d_normal is None:
        d_normal = np.zeros((height, width, 3))
    if d_depth is None:
        d_depth = np.zeros((height, width))
    d_normal = np.asarray(d_normal, dtype=np.float64)
    d_depth = np.asarray(d_depth, dtype=np.float64)
    if d_normal.shape != (height, width, 3) or d_depth.shape != (height, width):
        raise ValueError("pixel cotangents must match the render resolution")

    live = output.coverage & ~output.boundary
    live &= (np.abs(d_normal).sum(axis=-1) > 0) | (d_depth != 0)
    n_verts = len(output._world_vertices)
    d_cam_verts = np.zeros((n_verts, 3))
    d_cam_normals = np.zeros((n_verts, 3))
    basis = output.camera.basis()

    if live.any():
        ii, jj = np.nonzero(live)
        fids = output.face_id[ii, jj]
        hit_faces = output._faces[fids]                     # (p, 3)
        cam_verts = output.camera.to_camera(output._world_vertices)
        tri = cam_verts[hit_faces]                          # (p, 3, 3)
        u = output.bary[ii, jj, 0]
        v = output.bary[ii, jj, 1]
        t = output.depth[ii, jj]
        tan_x, tan_y = output.camera.tangents()
        d = np.stack([((jj + 0.5) * 2.0 / width - 1.0) * tan_x,
                      (1.0 - (ii + 0.5) * 2.0 / height) * tan_y,
                      -np.ones(len(ii))], axis=1)           # pixel rays

        # normal-map pixels: encoded = (blend/|blend| + 1) / 2
        world_normals = np.concatenate(
            [smooth_vertex_normals(m) for m in output.meshes], axis=0)
        cam_normals = world_normals @ basis.T
        w = np.stack([1.0 - u - v, u, v], axis=1)           # (p, 3)
        nk = cam_normals[hit_faces]                         # (p, 3, 3)
        raw = np.einsum("pk,pkc->pc", w, nk)
        norm = np.linalg.norm(raw, axis=1, keepdims=True)
        unit = raw / norm
        g_enc = d_normal[ii, jj] * 0.5                      # d wrt unit normal
        g_raw = (g_enc - unit * np.einsum("pc,pc->p", g_enc, unit)[:, None]) / norm
        g_w = np.einsum("pc,pkc->pk", g_raw, nk)            # (p, 3)
        g_nk = w[:, :, None] * g_raw[:, None, :]            # (p, 3, 3)
        np.add.at(d_cam_normals, hit_faces.ravel(), g_nk.reshape(-1, 3))

        # intersection parameters
        g_u = g_w[:, 1] - g_w[:, 0]
        g_v = g_w[:, 2] - g_w[:, 0]
        g_t = d_depth[ii, jj]

        e1 = tri[:, 1] - tri[:, 0]
        e2 = tri[:, 2] - tri[:, 0]
        tvec = -tri[:, 0]
        pvec = np.cross(d, e2)
        qvec = np.cross(tvec, e1)
        det = np.einsum("pc,pc->p", e1, pvec)
        inv = 1.0 / det
        g_det = -(g_u * u + g_v * v + g_t * t) * inv
        ga, gb, gc = g_u * inv, g_v * inv, g_t * inv

        d_tvec = (ga[:, None] * pvec + gb[:, None] * np.cross(e1, d)
                  + gc[:, None] * np.cross(e1, e2))
        d_e1 = (gb[:, None] * np.cross(d, tvec) + gc[:, None] * np.cross(e2, tvec)
                + g_det[:, None] * pvec)
        d_e2 = (ga[:, None] * np.cross(tvec, d) + gc[:, None] * qvec
                + g_det[:, None] * np.cross(e1, d))

        d_tri = np.stack([-d_e1 - d_e2 - d_tvec, d_e1, d_e2], axis=1)
        np.add.at(d_cam_verts, hit_faces.ravel(), d_tri.reshape(-1, 3))

    # rotate position cotangents back to world space
    d_world = d_cam_verts @ basis

    # vertex-normal chain: camera -> world -> per-vertex normalize -> face
    # cross products -> positions
    if np.any(d_cam_normals):
        d_wn = d_cam_normals @ basis
        acc = _normal_accumulators(output._world_vertices, output._faces)
        lengths = np.linalg.norm(acc, axis=1)
        lengths[lengths == 0.0] = 1.0
        unit_acc = acc / lengths[:, None]
        d_acc = (d_wn - unit_acc
                 * np.einsum("nc,nc->n", d_wn, unit_acc)[:, None]) / lengths[:, None]
        faces = output._faces
        g_cross = d_acc[faces[:, 0]] + d_acc[faces[:, 1]] + d_acc[faces[:, 2]]
        tri_w = output._world_vertices[faces]
        opposite = (tri_w[:, 1] - tri_w[:, 2], tri_w[:, 2] - tri_w[:, 0],
                    tri_w[:, 0] - tri_w[:, 1])
        for k in range(3):
            np.add.at(d_world, faces[:, k], np.cross(opposite[k], g_cross))

    parts = [d_world[lo:hi] for lo, hi in
             zip(output.vertex_offsets[:-1], output.vertex_offsets[1:])]
    return parts[0] if output.single_input else parts


# -- artifact output ----------------------------------------------------------

def save_normal_png(output: RenderOutput, path) -> None:
    from PIL import Image
    img = np.clip(np.rint(output.normal * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(img, mode="RGB").save(path)


def save_depth_png(output: RenderOutput, path) -> None:
    from PIL import Image
    cam = output.camera
    scaled = (output.depth - cam.near) / (cam.far - cam.near)
    img = np.clip(np.rint(scaled * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(img, mode="L").save(path)


def ring_cameras(n_azimuths: int = 8, elevation_deg: float = 15.0,
                 distance: float = 2.5, target=(0.0, 0.0, 0.0),
                 vfov_deg: float = 45.0, resolution=(256, 256),
                 emphasize_front_back: bool = True) -> list[Camera]:
    """Viewpoints on a ring around the target (azimuth 0 along +x, z up),
    with the front and back views repeated so they are sampled more often."""
    if n_azimuths < 1:
        raise ValueError("need at least one azimuth")
    azimuths = list(np.linspace(0.0, 2.0 * np.pi, n_azimuths, endpoint=False))
    if emphasize_front_back:
        azimuths += [0.0, np.pi]
    elev = np.radians(elevation_deg)
    target = np.asarray(target, dtype=np.float64)
    cams = []
    for az in azimuths:
        offset = distance * np.array([np.cos(elev) * np.cos(az),
                                      np.cos(elev) * np.sin(az),
                                      np.sin(elev)])
        cams.append(Camera(position=tuple(target + offset),
                           look_at=tuple(target), vfov_deg=vfov_deg,
                           resolution=tuple(resolution)))
    return cams
