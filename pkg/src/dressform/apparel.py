"""Garment template construction from a masked body region.

Pipeline: crop a body sub-mesh by vertex mask, thicken it into a closed
double-layer shell (for items worn as solid volumes) or offset it and cap
each boundary loop with a centroid fan (for open, trimmable surfaces),
fit a watertight "pie" over every hole, and rasterize template / pie
signed distances onto a tet grid as the starting shell fields.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import bvh as _bvh
from .mesh import TriMesh
from .meshsdf import batch_signed_distance
from .tetgrid import GShellParams, TetGrid


@dataclass
class HoleDescriptor:
    """One capped boundary loop of an open template.

    Indices refer to the returned template mesh: ``loop_vertices`` is the
    ordered rim, ``centroid_vertex`` the fan apex, ``fan_faces`` the rows of
    ``template.faces`` that fill the hole."""

    loop_vertices: np.ndarray
    centroid_vertex: int
    fan_faces: np.ndarray


def crop_by_mask(body_mesh: TriMesh, mask) -> tuple[TriMesh, np.ndarray]:
    """Sub-mesh of faces whose three corners all lie in the vertex mask.

    Returns the reindexed patch and a back-mapping array: entry i is the
    index in ``body_mesh`` of patch vertex i."""
    mask = np.asarray(mask)
    if mask.dtype == np.bool_:
        mask = np.flatnonzero(mask)
    mask = np.unique(mask.astype(np.int64))
    if mask.size == 0:
        raise ValueError("empty vertex mask")
    if mask[0] < 0 or mask[-1] >= body_mesh.n_vertices:
        raise ValueError("mask indices out of range")

    in_mask = np.zeros(body_mesh.n_vertices, dtype=bool)
    in_mask[mask] = True
    keep = in_mask[body_mesh.faces].all(axis=1)
    if not np.any(keep):
        raise ValueError("mask induces no faces (no face has all three "
                         "vertices in the mask)")
    faces = body_mesh.faces[keep]
    used = np.unique(faces)
    remap = np.full(body_mesh.n_vertices, -1, dtype=np.int64)
    remap[used] = np.arange(used.size)
    patch = TriMesh(body_mesh.vertices[used].copy(), remap[faces],
                    name=f"{body_mesh.name}_patch" if body_mesh.name else "patch")
    return patch, used


def _checked_no_self_intersections(mesh: TriMesh, what: str, hint: str) -> None:
    pairs = _bvh.self_intersecting_pairs(mesh.vertices, mesh.faces)
    if len(pairs):
        f, g = pairs[0]
        raise ValueError(
            f"{what} self-intersects ({len(pairs)} face pairs, e.g. faces "
            f"{f} and {g}); {hint}")


def closed_template(patch: TriMesh, offset_out: float, offset_in: float) -> TriMesh:
    """Thicken an open patch into a watertight double-layer shell.

    Outer layer is displaced along vertex normals by ``offset_out``, the
    inner layer by ``-offset_in`` with reversed winding, and every boundary
    loop is sewn with a quad strip (two triangles per boundary edge)."""
    if offset_out <= 0 or offset_in <= 0:
        raise ValueError("offsets must be positive")
    loops = patch.boundary_loops()
    if not loops:
        raise ValueError("patch has no boundary loop; nothing to sew "
                         "(use the mesh directly)")
    n = patch.n_vertices
    normals = patch.angle_weighted_vertex_normals()
    outer = patch.vertices + offset_out * normals
    inner = patch.vertices - offset_in * normals
    verts = np.concatenate([outer, inner], axis=0)

    inner_faces = patch.faces[:, ::-1] + n
    strips = []
    for edge in patch.boundary_edges():  # directed (a, b) as wound in faces
        a, b = int(edge[0]), int(edge[1])
        strips.append((b, a, n + a))
        strips.append((b, n + a, n + b))
    faces = np.concatenate(
        [patch.faces, inner_faces, np.asarray(strips, dtype=np.int64)], axis=0)
    out = TriMesh(verts, faces, name=f"{patch.name}_closed" if patch.name else "closed_template")
    if not out.is_watertight():
        raise ValueError("sewing produced a non-watertight shell "
                         "(is the patch edge-manifold?)")
    _checked_no_self_intersections(
        out, "thickened shell",
        "try smaller offset_out / offset_in relative to the patch feature size")
    return out


def open_template(patch: TriMesh, offset: float) -> tuple[TriMesh, list[HoleDescriptor]]:
    """Offset a patch off the body and cap each boundary loop with a fan.

    Returns a watertight single-layer template plus one HoleDescriptor per
    capped loop. A patch that is already watertight is returned unchanged
    with no descriptors."""
    if offset <= 0:
        raise ValueError("offset must be positive")
    loops = patch.boundary_loops()
    if not loops:
        return TriMesh(patch.vertices.copy(), patch.faces.copy(), name=patch.name), []

    normals = patch.angle_weighted_vertex_normals()
    moved = patch.vertices + offset * normals

    verts = [moved]
    fan_faces = []
    descriptors = []
    next_vid = patch.n_vertices
    face_base = patch.n_faces
    for loop in loops:
        centroid = moved[loop].mean(axis=0)
        verts.append(centroid[None, :])
        k = len(loop)
        tris = np.empty((k, 3), dtype=np.int64)
        # loop is ordered along the face winding a->b; the cap traverses b->a
        tris[:, 0] = next_vid
        tris[:, 1] = np.roll(loop, -1)
        tris[:, 2] = loop
        fan_faces.append(tris)
        descriptors.append(HoleDescriptor(
            loop_vertices=loop.copy(),
            centroid_vertex=next_vid,
            fan_faces=np.arange(face_base, face_base + k, dtype=np.int64)))
        next_vid += 1
        face_base += k

    faces = np.concatenate([patch.faces] + fan_faces, axis=0)
    out = TriMesh(np.concatenate(verts, axis=0), faces,
                  name=f"{patch.name}_open" if patch.name else "open_template")
    if not out.is_watertight():
        raise ValueError("hole filling produced a non-watertight mesh "
                         "(is the patch edge-manifold?)")
    # gate only the hole fills: micro-crossings of the offset surface itself
    # at creases are tolerable for an SDF target, a fan slicing through the
    # surface is not
    pairs = _bvh.self_intersecting_pairs(out.vertices, out.faces)
    if len(pairs):
        fill_involved = pairs >= patch.n_faces
        bad = pairs[fill_involved.any(axis=1)]
        if len(bad):
            raise ValueError(
                f"hole fill self-intersects the template ({len(bad)} face "
                f"pairs, e.g. faces {bad[0][0]} and {bad[0][1]}); try a "
                "smaller offset or a less concave hole")
    return out, descriptors


def fit_pie(hole_loop: np.ndarray, thickness: float, overlap: float) -> TriMesh:
    """Watertight lens covering a hole: the loop projected onto its best-fit
    plane, dilated radially by ``overlap``, extruded to fan caps at
    ``±thickness/2`` along the plane normal, rims sewn.

    The rim keeps each loop vertex's out-of-plane height so a wavy hole
    stays covered without inflating the lens far beyond the hole; the caps
    blend linearly from the rim to plane-level apexes, and the half
    thickness grows only by the worst-case sag of that blend."""
    pts = np.asarray(hole_loop, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) < 3:
        raise ValueError("hole loop must be an ordered (k>=3, 3) position array")
    if thickness <= 0 or overlap < 0:
        raise ValueError("thickness must be positive and overlap non-negative")

    center = pts.mean(axis=0)
    centered = pts - center
    # best-fit plane: normal = least-variance direction
    _, sing, vt = np.linalg.svd(centered, full_matrices=False)
    scale = float(np.linalg.norm(centered, axis=1).max())
    if sing[1] <= 1e-9 * max(sing[0], 1e-300):
        raise ValueError("degenerate hole loop: vertices are collinear, "
                         "no plane can be fit")
    normal = vt[2]

    heights = centered @ normal
    planar = centered - heights[:, None] * normal
    radii = np.linalg.norm(planar, axis=1)
    safe = radii > 1e-12 * max(scale, 1.0)
    ring = planar.copy()
    ring[safe] += overlap * planar[safe] / radii[safe, None]
    # cap surfaces interpolate heights from the rim toward height-0 apexes;
    # over the original rim radius they sag by (1 - r/(r+overlap)) * |h|
    sag = np.where(safe, np.abs(heights) * (overlap / (radii + overlap)), 0.0)
    half = 0.5 * thickness + float(sag.max())
    # wavy rims crease the caps, and a field sampled onto a grid wobbles
    # most there; scale the rim clearance with local waviness so the trim
    # survives discretization (planar rims keep the exact thickness)
    rim_half = half + _RIM_WAVINESS_MARGIN * np.abs(heights)

    k = len(pts)
    lift = heights[:, None] * normal
    top = center + ring + lift + rim_half[:, None] * normal
    bottom = center + ring + lift - rim_half[:, None] * normal
    apex_top = center + half * normal
    apex_bot = center - half * normal
    verts = np.concatenate([top, bottom, apex_top[None], apex_bot[None]], axis=0)
    at, ab = 2 * k, 2 * k + 1

    nxt = np.roll(np.arange(k), -1)
    faces = np.concatenate([
        np.stack([np.full(k, at), np.arange(k), nxt], axis=1),              # top fan
        np.stack([np.full(k, ab), k + nxt, k + np.arange(k)], axis=1),      # bottom fan
        np.stack([np.arange(k), k + np.arange(k), k + nxt], axis=1),        # wall lower
        np.stack([np.arange(k), k + nxt, nxt], axis=1),                     # wall upper
    ], axis=0).astype(np.int64)

    pie = TriMesh(verts, faces, name="pie")
    if pie.signed_volume() < 0:  # loop wound the other way: flip outward
        pie = TriMesh(verts, faces[:, ::-1], name="pie")
    if not pie.is_watertight():
        raise ValueError("pie construction failed to close (degenerate loop?)")
    return pie


_RIM_WAVINESS_MARGIN = 0.75

_DEFAULT_TEMPLATE_OFFSET_CELLS = 1.0   # garments sit one cell off the skin
_DEFAULT_PIE_THICKNESS_CELLS = 1.0
_DEFAULT_PIE_OVERLAP_CELLS = 2.0       # pie must cover the hole across the grid


def init_gshell(m_temp: TriMesh, pies: list[TriMesh], grid: TetGrid,
                open_mode: bool) -> GShellParams:
    """Rasterize template and pie signed distances into starting fields.

    sdf[v] is the template's signed distance at grid vertex v.  In open
    mode msdf[v] is the minimum over pies of the pie signed distance
    (negative inside any pie, i.e. trimmed); with no pies it is a large
    positive constant so nothing is trimmed."""
    if not m_temp.is_watertight():
        raise ValueError("template mesh must be watertight (run "
                         "closed_template / open_template first)")
    sdf, _, _ = batch_signed_distance(m_temp, grid.vertices)

    msdf = None
    if open_mode:
        if pies:
            for i, pie in enumerate(pies):
                if not pie.is_watertight():
                    raise ValueError(f"pie {i} is not watertight; its signed "
                                     "distance is undefined")
            per_pie = [batch_signed_distance(pie, grid.vertices)[0] for pie in pies]
            msdf = np.minimum.reduce(per_pie)
        else:
            diag = float(np.linalg.norm(grid.bounds_hi - grid.bounds_lo))
            msdf = np.full(grid.n_vertices, 10.0 * diag)
    return GShellParams(grid, sdf, msdf)
