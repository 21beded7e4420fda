"""Signed distance queries against a triangle mesh.

Distance comes from a BVH closest-point query; the sign comes from the
generalized winding number (threshold 0.5), which stays robust where
normal-based tests fail.  Spatial gradients are the normalized offset from
the closest point, flipped inside; for on-surface points (distance below
1e-9) the angle-weighted pseudo-normal of the closest feature (face, edge
or vertex) substitutes, so gradients stay well-defined on edges and
corners.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import bvh as _bvh
from .mesh import TriMesh

ON_SURFACE_EPS = 1e-9
_FEATURE_TOL = 1e-12


class SignUndefinedError(ValueError):
    """Signed query against a mesh with boundary (inside/outside undefined)."""


@dataclass(eq=False)
class SdfQueryAccel:
    mesh: TriMesh
    tree: _bvh.TriangleBVH
    face_normals: np.ndarray      # (nf, 3) unit
    edge_normals: np.ndarray      # (ne, 3) unit pseudo-normals
    vertex_normals: np.ndarray    # (nv, 3) unit angle-weighted
    face_edge_ids: np.ndarray     # (nf, 3) edge id opposite each corner
    watertight: bool


def build_accel(mesh: TriMesh) -> SdfQueryAccel:
    """Build (or fetch the cached) query structure for a mesh.

    Meshes are treated as immutable once queried; any vertex update must go
    through a new TriMesh."""
    cached = mesh._cache.get("sdf_accel")
    if cached is not None:
        return cached
    if len(mesh.faces) == 0:
        raise ValueError("cannot build distance queries over an empty mesh")
    tree = _bvh.build_bvh(mesh.vertices, mesh.faces)

    fn = mesh.face_normals()
    norms = np.linalg.norm(fn, axis=1, keepdims=True)
    fn = fn / np.maximum(norms, 1e-300)

    edges, counts, edge_of_halfedge = _edge_tables(mesh)
    en = np.zeros((len(edges), 3))
    np.add.at(en, edge_of_halfedge.reshape(-1), np.repeat(fn, 3, axis=0))
    en /= np.maximum(np.linalg.norm(en, axis=1, keepdims=True), 1e-300)

    vn = mesh.angle_weighted_vertex_normals()

    accel = SdfQueryAccel(mesh, tree, fn, en, vn, edge_of_halfedge,
                          watertight=bool(counts.max(initial=0) <= 2 and mesh.is_watertight()))
    mesh._cache["sdf_accel"] = accel
    return accel


def _edge_tables(mesh: TriMesh):
    f = mesh.faces
    # half-edge k of a face is the edge opposite corner k
    halfedges = np.stack([f[:, [1, 2]], f[:, [2, 0]], f[:, [0, 1]]], axis=1)
    flat = np.sort(halfedges.reshape(-1, 2), axis=1)
    edges, inv, counts = np.unique(flat, axis=0, return_inverse=True, return_counts=True)
    return edges, counts, inv.reshape(len(f), 3).astype(np.int64)


def unsigned_distance(mesh: TriMesh, points: np.ndarray):
    """Distance, closest point and closest face for each query point.

    Works for any mesh, open or closed."""
    accel = build_accel(mesh)
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if pts.shape[0] == 0:
        return np.zeros(0), np.zeros((0, 3)), np.zeros(0, dtype=np.int64)
    return _bvh.closest_points(accel.tree, pts)


def winding_numbers(mesh: TriMesh, points: np.ndarray) -> np.ndarray:
    accel = build_accel(mesh)
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if pts.shape[0] == 0:
        return np.zeros(0)
    return _bvh.winding_numbers(accel.tree, pts)


def _feature_normal(accel: SdfQueryAccel, face_id: int, q: np.ndarray) -> np.ndarray:
    """Pseudo-normal of the feature the closest point q lies on."""
    tri = accel.mesh.faces[face_id]
    a, b, c = accel.mesh.vertices[tri]
    # barycentric coordinates of q
    m = np.stack([b - a, c - a], axis=1)
    g = m.T @ m
    rhs = m.T @ (q - a)
    det = g[0, 0] * g[1, 1] - g[0, 1] * g[1, 0]
    if det <= 0:
        return accel.face_normals[face_id]
    v = (g[1, 1] * rhs[0] - g[0, 1] * rhs[1]) / det
    w = (g[0, 0] * rhs[1] - g[1, 0] * rhs[0]) / det
    bary = np.array([1.0 - v - w, v, w])
    scale = max(1.0, np.abs(bary).max())
    zero = np.abs(bary) <= _FEATURE_TOL * scale + 1e-9
    nz = int(zero.sum())
    if nz == 0:
        return accel.face_normals[face_id]
    if nz == 1:
        # on the edge opposite the zero corner
        corner = int(np.flatnonzero(zero)[0])
        return accel.edge_normals[accel.face_edge_ids[face_id, corner]]
    # at the corner with the non-zero coordinate
    corner = int(np.argmax(bary))
    return accel.vertex_normals[tri[corner]]


def batch_signed_distance(mesh: TriMesh, points: np.ndarray):
    """Signed distance, closest point and spatial gradient per query point.

    Sign is negative inside (winding number > 0.5).  Raises
    SignUndefinedError for meshes with boundary."""
    accel = build_accel(mesh)
    if not accel.watertight:
        raise SignUndefinedError(
            "mesh has boundary edges; inside/outside is undefined "
            "(use unsigned_distance instead)")
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if pts.shape[0] == 0:
        return np.zeros(0), np.zeros((0, 3)), np.zeros((0, 3))
    dist, q, face = _bvh.closest_points(accel.tree, pts)
    w = _bvh.winding_numbers(accel.tree, pts)
    inside = w > 0.5
    sign = np.where(inside, -1.0, 1.0)
    values = sign * dist

    grads = np.empty_like(pts)
    on_surface = dist < ON_SURFACE_EPS
    far = ~on_surface
    offs = pts[far] - q[far]
    grads[far] = sign[far, None] * offs / dist[far, None]
    for i in np.flatnonzero(on_surface):
        grads[i] = _feature_normal(accel, int(face[i]), q[i])
    return values, q, grads


def signed_distance(mesh: TriMesh, point: np.ndarray):
    """Single-point form of batch_signed_distance."""
    values, q, grads = batch_signed_distance(mesh, np.asarray(point, dtype=np.float64)[None, :])
    return float(values[0]), q[0], grads[0]
