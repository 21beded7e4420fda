"""Geometric objectives with analytic gradients.

Every loss returns a LossValue: a non-negative scalar plus cotangents keyed
by the differentiable input they belong to ("field" for per-grid-vertex
values, "vertices"/"a" for positions). All accumulations go through
np.add.at so gradient order — and therefore every byte of the result — is
deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dataclass_field

import numpy as np
from scipy.spatial import cKDTree

from .mesh import TriMesh
from .meshsdf import batch_signed_distance
from .tetgrid import TetGrid, locate

# default term weights for the optimization stages; scaffold terms (prior /
# template) are decayed x0.1 halfway through a run by the optimizer
LAMBDA_CHAMFER = 1.0
LAMBDA_EDGE = 10.0
LAMBDA_NORMAL = 0.1
LAMBDA_LAPLACIAN = 10.0
LAMBDA_PRIOR = 100.0
LAMBDA_TEMPLATE = 50.0
LAMBDA_HOLE = 50.0
LAMBDA_COLLISION = 1e3

SAMPLE_SET_SIZE = 20_000
SAMPLE_REFRESH_PERIOD = 50      # iterations between sample-set redraws
NEAR_SURFACE_JITTER_CELLS = 2.0


@dataclass
class LossValue:
    value: float
    gradients: dict[str, np.ndarray] = dataclass_field(default_factory=dict)

    def __post_init__(self):
        self.value = float(self.value)
        if not np.isfinite(self.value):
            raise ValueError("loss value is not finite")
        if self.value < 0:
            raise ValueError("loss value must be non-negative")


@dataclass
class SamplePointSet:
    """Evaluation points for field losses; provenance marks each point as
    drawn uniformly in the grid box or near the target surface."""

    points: np.ndarray
    provenance: np.ndarray  # (n,) '<U12': "uniform" | "near-surface"
    seed: int

    def __post_init__(self):
        self.points = np.ascontiguousarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ValueError("points must be (n, 3)")
        if len(self.provenance) != len(self.points):
            raise ValueError("provenance length mismatch")


def build_sample_points(grid: TetGrid, target: TriMesh,
                        n_points: int = SAMPLE_SET_SIZE,
                        seed: int = 0) -> SamplePointSet:
    """50% uniform in the grid box, 50% target-surface samples jittered by
    an isotropic gaussian of sigma = 2 cell edges; everything clamped into
    bounds. Deterministic for a given seed."""
    if n_points <= 0:
        raise ValueError("n_points must be positive")
    rng = np.random.default_rng(seed)
    n_uniform = n_points // 2
    n_near = n_points - n_uniform
    lo, hi = grid.bounds_lo, grid.bounds_hi
    uniform = rng.uniform(lo, hi, size=(n_uniform, 3))

    areas = target.face_areas()
    probs = areas / areas.sum()
    fids = rng.choice(len(probs), size=n_near, p=probs)
    # uniform barycentric samples via the square-root trick
    r1 = np.sqrt(rng.uniform(size=n_near))
    r2 = rng.uniform(size=n_near)
    w = np.stack([1.0 - r1, r1 * (1.0 - r2), r1 * r2], axis=1)
    tri = target.vertices[target.faces[fids]]
    on_surface = np.einsum("nk,nkd->nd", w, tri)
    sigma = NEAR_SURFACE_JITTER_CELLS * grid.cell_edge
    near = on_surface + rng.normal(scale=sigma, size=(n_near, 3))
    near = np.clip(near, lo, hi)

    points = np.concatenate([uniform, near], axis=0)
    provenance = np.concatenate([np.full(n_uniform, "uniform", dtype="<U12"),
                                 np.full(n_near, "near-surface", dtype="<U12")])
    return SamplePointSet(points, provenance, seed)


# -- field-space losses -----------------------------------------------------

def _field_residual_loss(grid: TetGrid, values: np.ndarray,
                         target_at_points: np.ndarray,
                         samples: SamplePointSet) -> LossValue:
    """mean (interp(values, p) - target(p))^2 with gradient w.r.t. values."""
    pts = samples.points
    if len(pts) == 0:
        raise ValueError("empty sample point set")
    if not np.all(grid.contains(pts, tol=1e-12)):
        raise ValueError("sample points fall outside the grid bounds")
    values = np.asarray(values, dtype=np.float64)
    tids, bary = locate(grid, pts)
    corner = grid.tets[tids]  # (n, 4)
    interp = np.einsum("nk,nk->n", values[corner], bary)
    resid = interp - target_at_points
    n = len(pts)
    value = float(resid @ resid) / n
    grad = np.zeros(grid.n_vertices)
    np.add.at(grad, corner.ravel(), ((2.0 / n) * resid[:, None] * bary).ravel())
    return LossValue(value, {"field": grad})


def prior_loss(grid: TetGrid, sdf: np.ndarray, target: TriMesh,
               samples: SamplePointSet) -> LossValue:
    """Pull the interpolated field toward the target's signed distance."""
    s_target, _, _ = batch_signed_distance(target, samples.points)
    return _field_residual_loss(grid, sdf, s_target, samples)


def template_loss(grid: TetGrid, sdf: np.ndarray, m_temp: TriMesh,
                  samples: SamplePointSet) -> LossValue:
    """Pull the apparel field toward the garment template's distances."""
    return prior_loss(grid, sdf, m_temp, samples)


def hole_loss(grid: TetGrid, msdf: np.ndarray, pies: list[TriMesh],
              samples: SamplePointSet) -> LossValue:
    """Keep the trim field matched to the pie distances so holes survive
    optimization. Open-mode only: an empty pie list is an error."""
    if not pies:
        raise ValueError("hole loss needs at least one pie "
                         "(closed mode must not call it)")
    s_pie = np.full(len(samples.points), np.inf)
    for pie in pies:
        vals, _, _ = batch_signed_distance(pie, samples.points)
        s_pie = np.minimum(s_pie, vals)
    return _field_residual_loss(grid, msdf, s_pie, samples)


# -- mesh-space losses ------------------------------------------------------

def chamfer_loss(a: np.ndarray, b: np.ndarray) -> LossValue:
    """Symmetric mean of squared nearest-neighbor distances; gradients for
    the first set's positions."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if len(a) == 0 or len(b) == 0:
        raise ValueError("chamfer distance of an empty point set")
    idx_ab = cKDTree(b).query(a)[1]
    idx_ba = cKDTree(a).query(b)[1]
    diff_ab = a - b[idx_ab]            # per-a offset to its nearest b
    diff_ba = a[idx_ba] - b            # per-b offset from its nearest a
    value = float(np.einsum("ij,ij->", diff_ab, diff_ab)) / len(a) \
        + float(np.einsum("ij,ij->", diff_ba, diff_ba)) / len(b)
    grad = (2.0 / len(a)) * diff_ab
    np.add.at(grad, idx_ba, (2.0 / len(b)) * diff_ba)
    return LossValue(value, {"a": grad})


def edge_loss(mesh: TriMesh, rest: TriMesh) -> LossValue:
    """mean (|e| - |e_rest|)^2 over unique edges; preserves triangulation."""
    if mesh.faces.shape != rest.faces.shape or not np.array_equal(mesh.faces, rest.faces):
        raise ValueError("mesh and rest must share the same triangulation")
    edges = mesh.edges_unique()
    vec = mesh.vertices[edges[:, 0]] - mesh.vertices[edges[:, 1]]
    length = np.linalg.norm(vec, axis=1)
    rest_vec = rest.vertices[edges[:, 0]] - rest.vertices[edges[:, 1]]
    rest_len = np.linalg.norm(rest_vec, axis=1)
    resid = length - rest_len
    m = len(edges)
    value = float(resid @ resid) / m
    # d|e|/dv_a = e/|e|; degenerate zero-length edges get zero direction
    safe = np.where(length > 0, length, 1.0)
    coeff = (2.0 / m) * resid / safe
    contrib = coeff[:, None] * vec
    grad = np.zeros_like(mesh.vertices)
    np.add.at(grad, edges[:, 0], contrib)
    np.add.at(grad, edges[:, 1], -contrib)
    return LossValue(value, {"vertices": grad})


def normal_consistency_loss(mesh: TriMesh) -> LossValue:
    """mean (1 - n_i . n_j) over interior adjacent-face pairs."""
    pairs = _interior_face_pairs(mesh)
    if len(pairs) == 0:
        return LossValue(0.0, {"vertices": np.zeros_like(mesh.vertices)})
    cross = mesh.face_normals(normalized=False)
    norm = np.linalg.norm(cross, axis=1)
    n = cross / norm[:, None]
    ni, nj = n[pairs[:, 0]], n[pairs[:, 1]]
    dots = np.einsum("ij,ij->i", ni, nj)
    m = len(pairs)
    value = float(np.sum(1.0 - dots)) / m

    # cotangent into each face's unnormalized cross product
    g_cross = np.zeros_like(cross)
    for own, other in ((pairs[:, 0], pairs[:, 1]), (pairs[:, 1], pairs[:, 0])):
        g_n = -n[other] / m  # d value / d n_own
        # through normalization: (I - n n^T) / |c|
        proj = g_n - np.einsum("ij,ij->i", g_n, n[own])[:, None] * n[own]
        np.add.at(g_cross, own, proj / norm[own, None])

    # chain into vertices: d(g.c)/dp_k = e_k x g with e_k the opposite edge
    tri = mesh.vertices[mesh.faces]  # (f, 3, 3)
    grad = np.zeros_like(mesh.vertices)
    opposite = (tri[:, 1] - tri[:, 2], tri[:, 2] - tri[:, 0], tri[:, 0] - tri[:, 1])
    for k in range(3):
        np.add.at(grad, mesh.faces[:, k], np.cross(opposite[k], g_cross))
    return LossValue(value, {"vertices": grad})


def _interior_face_pairs(mesh: TriMesh) -> np.ndarray:
    """(m, 2) face-id pairs sharing an interior (2-incident) edge."""
    if "face_pairs" in mesh._cache:
        return mesh._cache["face_pairs"]
    halfedges = np.sort(mesh.faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
    face_of = np.repeat(np.arange(mesh.n_faces), 3)
    order = np.lexsort((halfedges[:, 1], halfedges[:, 0]))
    he, fo = halfedges[order], face_of[order]
    same = np.all(he[1:] == he[:-1], axis=1)
    pairs = np.stack([fo[:-1][same], fo[1:][same]], axis=1)
    mesh._cache["face_pairs"] = pairs
    return pairs


def laplacian_loss(mesh: TriMesh) -> LossValue:
    """mean |v - mean(ring)|^2 with uniform weights; boundary vertices use
    only their boundary neighbors so open rims are not pulled inward."""
    nv = mesh.n_vertices
    edges = mesh.edges_unique()
    boundary = mesh.boundary_edges()
    on_boundary = np.zeros(nv, dtype=bool)
    on_boundary[boundary.ravel()] = True

    # directed neighbor lists; boundary vertices keep only boundary edges
    directed = np.concatenate([edges, edges[:, ::-1]], axis=0)
    dkey = directed.min(axis=1).astype(np.int64) * nv + directed.max(axis=1)
    bkey = boundary.min(axis=1).astype(np.int64) * nv + boundary.max(axis=1)
    is_b_edge = np.isin(dkey, bkey)
    keep = ~(on_boundary[directed[:, 0]] & ~is_b_edge)
    directed = directed[keep]

    deg = np.bincount(directed[:, 0], minlength=nv).astype(np.float64)
    if np.any(deg == 0):
        raise ValueError("isolated vertex in laplacian loss")
    ring_sum = np.zeros_like(mesh.vertices)
    np.add.at(ring_sum, directed[:, 0], mesh.vertices[directed[:, 1]])
    lap = mesh.vertices - ring_sum / deg[:, None]
    value = float(np.einsum("ij,ij->", lap, lap)) / nv

    grad = (2.0 / nv) * lap
    np.add.at(grad, directed[:, 1],
              -(2.0 / nv) * lap[directed[:, 0]] / deg[directed[:, 0], None])
    return LossValue(value, {"vertices": grad})


def fit_loss(mesh: TriMesh, rest: TriMesh, target_points: np.ndarray,
             lambda_chamfer: float = LAMBDA_CHAMFER,
             lambda_edge: float = LAMBDA_EDGE,
             lambda_normal: float = LAMBDA_NORMAL,
             lambda_laplacian: float = LAMBDA_LAPLACIAN) -> LossValue:
    """Weighted sum of chamfer (mesh vertices vs target points), edge,
    normal-consistency and laplacian terms; gradients w.r.t. vertices."""
    total = 0.0
    grad = np.zeros_like(mesh.vertices)
    if lambda_chamfer:
        term = chamfer_loss(mesh.vertices, target_points)
        total += lambda_chamfer * term.value
        grad += lambda_chamfer * term.gradients["a"]
    if lambda_edge:
        term = edge_loss(mesh, rest)
        total += lambda_edge * term.value
        grad += lambda_edge * term.gradients["vertices"]
    if lambda_normal:
        term = normal_consistency_loss(mesh)
        total += lambda_normal * term.value
        grad += lambda_normal * term.gradients["vertices"]
    if lambda_laplacian:
        term = laplacian_loss(mesh)
        total += lambda_laplacian * term.value
        grad += lambda_laplacian * term.gradients["vertices"]
    return LossValue(total, {"vertices": grad})


def collision_loss(apparel_vertices: np.ndarray, body: TriMesh) -> LossValue:
    """sum relu(-s_body(v)): total penetration depth into the body.

    Penetrating vertices are pushed along the body's outward distance
    gradient; everything else gets exactly zero."""
    verts = np.atleast_2d(np.asarray(apparel_vertices, dtype=np.float64))
    s, _, s_grad = batch_signed_distance(body, verts)
    inside = s < 0
    value = float(-s[inside].sum())
    grad = np.zeros_like(verts)
    grad[inside] = -s_grad[inside]
    return LossValue(value, {"vertices": grad})
