"""Tetrahedral lattice and scalar field storage.

The lattice is a body-centered cubic style subdivision: each grid cube
contributes its 8 corners plus a center vertex, and splits into 12 tets
(each cube face is split into two triangles along a diagonal, each triangle
joined to the cube center). Face diagonals are chosen through the smallest
global vertex index so neighboring cubes agree on shared faces.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"GSFC"
CONTAINER_VERSION = 1

# Deformation bound: each vertex offset must keep Euclidean norm below this
# fraction of half a cell edge.  The critical factor at which some tet of the
# lattice can be driven to zero volume is 1/sqrt(6) ~ 0.408 (found by exact
# per-vertex minimization of the multilinear volume form; see tests).  0.35
# leaves a ~14% worst-case volume margin on the thinnest tets.
DEFORM_BOUND_FRACTION = 0.35


@dataclass(eq=False)
class TetGrid:
    resolution: int
    bounds_lo: np.ndarray
    bounds_hi: np.ndarray
    vertices: np.ndarray  # (nv, 3) float64; corners first, then cube centers
    tets: np.ndarray      # (nt, 4) int64, positive signed volume

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def cell_size(self) -> np.ndarray:
        """Cell edge lengths per axis."""
        return (self.bounds_hi - self.bounds_lo) / self.resolution

    @property
    def cell_edge(self) -> float:
        """Scalar cell edge (min across axes for non-cubic boxes)."""
        return float(self.cell_size.min())

    def deform_bound(self) -> float:
        """Max allowed Euclidean norm of a per-vertex deform offset."""
        return DEFORM_BOUND_FRACTION * 0.5 * self.cell_edge

    def contains(self, points: np.ndarray, tol: float = 0.0) -> np.ndarray:
        p = np.atleast_2d(points)
        return np.all((p >= self.bounds_lo - tol) & (p <= self.bounds_hi + tol), axis=1)


def build_grid(resolution: int, bounds) -> TetGrid:
    """Build the BCC-style tet lattice covering `bounds` with `resolution`
    cells per axis. Deterministic vertex and tet ordering."""
    if resolution < 1:
        raise ValueError(f"resolution must be >= 1, got {resolution}")
    lo, hi = (np.asarray(b, dtype=np.float64).reshape(3) for b in bounds)
    if not np.all(hi > lo):
        raise ValueError("bounds must satisfy hi > lo on every axis")

    r = int(resolution)
    n1 = r + 1
    # corner lattice, index (ix*n1 + iy)*n1 + iz
    axes = [np.linspace(lo[d], hi[d], n1) for d in range(3)]
    cx, cy, cz = np.meshgrid(*axes, indexing="ij")
    corners = np.stack([cx, cy, cz], axis=-1).reshape(-1, 3)
    # cube centers, offset by ncorners, index (ix*r + iy)*r + iz
    caxes = [np.linspace(lo[d], hi[d], 2 * r + 1)[1::2] for d in range(3)]
    mx, my, mz = np.meshgrid(*caxes, indexing="ij")
    centers = np.stack([mx, my, mz], axis=-1).reshape(-1, 3)
    vertices = np.concatenate([corners, centers], axis=0)
    ncorners = n1 ** 3

    # cube corner ids, vectorized over all cells
    ix, iy, iz = np.meshgrid(np.arange(r), np.arange(r), np.arange(r), indexing="ij")
    ix, iy, iz = ix.ravel(), iy.ravel(), iz.ravel()

    def cid(dx, dy, dz):
        return ((ix + dx) * n1 + (iy + dy)) * n1 + (iz + dz)

    corner_ids = np.stack(
        [cid(0, 0, 0), cid(0, 0, 1), cid(0, 1, 0), cid(0, 1, 1),
         cid(1, 0, 0), cid(1, 0, 1), cid(1, 1, 0), cid(1, 1, 1)],
        axis=1,
    )  # (ncells, 8), local id = dx*4 + dy*2 + dz
    center_ids = ncorners + (ix * r + iy) * r + iz

    # six cube faces as cyclic quads of local corner ids
    FACE_QUADS = [
        (0, 1, 3, 2),  # -x
        (4, 6, 7, 5),  # +x
        (0, 4, 5, 1),  # -y
        (2, 3, 7, 6),  # +y
        (0, 2, 6, 4),  # -z
        (1, 5, 7, 3),  # +z
    ]
    ncells = len(corner_ids)
    tets = np.empty((ncells, 12, 4), dtype=np.int64)
    for fi, quad in enumerate(FACE_QUADS):
        q = corner_ids[:, list(quad)]  # (ncells, 4) global ids a,b,c,d in cyclic order
        a, b, c, d = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
        # split along the diagonal through the smallest global id: both cubes
        # sharing this face see the same four ids, hence the same diagonal
        mins = q.min(axis=1)
        use_ac = (mins == a) | (mins == c)
        t1 = np.where(use_ac[:, None], np.stack([a, b, c], 1), np.stack([b, c, d], 1))
        t2 = np.where(use_ac[:, None], np.stack([a, c, d], 1), np.stack([b, d, a], 1))
        tets[:, 2 * fi, :3] = t1
        tets[:, 2 * fi, 3] = center_ids
        tets[:, 2 * fi + 1, :3] = t2
        tets[:, 2 * fi + 1, 3] = center_ids
    tets = tets.reshape(-1, 4)

    # enforce positive signed volume by swapping the first two vertices where needed
    p = vertices[tets]
    vol6 = np.einsum(
        "ij,ij->i",
        p[:, 1] - p[:, 0],
        np.cross(p[:, 2] - p[:, 0], p[:, 3] - p[:, 0]),
    )
    flip = vol6 < 0
    tets[flip, 0], tets[flip, 1] = tets[flip, 1].copy(), tets[flip, 0].copy()
    return TetGrid(r, lo, hi, vertices, tets)


def tet_volumes(grid: TetGrid, deform: np.ndarray | None = None) -> np.ndarray:
    v = grid.vertices if deform is None else grid.vertices + deform
    p = v[grid.tets]
    return np.einsum(
        "ij,ij->i",
        p[:, 1] - p[:, 0],
        np.cross(p[:, 2] - p[:, 0], p[:, 3] - p[:, 0]),
    ) / 6.0


# -- point location and interpolation ------------------------------------


def locate(grid: TetGrid, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Find containing tets and barycentric weights for interior points.

    Returns (tet_ids (n,), bary (n,4)). Raises for points outside bounds.
    Points on shared faces may land in either adjacent tet; barycentric
    interpolation is continuous there so the choice does not matter.
    """
    p = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if not np.all(grid.contains(p, tol=1e-12)):
        bad = np.nonzero(~grid.contains(p, tol=1e-12))[0][0]
        raise ValueError(f"point {p[bad]} outside grid bounds")
    r = grid.resolution
    cell = grid.cell_size
    ijk = np.clip(((p - grid.bounds_lo) / cell).astype(np.int64), 0, r - 1)
    cell_index = (ijk[:, 0] * r + ijk[:, 1]) * r + ijk[:, 2]
    cand = cell_index[:, None] * 12 + np.arange(12)  # (n, 12) tet ids
    b = tet_barycentric(grid, cand.ravel(), np.repeat(p, 12, axis=0)).reshape(len(p), 12, 4)
    # pick the candidate with the largest minimum barycentric coordinate
    worst = b.min(axis=2)
    choice = worst.argmax(axis=1)
    rows = np.arange(len(p))
    tids = cand[rows, choice]
    bary = b[rows, choice]
    if worst[rows, choice].min() < -1e-9:
        raise ValueError("point location failed (no containing tet)")
    return tids, np.clip(bary, 0.0, None)


def tet_barycentric(grid: TetGrid, tet_ids: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Barycentric coordinates of `points` within the given tets, (n,4)."""
    t = grid.tets[tet_ids]
    p0 = grid.vertices[t[:, 0]]
    T = np.stack(
        [grid.vertices[t[:, 1]] - p0,
         grid.vertices[t[:, 2]] - p0,
         grid.vertices[t[:, 3]] - p0],
        axis=-1,
    )  # (n, 3, 3) columns are edge vectors
    rhs = points - p0
    b123 = np.linalg.solve(T, rhs[..., None])[..., 0]
    b0 = 1.0 - b123.sum(axis=1)
    return np.concatenate([b0[:, None], b123], axis=1)


def sample_field(grid: TetGrid, values: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Barycentric interpolation of per-vertex values at interior points."""
    values = np.asarray(values, dtype=np.float64)
    if len(values) != grid.n_vertices:
        raise ValueError("field length does not match grid vertex count")
    single = np.asarray(points).ndim == 1
    tids, bary = locate(grid, points)
    out = np.einsum("ij,ij->i", values[grid.tets[tids]], bary)
    return float(out[0]) if single else out


def interpolate_in_tet(grid: TetGrid, values: np.ndarray, tet_id: int, point) -> float:
    """Interpolate inside one specific tet (no point location)."""
    b = tet_barycentric(grid, np.asarray([tet_id]), np.atleast_2d(point))[0]
    return float(values[grid.tets[tet_id]] @ b)


# -- G-Shell parameter bundle --------------------------------------------


@dataclass(eq=False)
class GShellParams:
    """Optimizable fields living on one grid: sdf always, msdf for open
    surfaces, optional per-vertex deformation offsets."""

    grid: TetGrid
    sdf: np.ndarray
    msdf: np.ndarray | None = None
    deform: np.ndarray | None = None

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        nv = self.grid.n_vertices
        self.sdf = np.ascontiguousarray(self.sdf, dtype=np.float64)
        if self.sdf.shape != (nv,):
            raise ValueError(f"sdf must have shape ({nv},)")
        if not np.all(np.isfinite(self.sdf)):
            raise ValueError("sdf contains non-finite values")
        if self.msdf is not None:
            self.msdf = np.ascontiguousarray(self.msdf, dtype=np.float64)
            if self.msdf.shape != (nv,):
                raise ValueError(f"msdf must have shape ({nv},)")
            if not np.all(np.isfinite(self.msdf)):
                raise ValueError("msdf contains non-finite values")
        if self.deform is not None:
            self.deform = np.ascontiguousarray(self.deform, dtype=np.float64)
            if self.deform.shape != (nv, 3):
                raise ValueError(f"deform must have shape ({nv}, 3)")
            bound = self.grid.deform_bound()
            norms = np.linalg.norm(self.deform, axis=1)
            if np.any(norms > bound * (1.0 + 1e-12)):
                raise ValueError("deform offsets exceed the inversion-safety bound")

    def clamp_deform(self) -> None:
        """Project each offset into the inversion-safe ball (row rescale)."""
        if self.deform is not None:
            bound = self.grid.deform_bound()
            norms = np.linalg.norm(self.deform, axis=1)
            over = norms > bound
            if np.any(over):
                self.deform[over] *= (bound / norms[over])[:, None]


# -- binary field container ----------------------------------------------
# header: magic "GSFC" (4 bytes), version u32 LE, resolution u32 LE,
#         bounds lo.xyz hi.xyz as 6 little-endian float64
# payload: one little-endian float64 per grid vertex, in vertex order

_HEADER = struct.Struct("<4sII6d")


def save_field(path, grid: TetGrid, values: np.ndarray) -> None:
    values = np.asarray(values, dtype=np.float64)
    if values.shape != (grid.n_vertices,):
        raise ValueError("field length does not match grid vertex count")
    header = _HEADER.pack(
        MAGIC, CONTAINER_VERSION, grid.resolution,
        *grid.bounds_lo.tolist(), *grid.bounds_hi.tolist(),
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(values.astype("<f8").tobytes())


def load_field(path) -> tuple[int, np.ndarray, np.ndarray, np.ndarray]:
    """Read a field container; returns (resolution, lo, hi, values)."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError("field container truncated")
    magic, version, resolution, *bounds = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ValueError("not a field container (bad magic)")
    if version != CONTAINER_VERSION:
        raise ValueError(f"unsupported container version {version}")
    lo = np.asarray(bounds[:3])
    hi = np.asarray(bounds[3:])
    values = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size).astype(np.float64)
    expected = (resolution + 1) ** 3 + resolution ** 3
    if len(values) != expected:
        raise ValueError(f"payload has {len(values)} values, expected {expected}")
    return resolution, lo, hi, values
