"""Triangle mesh container and topology utilities.

Everything downstream (extraction, SDF queries, templates, export) passes
meshes around as plain vertex/face arrays wrapped in :class:`TriMesh`.
Derived topology (edges, boundary loops, components) is computed on demand
and cached per instance; instances are treated as immutable by convention.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass(eq=False)
class TriMesh:
    """Triangle mesh: vertices (n,3) float64, faces (m,3) int64.

    boundary_loops lists each boundary cycle as an ordered array of vertex
    indices (empty list for watertight meshes). It is computed lazily; a
    watertight mesh has no boundary edges by definition.
    """

    vertices: np.ndarray
    faces: np.ndarray
    name: str = ""
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64)
        self.faces = np.ascontiguousarray(self.faces, dtype=np.int64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise ValueError("vertices must be (n, 3)")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise ValueError("faces must be (m, 3)")
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError("face index out of range")

    # -- topology -------------------------------------------------------

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def edges_unique(self) -> np.ndarray:
        """Undirected unique edges, sorted pairs, shape (e, 2)."""
        if "edges" not in self._cache:
            e = np.sort(self.faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
            self._cache["edges"] = np.unique(e, axis=0)
        return self._cache["edges"]

    def edge_face_counts(self) -> tuple[np.ndarray, np.ndarray]:
        """(unique sorted edges, number of incident faces per edge)."""
        if "edge_counts" not in self._cache:
            e = np.sort(self.faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
            uniq, counts = np.unique(e, axis=0, return_counts=True)
            self._cache["edge_counts"] = (uniq, counts)
        return self._cache["edge_counts"]

    def boundary_edges(self) -> np.ndarray:
        """Directed boundary edges (a, b) as they appear in faces, (k, 2)."""
        directed = self.faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2)
        key = np.sort(directed, axis=1)
        uniq, inv, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
        return directed[counts[inv] == 1]

    def boundary_loops(self) -> list[np.ndarray]:
        """Ordered boundary cycles following face orientation.

        Each loop is an array of vertex indices; consecutive entries (and
        last->first) are boundary edges. Non-manifold boundaries raise.
        """
        if "loops" in self._cache:
            return self._cache["loops"]
        bedges = self.boundary_edges()
        nxt: dict[int, int] = {}
        for a, b in bedges:
            a, b = int(a), int(b)
            if a in nxt:
                raise ValueError(f"non-manifold boundary at vertex {a}")
            nxt[a] = b
        loops = []
        visited = set()
        # deterministic loop order: start each walk at the smallest unvisited vertex
        for start in sorted(nxt):
            if start in visited:
                continue
            loop = [start]
            visited.add(start)
            cur = nxt[start]
            while cur != start:
                if cur in visited or cur not in nxt:
                    raise ValueError("boundary edges do not close into loops")
                loop.append(cur)
                visited.add(cur)
                cur = nxt[cur]
            loops.append(np.asarray(loop, dtype=np.int64))
        self._cache["loops"] = loops
        return loops

    def is_watertight(self) -> bool:
        """True when every edge is shared by exactly two faces."""
        if self.n_faces == 0:
            return False
        _, counts = self.edge_face_counts()
        return bool(np.all(counts == 2))

    def is_consistently_oriented(self) -> bool:
        """True when no directed edge appears more than once."""
        directed = self.faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2)
        uniq = np.unique(directed, axis=0)
        return len(uniq) == len(directed)

    def euler_characteristic(self) -> int:
        return self.n_vertices - len(self.edges_unique()) + self.n_faces

    def connected_components(self) -> np.ndarray:
        """Vertex component labels via the edge graph (isolated verts get own label)."""
        from scipy.sparse import coo_matrix
        from scipy.sparse.csgraph import connected_components

        e = self.edges_unique()
        n = self.n_vertices
        if len(e) == 0:
            return np.arange(n)
        adj = coo_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(n, n))
        _, labels = connected_components(adj, directed=False)
        return labels

    def component_count(self) -> int:
        """Number of connected components among vertices referenced by faces."""
        labels = self.connected_components()
        used = np.zeros(self.n_vertices, dtype=bool)
        used[self.faces.ravel()] = True
        return len(np.unique(labels[used])) if used.any() else 0

    # -- geometry -------------------------------------------------------

    def face_normals(self, normalized: bool = True) -> np.ndarray:
        v = self.vertices
        f = self.faces
        n = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
        if normalized:
            lens = np.linalg.norm(n, axis=1, keepdims=True)
            n = n / np.maximum(lens, 1e-300)
        return n

    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.face_normals(normalized=False), axis=1)

    def vertex_normals(self) -> np.ndarray:
        """Area-weighted vertex normals (sum of incident face cross products)."""
        acc = np.zeros_like(self.vertices)
        fn = self.face_normals(normalized=False)
        for k in range(3):
            np.add.at(acc, self.faces[:, k], fn)
        lens = np.linalg.norm(acc, axis=1, keepdims=True)
        return acc / np.maximum(lens, 1e-300)

    def angle_weighted_vertex_normals(self) -> np.ndarray:
        """Vertex pseudo-normals: incident angle times unit face normal."""
        v, f = self.vertices, self.faces
        fn = self.face_normals()
        acc = np.zeros_like(v)
        for k in range(3):
            a = v[f[:, k]]
            b = v[f[:, (k + 1) % 3]]
            c = v[f[:, (k + 2) % 3]]
            u1 = b - a
            u2 = c - a
            u1 /= np.maximum(np.linalg.norm(u1, axis=1, keepdims=True), 1e-300)
            u2 /= np.maximum(np.linalg.norm(u2, axis=1, keepdims=True), 1e-300)
            ang = np.arccos(np.clip(np.einsum("ij,ij->i", u1, u2), -1.0, 1.0))
            np.add.at(acc, f[:, k], ang[:, None] * fn)
        lens = np.linalg.norm(acc, axis=1, keepdims=True)
        return acc / np.maximum(lens, 1e-300)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def signed_volume(self) -> float:
        """Enclosed volume via the divergence theorem (meaningful when watertight)."""
        v, f = self.vertices, self.faces
        return float(np.einsum("ij,ij->i", v[f[:, 0]], np.cross(v[f[:, 1]], v[f[:, 2]])).sum() / 6.0)


# -- OBJ I/O ------------------------------------------------------------


def save_obj(path, mesh: TriMesh) -> None:
    """Minimal OBJ writer: v/f records only, full float64 round-trip precision."""
    buf = io.StringIO()
    for x, y, z in mesh.vertices:
        buf.write(f"v {x:.17g} {y:.17g} {z:.17g}\n")
    for a, b, c in mesh.faces + 1:
        buf.write(f"f {a} {b} {c}\n")
    Path(path).write_text(buf.getvalue())


def load_obj(path, name: str = "") -> TriMesh:
    """Minimal OBJ reader: v and f records; f may carry /vt/vn suffixes."""
    verts = []
    faces = []
    for line in Path(path).read_text().splitlines():
        if line.startswith("v "):
            parts = line.split()
            verts.append([float(parts[1]), float(parts[2]), float(parts[3])])
        elif line.startswith("f "):
            idx = [int(tok.split("/")[0]) for tok in line.split()[1:]]
            if any(i < 0 for i in idx):
                raise ValueError("negative OBJ indices not supported")
            if len(idx) != 3:
                raise ValueError("only triangle faces supported")
            faces.append([i - 1 for i in idx])
    return TriMesh(
        np.asarray(verts, dtype=np.float64).reshape(-1, 3),
        np.asarray(faces, dtype=np.int64).reshape(-1, 3),
        name=name or Path(path).stem,
    )


# -- primitive builders (used by tests, demos and the procedural body) ---


def make_icosphere(subdivisions: int = 3, radius: float = 1.0, center=(0.0, 0.0, 0.0)) -> TriMesh:
    """Icosahedron subdivided `subdivisions` times, projected to the sphere."""
    t = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array(
        [
            [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
            [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
            [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
        ],
        dtype=np.float64,
    )
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    faces = np.array(
        [
            [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
            [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
            [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
            [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
        ],
        dtype=np.int64,
    )
    for _ in range(subdivisions):
        edge_mid: dict[tuple[int, int], int] = {}
        vlist = list(verts)

        def midpoint(a: int, b: int) -> int:
            key = (a, b) if a < b else (b, a)
            if key not in edge_mid:
                m = vlist[a] + vlist[b]
                m = m / np.linalg.norm(m)
                edge_mid[key] = len(vlist)
                vlist.append(m)
            return edge_mid[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        verts = np.asarray(vlist)
        faces = np.asarray(new_faces, dtype=np.int64)
    return TriMesh(verts * radius + np.asarray(center, dtype=np.float64), faces, name="icosphere")


def make_box(lo=(-0.5, -0.5, -0.5), hi=(0.5, 0.5, 0.5)) -> TriMesh:
    """Axis-aligned box, 12 triangles, outward orientation."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    corners = np.array([[lo[0], lo[1], lo[2]],
                        [hi[0], lo[1], lo[2]],
                        [hi[0], hi[1], lo[2]],
                        [lo[0], hi[1], lo[2]],
                        [lo[0], lo[1], hi[2]],
                        [hi[0], lo[1], hi[2]],
                        [hi[0], hi[1], hi[2]],
                        [lo[0], hi[1], hi[2]]])
    quads = [
        (0, 3, 2, 1),  # -z
        (4, 5, 6, 7),  # +z
        (0, 1, 5, 4),  # -y
        (2, 3, 7, 6),  # +y
        (0, 4, 7, 3),  # -x
        (1, 2, 6, 5),  # +x
    ]
    faces = []
    for a, b, c, d in quads:
        faces += [[a, b, c], [a, c, d]]
    return TriMesh(corners, np.asarray(faces, dtype=np.int64), name="box")
