"""Differentiable mesh extraction from tet-grid fields.

Two stages:

* ``marching_tets`` — per-tet case-table extraction of the sdf=0 isosurface.
  Crossing vertices sit at v = (1-t) p_i + t p_j with t = s_i/(s_i - s_j);
  vertices are welded across tets by exact shared-edge identity.
* ``gshell_extract`` — runs the marching stage, interpolates the second
  field onto the extracted surface, then trims it by marching triangles:
  faces with all values > 0 kept, all <= 0 dropped, mixed faces clipped
  along the zero polyline (clip vertices welded by surface-edge identity).

``ExtractionRecord`` carries the full interpolation provenance so
``extraction_gradients`` can push vertex-position cotangents back onto the
sdf / msdf values and deformation offsets analytically.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mesh import TriMesh
from .tetgrid import GShellParams, TetGrid

NUDGE = 1e-10

# local vertex pairs of a tet's six edges
EDGE_VERTS = np.array([[0, 1], [0, 2], [0, 3], [1, 2], [1, 3], [2, 3]], dtype=np.int64)

# case table indexed by occupancy code (bit k set iff s_k > 0); entries are
# local edge indices, -1 padding; orientation gives normals toward s > 0
TRI_TABLE = np.array(
    [
        [-1, -1, -1, -1, -1, -1],
        [1, 0, 2, -1, -1, -1],
        [4, 0, 3, -1, -1, -1],
        [1, 4, 2, 1, 3, 4],
        [3, 1, 5, -1, -1, -1],
        [2, 3, 0, 2, 5, 3],
        [1, 4, 0, 1, 5, 4],
        [4, 2, 5, -1, -1, -1],
        [4, 5, 2, -1, -1, -1],
        [4, 1, 0, 4, 5, 1],
        [3, 2, 0, 3, 5, 2],
        [1, 3, 5, -1, -1, -1],
        [4, 1, 2, 4, 3, 1],
        [3, 0, 4, -1, -1, -1],
        [2, 0, 1, -1, -1, -1],
        [-1, -1, -1, -1, -1, -1],
    ],
    dtype=np.int64,
)
NUM_TRI = np.array([0, 1, 1, 2, 1, 2, 2, 1, 1, 2, 2, 1, 2, 1, 1, 0], dtype=np.int64)


@dataclass(eq=False)
class ExtractionRecord:
    """Provenance of every extracted vertex for analytic backprop."""

    n_grid_vertices: int
    deform_used: bool
    # isosurface vertices (marching stage): grid edge (lo = negative side)
    lo: np.ndarray
    hi: np.ndarray
    t: np.ndarray
    s_lo: np.ndarray
    s_hi: np.ndarray
    p_lo: np.ndarray
    p_hi: np.ndarray
    iso_pos: np.ndarray
    # trim stage (empty in closed mode)
    kept_iso: np.ndarray          # iso indices surviving the trim, in order
    clip_a: np.ndarray            # iso index pairs carrying clip vertices
    clip_b: np.ndarray
    u: np.ndarray
    msdf_on_iso: np.ndarray | None = None
    msdf_lo: np.ndarray | None = None
    msdf_hi: np.ndarray | None = None

    @property
    def n_out_vertices(self) -> int:
        return len(self.kept_iso) + len(self.clip_a)


def _nudged(values: np.ndarray) -> np.ndarray:
    """Copy with exact zeros replaced by +NUDGE (degenerate-crossing rule)."""
    out = np.array(values, dtype=np.float64, copy=True)
    out[out == 0.0] = NUDGE
    return out


def _empty_record(n_grid: int, deform_used: bool) -> ExtractionRecord:
    z = np.zeros(0, dtype=np.int64)
    zf = np.zeros(0, dtype=np.float64)
    zp = np.zeros((0, 3), dtype=np.float64)
    return ExtractionRecord(n_grid, deform_used, z, z, zf, zf, zf, zp, zp, zp,
                            z.copy(), z.copy(), z.copy(), zf.copy())


def _march(grid: TetGrid, sdf: np.ndarray, deform: np.ndarray | None):
    """Marching stage shared by both extraction entry points.

    Returns (iso positions, faces into iso vertices, record)."""
    sdf = np.asarray(sdf, dtype=np.float64)
    if sdf.shape != (grid.n_vertices,):
        raise ValueError("sdf length does not match grid vertex count")
    if not np.all(np.isfinite(sdf)):
        raise ValueError("sdf contains non-finite values")
    verts = grid.vertices if deform is None else grid.vertices + deform

    s = _nudged(sdf)
    occ = s > 0
    occ4 = occ[grid.tets]
    code = occ4 @ np.array([1, 2, 4, 8], dtype=np.int64)
    valid = (code > 0) & (code < 15)
    if not valid.any():
        rec = _empty_record(grid.n_vertices, deform is not None)
        return np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64), rec

    vt = grid.tets[valid]
    vcode = code[valid]

    edges = vt[:, EDGE_VERTS]                      # (k, 6, 2)
    e_sorted = np.sort(edges.reshape(-1, 2), axis=1)
    uniq, inv = np.unique(e_sorted, axis=0, return_inverse=True)
    cross = occ[uniq[:, 0]] != occ[uniq[:, 1]]
    iso_of_edge = np.full(len(uniq), -1, dtype=np.int64)
    iso_of_edge[cross] = np.arange(int(cross.sum()))
    edge_out = iso_of_edge[inv.reshape(len(vt), 6)]  # (k, 6)

    ce = uniq[cross]
    neg_first = ~occ[ce[:, 0]]
    lo = np.where(neg_first, ce[:, 0], ce[:, 1])
    hi = np.where(neg_first, ce[:, 1], ce[:, 0])
    s_lo, s_hi = s[lo], s[hi]
    t = s_lo / (s_lo - s_hi)
    p_lo, p_hi = verts[lo], verts[hi]
    iso_pos = (1.0 - t)[:, None] * p_lo + t[:, None] * p_hi

    # faces in tet-major order
    ntri = NUM_TRI[vcode]
    rows1 = TRI_TABLE[vcode, :3]
    rows2 = TRI_TABLE[vcode, 3:6]
    f1 = np.take_along_axis(edge_out, rows1, axis=1)
    offsets = np.concatenate([[0], np.cumsum(ntri)])
    faces = np.empty((offsets[-1], 3), dtype=np.int64)
    faces[offsets[:-1]] = f1
    two = ntri == 2
    faces[offsets[:-1][two] + 1] = np.take_along_axis(edge_out, rows2, axis=1)[two]

    rec = ExtractionRecord(
        n_grid_vertices=grid.n_vertices,
        deform_used=deform is not None,
        lo=lo, hi=hi, t=t, s_lo=s_lo, s_hi=s_hi,
        p_lo=p_lo, p_hi=p_hi, iso_pos=iso_pos,
        kept_iso=np.arange(len(lo), dtype=np.int64),
        clip_a=np.zeros(0, dtype=np.int64),
        clip_b=np.zeros(0, dtype=np.int64),
        u=np.zeros(0, dtype=np.float64),
    )
    return iso_pos, faces, rec


def marching_tets(
    grid: TetGrid,
    sdf: np.ndarray,
    deform: np.ndarray | None = None,
    name: str = "",
) -> tuple[TriMesh, ExtractionRecord]:
    """Extract the watertight sdf=0 isosurface (normals toward sdf > 0)."""
    iso_pos, faces, rec = _march(grid, sdf, deform)
    return TriMesh(iso_pos, faces, name=name), rec


def gshell_extract(
    grid: TetGrid,
    sdf: np.ndarray,
    msdf: np.ndarray | None,
    deform: np.ndarray | None = None,
    name: str = "",
) -> tuple[TriMesh, ExtractionRecord]:
    """Extract the isosurface and trim it where the interpolated msdf <= 0.

    With ``msdf=None`` (closed mode) or msdf everywhere positive this equals
    ``marching_tets`` output exactly, vertex for vertex and face for face.
    """
    iso_pos, faces, rec = _march(grid, sdf, deform)
    if msdf is None:
        return TriMesh(iso_pos, faces, name=name), rec
    msdf = np.asarray(msdf, dtype=np.float64)
    if msdf.shape != (grid.n_vertices,):
        raise ValueError("msdf length does not match grid vertex count")
    if not np.all(np.isfinite(msdf)):
        raise ValueError("msdf contains non-finite values")
    if len(iso_pos) == 0:
        return TriMesh(iso_pos, faces, name=name), rec

    m_lo, m_hi = msdf[rec.lo], msdf[rec.hi]
    m_iso = _nudged((1.0 - rec.t) * m_lo + rec.t * m_hi)
    rec.msdf_on_iso = m_iso
    rec.msdf_lo = m_lo
    rec.msdf_hi = m_hi

    pos = m_iso > 0
    fpos = pos[faces]
    npos = fpos.sum(axis=1)

    kept_iso = np.nonzero(pos)[0]
    new_index = np.full(len(iso_pos), -1, dtype=np.int64)
    new_index[kept_iso] = np.arange(len(kept_iso))

    if np.all(npos == 3):
        # nothing trimmed: preserve arrays bit for bit (DMT equivalence)
        rec.kept_iso = np.arange(len(iso_pos), dtype=np.int64)
        return TriMesh(iso_pos, faces, name=name), rec

    # rotate mixed faces so the pattern is (+,-,-) or (+,+,-)
    rot1 = np.argmax(fpos, axis=1)            # k=1: index of the positive corner
    rot2 = (np.argmin(fpos, axis=1) + 1) % 3  # k=2: start after the negative corner
    rot = np.where(npos == 1, rot1, rot2)
    cols = (rot[:, None] + np.arange(3)[None, :]) % 3
    rfaces = np.take_along_axis(faces, cols, axis=1)  # rotated, same orientation

    mixed = (npos == 1) | (npos == 2)
    mf = rfaces[mixed]
    mk = npos[mixed]
    # clip edges per mixed face: k=1 -> (A,B) and (C,A); k=2 -> (B,C) and (C,A)
    e_first = np.where((mk == 1)[:, None], mf[:, [0, 1]], mf[:, [1, 2]])
    e_second = mf[:, [2, 0]]
    clip_edges = np.sort(np.concatenate([e_first, e_second], axis=0), axis=1)
    uniq_ce, inv_ce = np.unique(clip_edges, axis=0, return_inverse=True)
    ca, cb = uniq_ce[:, 0], uniq_ce[:, 1]
    u = m_iso[ca] / (m_iso[ca] - m_iso[cb])
    clip_pos = (1.0 - u)[:, None] * iso_pos[ca] + u[:, None] * iso_pos[cb]
    nk = len(kept_iso)
    clip_id = nk + np.arange(len(uniq_ce))
    id_first = clip_id[inv_ce[: len(mf)]]
    id_second = clip_id[inv_ce[len(mf):]]

    # emit faces in original face order
    out_counts = np.zeros(len(faces), dtype=np.int64)
    out_counts[npos == 3] = 1
    out_counts[npos == 1] = 1
    out_counts[npos == 2] = 2
    out_off = np.concatenate([[0], np.cumsum(out_counts)])
    out_faces = np.empty((out_off[-1], 3), dtype=np.int64)

    keep_rows = npos == 3
    out_faces[out_off[:-1][keep_rows]] = new_index[faces[keep_rows]]

    mrows = np.nonzero(mixed)[0]
    slot = out_off[:-1][mrows]
    k1 = mk == 1
    k2 = mk == 2
    # k=1: (A, clip_AB, clip_CA)
    if k1.any():
        tri = np.stack([new_index[mf[k1, 0]], id_first[k1], id_second[k1]], axis=1)
        out_faces[slot[k1]] = tri
    # k=2: (A, B, clip_BC), (A, clip_BC, clip_CA)
    if k2.any():
        triA = np.stack([new_index[mf[k2, 0]], new_index[mf[k2, 1]], id_first[k2]], axis=1)
        triB = np.stack([new_index[mf[k2, 0]], id_first[k2], id_second[k2]], axis=1)
        out_faces[slot[k2]] = triA
        out_faces[slot[k2] + 1] = triB

    rec.kept_iso = kept_iso
    rec.clip_a = ca
    rec.clip_b = cb
    rec.u = u
    out_verts = np.concatenate([iso_pos[kept_iso], clip_pos], axis=0)
    return TriMesh(out_verts, out_faces, name=name), rec


def extract(params: GShellParams, name: str = "") -> tuple[TriMesh, ExtractionRecord]:
    """Convenience wrapper over a parameter bundle."""
    return gshell_extract(params.grid, params.sdf, params.msdf, params.deform, name=name)


def extraction_gradients(record: ExtractionRecord, d_vertices: np.ndarray) -> dict[str, np.ndarray]:
    """Push per-output-vertex cotangents back to field (and deform) cotangents.

    Chain: output vertex -> (clip interpolation u over surface edge) ->
    interpolated msdf at iso vertices -> (edge parameter t, msdf values) ->
    sdf values and deformation offsets. All scatters use np.add.at with a
    fixed order, so results are deterministic.
    """
    d_vertices = np.asarray(d_vertices, dtype=np.float64)
    nk, nc = len(record.kept_iso), len(record.clip_a)
    if d_vertices.shape != (nk + nc, 3):
        raise ValueError(f"cotangents must have shape ({nk + nc}, 3)")

    niso = len(record.t)
    d_iso = np.zeros((niso, 3))
    np.add.at(d_iso, record.kept_iso, d_vertices[:nk])

    d_m_iso = np.zeros(niso)
    if nc:
        dc = d_vertices[nk:]
        u = record.u
        a, b = record.clip_a, record.clip_b
        np.add.at(d_iso, a, (1.0 - u)[:, None] * dc)
        np.add.at(d_iso, b, u[:, None] * dc)
        du = np.einsum("ij,ij->i", dc, record.iso_pos[b] - record.iso_pos[a])
        m_a, m_b = record.msdf_on_iso[a], record.msdf_on_iso[b]
        denom = (m_a - m_b) ** 2
        np.add.at(d_m_iso, a, du * (-m_b / denom))
        np.add.at(d_m_iso, b, du * (m_a / denom))

    out: dict[str, np.ndarray] = {}
    t = record.t
    dt = np.einsum("ij,ij->i", d_iso, record.p_hi - record.p_lo)

    if record.msdf_on_iso is not None:
        d_msdf = np.zeros(record.n_grid_vertices)
        np.add.at(d_msdf, record.lo, d_m_iso * (1.0 - t))
        np.add.at(d_msdf, record.hi, d_m_iso * t)
        dt += d_m_iso * (record.msdf_hi - record.msdf_lo)
        out["msdf"] = d_msdf

    denom_s = (record.s_lo - record.s_hi) ** 2
    d_sdf = np.zeros(record.n_grid_vertices)
    np.add.at(d_sdf, record.lo, dt * (-record.s_hi / denom_s))
    np.add.at(d_sdf, record.hi, dt * (record.s_lo / denom_s))
    out["sdf"] = d_sdf

    if record.deform_used:
        d_def = np.zeros((record.n_grid_vertices, 3))
        np.add.at(d_def, record.lo, (1.0 - t)[:, None] * d_iso)
        np.add.at(d_def, record.hi, t[:, None] * d_iso)
        out["deform"] = d_def
    return out
