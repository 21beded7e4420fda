"""Bounding-volume hierarchy over triangles.

Deterministic median-split build (longest centroid axis, stable order,
leaf size 4).  Internal nodes cover contiguous ranges of the permuted face
array, so per-node aggregates for the winding-number far field (dipole,
area centroid, bounding radius) come straight from prefix ranges.

Queries are numba kernels: closest point on the surface (branch-and-bound
with box lower bounds) and generalized winding number (far-field dipole
approximation, exact solid angles near or at leaves).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

LEAF_SIZE = 4
FAR_FIELD_BETA = 2.0


@dataclass(eq=False)
class TriangleBVH:
    # tree: children -1 on leaves; every node covers faces [start, start+count)
    node_lo: np.ndarray
    node_hi: np.ndarray
    left: np.ndarray
    right: np.ndarray
    start: np.ndarray
    count: np.ndarray
    # permuted face data
    order: np.ndarray        # original face index per permuted slot
    tri_pts: np.ndarray      # (nf, 3, 3) vertex positions per permuted face
    # winding-number aggregates per node
    dipole: np.ndarray       # (nn, 3) sum of area-weighted normals
    w_center: np.ndarray     # (nn, 3) area centroid
    w_radius: np.ndarray     # (nn,) max vertex distance from w_center


def build_bvh(vertices: np.ndarray, faces: np.ndarray) -> TriangleBVH:
    vertices = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    nf = len(faces)
    if nf == 0:
        raise ValueError("cannot build a BVH over zero faces")

    pts = vertices[faces]                      # (nf, 3, 3)
    box_lo = pts.min(axis=1)
    box_hi = pts.max(axis=1)
    centroids = pts.mean(axis=1)

    order = np.arange(nf, dtype=np.int64)
    node_lo, node_hi = [], []
    left, right, start, count = [], [], [], []

    def new_node():
        node_lo.append(None)
        node_hi.append(None)
        left.append(-1)
        right.append(-1)
        start.append(0)
        count.append(0)
        return len(left) - 1

    # iterative preorder build; children of a split are contiguous subranges
    stack = [(new_node(), 0, nf)]
    while stack:
        node, lo_i, hi_i = stack.pop()
        idx = order[lo_i:hi_i]
        node_lo[node] = box_lo[idx].min(axis=0)
        node_hi[node] = box_hi[idx].max(axis=0)
        start[node] = lo_i
        count[node] = hi_i - lo_i
        if hi_i - lo_i <= LEAF_SIZE:
            continue
        cb = centroids[idx]
        axis = int(np.argmax(cb.max(axis=0) - cb.min(axis=0)))
        key = np.argsort(cb[:, axis], kind="stable")
        order[lo_i:hi_i] = idx[key]
        mid = lo_i + (hi_i - lo_i) // 2
        l = new_node()
        r = new_node()
        left[node], right[node] = l, r
        # push right first so the left child is processed (and numbered) next
        stack.append((r, mid, hi_i))
        stack.append((l, lo_i, mid))

    nn = len(left)
    node_lo = np.asarray(node_lo, dtype=np.float64)
    node_hi = np.asarray(node_hi, dtype=np.float64)
    left = np.asarray(left, dtype=np.int64)
    right = np.asarray(right, dtype=np.int64)
    start = np.asarray(start, dtype=np.int64)
    count = np.asarray(count, dtype=np.int64)

    tri_pts = np.ascontiguousarray(pts[order])
    e1 = tri_pts[:, 1] - tri_pts[:, 0]
    e2 = tri_pts[:, 2] - tri_pts[:, 0]
    an = 0.5 * np.cross(e1, e2)               # area-weighted normals
    areas = np.linalg.norm(an, axis=1)
    fc = tri_pts.mean(axis=1)

    dipole = np.zeros((nn, 3))
    w_center = np.zeros((nn, 3))
    w_radius = np.zeros(nn)
    # prefix sums over the permuted order make per-node aggregates O(1)
    c_an = np.concatenate([np.zeros((1, 3)), np.cumsum(an, axis=0)])
    c_ac = np.concatenate([np.zeros((1, 3)), np.cumsum(areas[:, None] * fc, axis=0)])
    c_a = np.concatenate([[0.0], np.cumsum(areas)])
    for n in range(nn):
        s, e = start[n], start[n] + count[n]
        dipole[n] = c_an[e] - c_an[s]
        total = c_a[e] - c_a[s]
        w_center[n] = (c_ac[e] - c_ac[s]) / total if total > 0 else tri_pts[s:e].mean(axis=(0, 1))
        w_radius[n] = np.linalg.norm(tri_pts[s:e].reshape(-1, 3) - w_center[n], axis=1).max()

    return TriangleBVH(node_lo, node_hi, left, right, start, count,
                       order, tri_pts, dipole, w_center, w_radius)


@njit(cache=True, inline="always")
def _box_dist2(p, lo, hi):
    d2 = 0.0
    for k in range(3):
        if p[k] < lo[k]:
            d = lo[k] - p[k]
            d2 += d * d
        elif p[k] > hi[k]:
            d = p[k] - hi[k]
            d2 += d * d
    return d2


@njit(cache=True)
def _closest_on_tri(p, a, b, c, out):
    """Closest point on triangle abc to p (Ericson's region walk).

    Writes the point into `out` and returns the squared distance."""
    ab0, ab1, ab2 = b[0] - a[0], b[1] - a[1], b[2] - a[2]
    ac0, ac1, ac2 = c[0] - a[0], c[1] - a[1], c[2] - a[2]
    ap0, ap1, ap2 = p[0] - a[0], p[1] - a[1], p[2] - a[2]
    d1 = ab0 * ap0 + ab1 * ap1 + ab2 * ap2
    d2 = ac0 * ap0 + ac1 * ap1 + ac2 * ap2
    if d1 <= 0.0 and d2 <= 0.0:
        out[0], out[1], out[2] = a[0], a[1], a[2]
    else:
        bp0, bp1, bp2 = p[0] - b[0], p[1] - b[1], p[2] - b[2]
        d3 = ab0 * bp0 + ab1 * bp1 + ab2 * bp2
        d4 = ac0 * bp0 + ac1 * bp1 + ac2 * bp2
        if d3 >= 0.0 and d4 <= d3:
            out[0], out[1], out[2] = b[0], b[1], b[2]
        else:
            vc = d1 * d4 - d3 * d2
            if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
                v = d1 / (d1 - d3)
                out[0] = a[0] + v * ab0
                out[1] = a[1] + v * ab1
                out[2] = a[2] + v * ab2
            else:
                cp0, cp1, cp2 = p[0] - c[0], p[1] - c[1], p[2] - c[2]
                d5 = ab0 * cp0 + ab1 * cp1 + ab2 * cp2
                d6 = ac0 * cp0 + ac1 * cp1 + ac2 * cp2
                if d6 >= 0.0 and d5 <= d6:
                    out[0], out[1], out[2] = c[0], c[1], c[2]
                else:
                    vb = d5 * d2 - d1 * d6
                    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
                        w = d2 / (d2 - d6)
                        out[0] = a[0] + w * ac0
                        out[1] = a[1] + w * ac1
                        out[2] = a[2] + w * ac2
                    else:
                        va = d3 * d6 - d5 * d4
                        if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
                            w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
                            out[0] = b[0] + w * (c[0] - b[0])
                            out[1] = b[1] + w * (c[1] - b[1])
                            out[2] = b[2] + w * (c[2] - b[2])
                        else:
                            denom = 1.0 / (va + vb + vc)
                            v = vb * denom
                            w = vc * denom
                            out[0] = a[0] + ab0 * v + ac0 * w
                            out[1] = a[1] + ab1 * v + ac1 * w
                            out[2] = a[2] + ab2 * v + ac2 * w
    dx = p[0] - out[0]
    dy = p[1] - out[1]
    dz = p[2] - out[2]
    return dx * dx + dy * dy + dz * dz


@njit(cache=True)
def closest_point_kernel(points, node_lo, node_hi, left, right, start, count,
                         tri_pts, out_q, out_face, out_d2):
    n = len(points)
    stack = np.empty(128, dtype=np.int64)
    q = np.empty(3, dtype=np.float64)
    for i in range(n):
        p = points[i]
        best = np.inf
        best_face = -1
        bq0 = bq1 = bq2 = 0.0
        top = 0
        stack[0] = 0
        top = 1
        while top > 0:
            top -= 1
            node = stack[top]
            if _box_dist2(p, node_lo[node], node_hi[node]) >= best:
                continue
            l = left[node]
            if l < 0:
                s = start[node]
                e = s + count[node]
                for f in range(s, e):
                    d2 = _closest_on_tri(p, tri_pts[f, 0], tri_pts[f, 1], tri_pts[f, 2], q)
                    if d2 < best:
                        best = d2
                        best_face = f
                        bq0, bq1, bq2 = q[0], q[1], q[2]
            else:
                r = right[node]
                dl = _box_dist2(p, node_lo[l], node_hi[l])
                dr = _box_dist2(p, node_lo[r], node_hi[r])
                # push the farther child first so the nearer pops next
                if dl <= dr:
                    stack[top] = r
                    top += 1
                    stack[top] = l
                    top += 1
                else:
                    stack[top] = l
                    top += 1
                    stack[top] = r
                    top += 1
        out_q[i, 0], out_q[i, 1], out_q[i, 2] = bq0, bq1, bq2
        out_face[i] = best_face
        out_d2[i] = best
    return out_d2


@njit(cache=True, inline="always")
def _solid_angle(p, a, b, c):
    ax, ay, az = a[0] - p[0], a[1] - p[1], a[2] - p[2]
    bx, by, bz = b[0] - p[0], b[1] - p[1], b[2] - p[2]
    cx, cy, cz = c[0] - p[0], c[1] - p[1], c[2] - p[2]
    la = np.sqrt(ax * ax + ay * ay + az * az)
    lb = np.sqrt(bx * bx + by * by + bz * bz)
    lc = np.sqrt(cx * cx + cy * cy + cz * cz)
    det = (ax * (by * cz - bz * cy)
           - ay * (bx * cz - bz * cx)
           + az * (bx * cy - by * cx))
    denom = (la * lb * lc + (ax * bx + ay * by + az * bz) * lc
             + (bx * cx + by * cy + bz * cz) * la
             + (cx * ax + cy * ay + cz * az) * lb)
    return 2.0 * np.arctan2(det, denom)


@njit(cache=True)
def winding_kernel(points, node_lo, node_hi, left, right, start, count,
                   tri_pts, dipole, w_center, w_radius, beta, out_w):
    n = len(points)
    stack = np.empty(128, dtype=np.int64)
    inv4pi = 1.0 / (4.0 * np.pi)
    for i in range(n):
        p = points[i]
        w = 0.0
        stack[0] = 0
        top = 1
        while top > 0:
            top -= 1
            node = stack[top]
            dx = w_center[node, 0] - p[0]
            dy = w_center[node, 1] - p[1]
            dz = w_center[node, 2] - p[2]
            dist = np.sqrt(dx * dx + dy * dy + dz * dz)
            if dist > beta * w_radius[node] and dist > 0.0:
                # far field: single dipole for the whole subtree
                w += (dipole[node, 0] * dx + dipole[node, 1] * dy
                      + dipole[node, 2] * dz) * inv4pi / (dist * dist * dist)
                continue
            l = left[node]
            if l < 0:
                s = start[node]
                e = s + count[node]
                for f in range(s, e):
                    w += _solid_angle(p, tri_pts[f, 0], tri_pts[f, 1], tri_pts[f, 2]) * inv4pi
            else:
                stack[top] = l
                top += 1
                stack[top] = right[node]
                top += 1
        out_w[i] = w
    return out_w


def closest_points(bvh: TriangleBVH, points: np.ndarray):
    """Batch closest-surface-point query.

    Returns (distances, closest points, original face indices)."""
    points = np.ascontiguousarray(np.atleast_2d(points), dtype=np.float64)
    n = len(points)
    out_q = np.empty((n, 3))
    out_face = np.empty(n, dtype=np.int64)
    out_d2 = np.empty(n)
    closest_point_kernel(points, bvh.node_lo, bvh.node_hi, bvh.left, bvh.right,
                         bvh.start, bvh.count, bvh.tri_pts, out_q, out_face, out_d2)
    return np.sqrt(out_d2), out_q, bvh.order[out_face]


def winding_numbers(bvh: TriangleBVH, points: np.ndarray,
                    beta: float = FAR_FIELD_BETA) -> np.ndarray:
    points = np.ascontiguousarray(np.atleast_2d(points), dtype=np.float64)
    out_w = np.empty(len(points))
    winding_kernel(points, bvh.node_lo, bvh.node_hi, bvh.left, bvh.right,
                   bvh.start, bvh.count, bvh.tri_pts, bvh.dipole,
                   bvh.w_center, bvh.w_radius, beta, out_w)
    return out_w


# -- triangle-triangle intersection (for self-intersection checks) ---------

@njit(cache=True, inline="always")
def _cross3(ax, ay, az, bx, by, bz):
    return ay * bz - az * by, az * bx - ax * bz, ax * by - ay * bx


@njit(cache=True)
def _coplanar_overlap(t1, t2, nx, ny, nz):
    # project onto the dominant axis plane and run 2D edge/containment tests
    anx, any_, anz = abs(nx), abs(ny), abs(nz)
    if anx >= any_ and anx >= anz:
        i0, i1 = 1, 2
    elif any_ >= anz:
        i0, i1 = 0, 2
    else:
        i0, i1 = 0, 1
    # 2D segment intersection between all edge pairs
    for a in range(3):
        a2 = (a + 1) % 3
        p0x, p0y = t1[a, i0], t1[a, i1]
        p1x, p1y = t1[a2, i0], t1[a2, i1]
        for b in range(3):
            b2 = (b + 1) % 3
            q0x, q0y = t2[b, i0], t2[b, i1]
            q1x, q1y = t2[b2, i0], t2[b2, i1]
            d1x, d1y = p1x - p0x, p1y - p0y
            d2x, d2y = q1x - q0x, q1y - q0y
            denom = d1x * d2y - d1y * d2x
            if denom == 0.0:
                continue
            rx, ry = q0x - p0x, q0y - p0y
            s = (rx * d2y - ry * d2x) / denom
            t = (rx * d1y - ry * d1x) / denom
            if 0.0 < s < 1.0 and 0.0 < t < 1.0:
                return True
    # full containment: test one vertex of each inside the other
    if _point_in_tri_2d(t1[0, i0], t1[0, i1], t2, i0, i1):
        return True
    if _point_in_tri_2d(t2[0, i0], t2[0, i1], t1, i0, i1):
        return True
    return False


@njit(cache=True)
def _point_in_tri_2d(px, py, tri, i0, i1):
    sign = 0.0
    for b in range(3):
        b2 = (b + 1) % 3
        ex, ey = tri[b2, i0] - tri[b, i0], tri[b2, i1] - tri[b, i1]
        wx, wy = px - tri[b, i0], py - tri[b, i1]
        cr = ex * wy - ey * wx
        if cr == 0.0:
            return False
        if sign == 0.0:
            sign = cr
        elif cr * sign < 0.0:
            return False
    return True


@njit(cache=True)
def tri_tri_intersect(t1, t2, eps):
    """Whether two triangles properly intersect (interval method).

    Touching within eps does not count; shared-vertex pairs are the
    caller's business to exclude."""
    # plane of t2
    e1x, e1y, e1z = t2[1, 0] - t2[0, 0], t2[1, 1] - t2[0, 1], t2[1, 2] - t2[0, 2]
    e2x, e2y, e2z = t2[2, 0] - t2[0, 0], t2[2, 1] - t2[0, 1], t2[2, 2] - t2[0, 2]
    n2x, n2y, n2z = _cross3(e1x, e1y, e1z, e2x, e2y, e2z)
    d2 = -(n2x * t2[0, 0] + n2y * t2[0, 1] + n2z * t2[0, 2])
    du = np.empty(3)
    for k in range(3):
        du[k] = n2x * t1[k, 0] + n2y * t1[k, 1] + n2z * t1[k, 2] + d2
        if abs(du[k]) < eps:
            du[k] = 0.0
    if (du[0] > 0 and du[1] > 0 and du[2] > 0) or (du[0] < 0 and du[1] < 0 and du[2] < 0):
        return False

    # plane of t1
    f1x, f1y, f1z = t1[1, 0] - t1[0, 0], t1[1, 1] - t1[0, 1], t1[1, 2] - t1[0, 2]
    f2x, f2y, f2z = t1[2, 0] - t1[0, 0], t1[2, 1] - t1[0, 1], t1[2, 2] - t1[0, 2]
    n1x, n1y, n1z = _cross3(f1x, f1y, f1z, f2x, f2y, f2z)
    d1 = -(n1x * t1[0, 0] + n1y * t1[0, 1] + n1z * t1[0, 2])
    dv = np.empty(3)
    for k in range(3):
        dv[k] = n1x * t2[k, 0] + n1y * t2[k, 1] + n1z * t2[k, 2] + d1
        if abs(dv[k]) < eps:
            dv[k] = 0.0
    if (dv[0] > 0 and dv[1] > 0 and dv[2] > 0) or (dv[0] < 0 and dv[1] < 0 and dv[2] < 0):
        return False

    if du[0] == 0 and du[1] == 0 and du[2] == 0:
        return _coplanar_overlap(t1, t2, n2x, n2y, n2z)

    # intersection line direction
    lx, ly, lz = _cross3(n1x, n1y, n1z, n2x, n2y, n2z)
    # project on the dominant axis of the line
    alx, aly, alz = abs(lx), abs(ly), abs(lz)
    if alx >= aly and alx >= alz:
        axis = 0
    elif aly >= alz:
        axis = 1
    else:
        axis = 2

    # interval of t1 on the line
    lo1, hi1 = _tri_interval(t1, du, axis)
    if lo1 > hi1:
        return False
    lo2, hi2 = _tri_interval(t2, dv, axis)
    if lo2 > hi2:
        return False
    lo = lo1 if lo1 > lo2 else lo2
    hi = hi1 if hi1 < hi2 else hi2
    return lo < hi - eps


@njit(cache=True)
def _tri_interval(t, d, axis):
    """Parameter interval where the triangle crosses the plane (d signs)."""
    lo = np.inf
    hi = -np.inf
    found = False
    for a in range(3):
        b = (a + 1) % 3
        da, db = d[a], d[b]
        if da == 0.0:
            p = t[a, axis]
            if p < lo:
                lo = p
            if p > hi:
                hi = p
            found = True
        if (da > 0 > db) or (da < 0 < db):
            s = da / (da - db)
            p = t[a, axis] + s * (t[b, axis] - t[a, axis])
            if p < lo:
                lo = p
            if p > hi:
                hi = p
            found = True
    if not found:
        return 1.0, 0.0
    return lo, hi


@njit(cache=True)
def _count_box_hits(tris, faces, box_lo, box_hi, node_lo, node_hi,
                    left, right, start, count, order_inv, pass_fill,
                    pair_a, pair_b, eps):
    nf = len(box_lo)
    stack = np.empty(128, dtype=np.int64)
    total = 0
    for f in range(nf):
        lo_f = box_lo[f]
        hi_f = box_hi[f]
        stack[0] = 0
        top = 1
        while top > 0:
            top -= 1
            node = stack[top]
            overlap = True
            for k in range(3):
                if lo_f[k] > node_hi[node, k] + eps or hi_f[k] < node_lo[node, k] - eps:
                    overlap = False
                    break
            if not overlap:
                continue
            l = left[node]
            if l < 0:
                s = start[node]
                e = s + count[node]
                for slot in range(s, e):
                    g = order_inv[slot]
                    if g <= f:
                        continue
                    ok = True
                    for k in range(3):
                        if lo_f[k] > box_hi[g][k] + eps or hi_f[k] < box_lo[g][k] - eps:
                            ok = False
                            break
                    if not ok:
                        continue
                    # skip pairs sharing a vertex
                    shared = False
                    for i in range(3):
                        for j in range(3):
                            if faces[f, i] == faces[g, j]:
                                shared = True
                    if shared:
                        continue
                    if pass_fill:
                        pair_a[total] = f
                        pair_b[total] = g
                    total += 1
            else:
                stack[top] = l
                top += 1
                stack[top] = right[node]
                top += 1
    return total


def candidate_face_pairs(bvh: TriangleBVH, faces: np.ndarray, tri_boxes_lo,
                         tri_boxes_hi, eps: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """All face pairs (f < g, no shared vertices) with overlapping boxes."""
    # map permuted slots back to original face ids
    order_inv = bvh.order
    zero = np.zeros(0, dtype=np.int64)
    n = _count_box_hits(bvh.tri_pts, faces, tri_boxes_lo, tri_boxes_hi,
                        bvh.node_lo, bvh.node_hi, bvh.left, bvh.right,
                        bvh.start, bvh.count, order_inv, False, zero, zero, eps)
    pair_a = np.empty(n, dtype=np.int64)
    pair_b = np.empty(n, dtype=np.int64)
    _count_box_hits(bvh.tri_pts, faces, tri_boxes_lo, tri_boxes_hi,
                    bvh.node_lo, bvh.node_hi, bvh.left, bvh.right,
                    bvh.start, bvh.count, order_inv, True, pair_a, pair_b, eps)
    return pair_a, pair_b


@njit(cache=True)
def _intersecting_pairs(pts, faces, pair_a, pair_b, eps, out_mask):
    t1 = np.empty((3, 3))
    t2 = np.empty((3, 3))
    for i in range(len(pair_a)):
        fa = faces[pair_a[i]]
        fb = faces[pair_b[i]]
        for r in range(3):
            for c in range(3):
                t1[r, c] = pts[fa[r], c]
                t2[r, c] = pts[fb[r], c]
        out_mask[i] = tri_tri_intersect(t1, t2, eps)


def self_intersecting_pairs(vertices: np.ndarray, faces: np.ndarray,
                            eps: float = 1e-12) -> np.ndarray:
    """(k, 2) array of face index pairs that properly intersect."""
    vertices = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    if len(faces) < 2:
        return np.zeros((0, 2), dtype=np.int64)
    tree = build_bvh(vertices, faces)
    pts = vertices[faces]
    lo = pts.min(axis=1)
    hi = pts.max(axis=1)
    scale = float(np.max(hi.max(axis=0) - lo.min(axis=0)))
    pair_a, pair_b = candidate_face_pairs(tree, faces, lo, hi)
    if len(pair_a) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    mask = np.zeros(len(pair_a), dtype=np.bool_)
    _intersecting_pairs(vertices, faces, pair_a, pair_b, eps * max(scale, 1.0), mask)
    return np.stack([pair_a[mask], pair_b[mask]], axis=1)
