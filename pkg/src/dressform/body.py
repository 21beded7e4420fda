"""Rigged, masked body template.

A SkinnedBody is a watertight template mesh plus a joint tree, linear
blend-skinning weights, and named vertex masks. Real rigged assets load
from an OBJ + rig-JSON pair; ``procedural_test_body`` builds a
deterministic low-poly humanoid out of a smooth capsule union so the rest
of the pipeline has a license-free stand-in to chew on.

Rig JSON schema (version 1):

    {
      "version": 1,
      "joints": [{"name": str, "parent": int (-1 root),
                  "rest": [16 floats, row-major 4x4]}, ...],
      "weights": [[[joint_index, weight], ...] per vertex],
      "masks": {"mask_name": [vertex indices]}
    }
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .extract import marching_tets
from .mesh import TriMesh, load_obj, save_obj
from .tetgrid import build_grid

WEIGHT_SUM_TOL = 1e-6
EXACT_SUM_TOL = 1e-12
OFFSET_CAP_FRACTION = 0.05  # of body height


@dataclass(eq=False)
class SkinnedBody:
    template: TriMesh
    joint_names: list[str]
    parents: np.ndarray          # (nj,) int64, -1 for the root
    rest: np.ndarray             # (nj, 4, 4) rest transforms
    weights: np.ndarray          # (nv, nj) row-stochastic
    masks: dict[str, np.ndarray]

    @property
    def n_joints(self) -> int:
        return len(self.joint_names)

    @property
    def height(self) -> float:
        lo, hi = self.template.bounds()
        return float(hi[1] - lo[1])

    def validate(self) -> None:
        nv = len(self.template.vertices)
        nj = self.n_joints
        if self.parents.shape != (nj,) or self.rest.shape != (nj, 4, 4):
            raise ValueError("joint table shapes inconsistent")
        if np.any(self.parents >= np.arange(nj)):
            raise ValueError("parents must precede children")
        if self.weights.shape != (nv, nj):
            raise ValueError(f"weights must have shape ({nv}, {nj})")
        if np.any(self.weights < 0):
            raise ValueError("negative skinning weight")
        sums = self.weights.sum(axis=1)
        if np.any(np.abs(sums - 1.0) > 1e-9):
            bad = int(np.argmax(np.abs(sums - 1.0)))
            raise ValueError(f"weight row {bad} sums to {sums[bad]!r}")
        for name, idx in self.masks.items():
            if len(idx) and (idx.min() < 0 or idx.max() >= nv):
                raise ValueError(f"mask {name!r} references out-of-range vertices")
        if not self.template.is_watertight():
            raise ValueError("body template must be watertight")


@dataclass(eq=False)
class EvolvableTemplate:
    """A body whose template vertices carry learnable offsets."""

    base: SkinnedBody
    offsets: np.ndarray
    warnings: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.offsets = np.asarray(self.offsets, dtype=np.float64)
        if self.offsets.shape != self.base.template.vertices.shape:
            raise ValueError("offsets must match template vertex count")
        if not np.all(np.isfinite(self.offsets)):
            raise ValueError("offsets contain non-finite values")

    @property
    def offset_cap(self) -> float:
        return OFFSET_CAP_FRACTION * self.base.height


def apply_offsets(template: EvolvableTemplate) -> TriMesh:
    """Template plus per-vertex offsets; magnitudes above the cap are
    clamped (direction kept) and a warning is recorded on the template."""
    cap = template.offset_cap
    offsets = template.offsets
    norms = np.linalg.norm(offsets, axis=1)
    over = norms > cap
    if np.any(over):
        offsets = offsets.copy()
        offsets[over] *= (cap / norms[over])[:, None]
        template.warnings.append(
            f"clamped {int(over.sum())} vertex offsets exceeding the "
            f"{cap:.6g} cap (max was {norms.max():.6g})")
    base = template.base.template
    return TriMesh(base.vertices + offsets, base.faces, name=base.name)


def _rot4(rotations: np.ndarray) -> np.ndarray:
    nj = len(rotations)
    out = np.tile(np.eye(4), (nj, 1, 1))
    out[:, :3, :3] = rotations
    return out


def joint_world_transforms(body: SkinnedBody, rotations: np.ndarray) -> np.ndarray:
    """World transform per joint for the given per-joint local rotations."""
    rotations = np.asarray(rotations, dtype=np.float64)
    nj = body.n_joints
    if rotations.shape != (nj, 3, 3):
        raise ValueError(f"expected {nj} joint rotations, got {rotations.shape}")
    rot = _rot4(rotations)
    world = np.empty((nj, 4, 4))
    for j in range(nj):
        p = body.parents[j]
        local = body.rest[j] if p < 0 else np.linalg.inv(body.rest[p]) @ body.rest[j]
        own = local @ rot[j]
        world[j] = own if p < 0 else world[p] @ own
    return world


def pose(body: SkinnedBody | EvolvableTemplate, rotations: np.ndarray) -> TriMesh:
    """Linear blend skinning of the (possibly offset) template."""
    if isinstance(body, EvolvableTemplate):
        mesh = apply_offsets(body)
        skin = body.base
    else:
        mesh = body.template
        skin = body
    rotations = np.asarray(rotations, dtype=np.float64)
    if np.array_equal(rotations, np.tile(np.eye(3), (skin.n_joints, 1, 1))):
        return TriMesh(mesh.vertices.copy(), mesh.faces, name=mesh.name)

    world = joint_world_transforms(skin, rotations)
    deltas = world @ np.linalg.inv(skin.rest)     # (nj, 4, 4)
    vh = np.concatenate([mesh.vertices, np.ones((len(mesh.vertices), 1))], axis=1)
    per_joint = np.einsum("jab,vb->jva", deltas, vh)[:, :, :3]
    skinned = np.einsum("vj,jva->va", skin.weights, per_joint)
    return TriMesh(skinned, mesh.faces, name=mesh.name)


# -- rig file I/O ----------------------------------------------------------

def save_body(body: SkinnedBody, mesh_path, rig_path) -> None:
    save_obj(mesh_path, body.template)
    rig = {
        "version": 1,
        "joints": [
            {"name": body.joint_names[j],
             "parent": int(body.parents[j]),
             "rest": [float(x) for x in body.rest[j].reshape(-1)]}
            for j in range(body.n_joints)
        ],
        "weights": [
            [[int(j), float(w)] for j, w in zip(row.nonzero()[0], row[row.nonzero()[0]])]
            for row in body.weights
        ],
        "masks": {name: [int(i) for i in sorted(idx)] for name, idx in body.masks.items()},
    }
    with open(rig_path, "w", encoding="utf-8") as f:
        json.dump(rig, f)


def load_body(mesh_path, rig_path) -> SkinnedBody:
    template = load_obj(mesh_path)
    with open(rig_path, "r", encoding="utf-8") as f:
        rig = json.load(f)
    if not isinstance(rig, dict) or rig.get("version") != 1:
        raise ValueError("rig file: expected a version-1 rig object")

    joints = rig.get("joints")
    if not isinstance(joints, list) or not joints:
        raise ValueError("rig file: 'joints' must be a non-empty list")
    names = []
    parents = np.empty(len(joints), dtype=np.int64)
    rest = np.empty((len(joints), 4, 4))
    for j, entry in enumerate(joints):
        names.append(str(entry["name"]))
        parents[j] = int(entry["parent"])
        mat = np.asarray(entry["rest"], dtype=np.float64)
        if mat.shape != (16,):
            raise ValueError(f"rig file: joint {j} rest transform needs 16 numbers")
        rest[j] = mat.reshape(4, 4)

    nv = len(template.vertices)
    nj = len(joints)
    rows = rig.get("weights")
    if not isinstance(rows, list) or len(rows) != nv:
        raise ValueError(
            f"rig file: 'weights' must list one row per mesh vertex "
            f"({nv} vertices, got {len(rows) if isinstance(rows, list) else 'none'})")
    weights = np.zeros((nv, nj))
    for v, row in enumerate(rows):
        for pair in row:
            j, w = int(pair[0]), float(pair[1])
            if not 0 <= j < nj:
                raise ValueError(f"rig file: weight row {v} references joint {j}")
            weights[v, j] += w
    sums = weights.sum(axis=1)
    # inclusive tolerance with representation slack: a stored "0.999999"
    # must round-trip as acceptable
    bad = np.abs(sums - 1.0) > WEIGHT_SUM_TOL * (1.0 + 1e-9)
    if np.any(bad):
        v = int(np.flatnonzero(bad)[0])
        raise ValueError(f"rig file: weight row {v} sums to {sums[v]!r}, "
                         f"outside the {WEIGHT_SUM_TOL} tolerance")
    renorm = np.abs(sums - 1.0) > EXACT_SUM_TOL
    weights[renorm] /= sums[renorm, None]

    masks = {}
    for name, idx in rig.get("masks", {}).items():
        arr = np.asarray(sorted(int(i) for i in idx), dtype=np.int64)
        if len(arr) and (arr.min() < 0 or arr.max() >= nv):
            raise ValueError(f"rig file: mask {name!r} references out-of-range vertices")
        masks[name] = arr

    body = SkinnedBody(template, names, parents, rest, weights, masks)
    body.validate()
    return body


# -- procedural humanoid ---------------------------------------------------

# joint tree: name, parent, rest position (y-up, facing +z, ~1.7 m tall)
_JOINTS = [
    ("pelvis", -1, (0.0, 0.95, 0.0)),
    ("spine_lower", 0, (0.0, 1.08, 0.0)),
    ("spine_upper", 1, (0.0, 1.22, 0.0)),
    ("chest", 2, (0.0, 1.34, 0.0)),
    ("neck", 3, (0.0, 1.47, 0.0)),
    ("head", 4, (0.0, 1.56, 0.0)),
    ("shoulder_left", 3, (0.19, 1.42, 0.0)),
    ("elbow_left", 6, (0.46, 1.42, 0.0)),
    ("wrist_left", 7, (0.68, 1.42, 0.0)),
    ("shoulder_right", 3, (-0.19, 1.42, 0.0)),
    ("elbow_right", 9, (-0.46, 1.42, 0.0)),
    ("wrist_right", 10, (-0.68, 1.42, 0.0)),
    ("hip_left", 0, (0.10, 0.92, 0.0)),
    ("knee_left", 12, (0.11, 0.52, 0.0)),
    ("ankle_left", 13, (0.11, 0.12, 0.0)),
    ("foot_left", 14, (0.11, 0.05, 0.10)),
    ("hip_right", 0, (-0.10, 0.92, 0.0)),
    ("knee_right", 16, (-0.11, 0.52, 0.0)),
    ("ankle_right", 17, (-0.11, 0.12, 0.0)),
    ("foot_right", 18, (-0.11, 0.05, 0.10)),
]

# capsules: (joint that drives the segment, start, end, radius)
_CAPSULES = [
    ("pelvis", (0.0, 0.88, 0.0), (0.0, 1.08, 0.0), 0.130),
    ("spine_lower", (0.0, 1.08, 0.0), (0.0, 1.22, 0.0), 0.120),
    ("spine_upper", (0.0, 1.22, 0.0), (0.0, 1.34, 0.0), 0.116),
    ("chest", (0.0, 1.34, 0.0), (0.0, 1.385, 0.0), 0.105),
    ("neck", (0.0, 1.44, 0.0), (0.0, 1.545, 0.0), 0.052),
    ("head", (0.0, 1.615, 0.0), (0.0, 1.66, 0.0), 0.094),
    ("chest", (0.0, 1.39, 0.0), (0.17, 1.42, 0.0), 0.055),
    ("chest", (0.0, 1.39, 0.0), (-0.17, 1.42, 0.0), 0.055),
    ("shoulder_left", (0.19, 1.42, 0.0), (0.46, 1.42, 0.0), 0.048),
    ("elbow_left", (0.46, 1.42, 0.0), (0.68, 1.42, 0.0), 0.043),
    ("wrist_left", (0.68, 1.42, 0.0), (0.78, 1.42, 0.0), 0.040),
    ("shoulder_right", (-0.19, 1.42, 0.0), (-0.46, 1.42, 0.0), 0.048),
    ("elbow_right", (-0.46, 1.42, 0.0), (-0.68, 1.42, 0.0), 0.043),
    ("wrist_right", (-0.68, 1.42, 0.0), (-0.78, 1.42, 0.0), 0.040),
    ("hip_left", (0.10, 0.92, 0.0), (0.11, 0.52, 0.0), 0.070),
    ("knee_left", (0.11, 0.52, 0.0), (0.11, 0.12, 0.0), 0.056),
    ("ankle_left", (0.11, 0.12, 0.0), (0.11, 0.05, 0.10), 0.048),
    ("foot_left", (0.11, 0.05, 0.10), (0.11, 0.045, 0.16), 0.044),
    ("hip_right", (-0.10, 0.92, 0.0), (-0.11, 0.52, 0.0), 0.070),
    ("knee_right", (-0.11, 0.52, 0.0), (-0.11, 0.12, 0.0), 0.056),
    ("ankle_right", (-0.11, 0.12, 0.0), (-0.11, 0.05, 0.10), 0.048),
    ("foot_right", (-0.11, 0.05, 0.10), (-0.11, 0.045, 0.16), 0.044),
]

# cubic cells: equal spans on all axes keep the lattice isotropic
_BODY_BOUNDS = ((-0.93, -0.055, -0.905), (0.93, 1.805, 0.955))
_BODY_RESOLUTION = 40
_SMOOTH_K = 48.0


def _capsule_distances(points: np.ndarray) -> np.ndarray:
    """(n_points, n_capsules) distance to each capsule surface."""
    out = np.empty((len(points), len(_CAPSULES)))
    for k, (_, a, b, r) in enumerate(_CAPSULES):
        a = np.asarray(a)
        ab = np.asarray(b) - a
        tt = np.clip((points - a) @ ab / (ab @ ab), 0.0, 1.0)
        out[:, k] = np.linalg.norm(points - a - tt[:, None] * ab, axis=1) - r
    return out


def body_sdf(points: np.ndarray) -> np.ndarray:
    """Smooth-union signed distance of the capsule humanoid."""
    d = _capsule_distances(np.atleast_2d(points))
    m = d.min(axis=1, keepdims=True)
    return (m - np.log(np.exp(-_SMOOTH_K * (d - m)).sum(axis=1, keepdims=True))
            / _SMOOTH_K).ravel()


def _build_masks(verts: np.ndarray, owner: np.ndarray) -> dict[str, np.ndarray]:
    names = [c[0] for c in _CAPSULES]
    own = lambda *caps: np.isin(owner, [i for i, n in enumerate(names) if n in caps])

    neck = own("neck")
    torso = own("spine_lower", "spine_upper", "chest") | neck
    # upper-arm vertices near the shoulder stay with the torso piece
    arm_l = own("shoulder_left") & (verts[:, 0] <= 0.27)
    arm_r = own("shoulder_right") & (verts[:, 0] >= -0.27)
    torso_upper = (torso | arm_l | arm_r) & (verts[:, 1] >= 1.09)

    masks = {
        "torso_upper": np.flatnonzero(torso_upper),
        "neck": np.flatnonzero(neck),
        "head": np.flatnonzero(own("head")),
        "legs": np.flatnonzero(own("pelvis", "hip_left", "knee_left",
                                   "hip_right", "knee_right")),
        "feet_left": np.flatnonzero(own("ankle_left", "foot_left")),
        "feet_right": np.flatnonzero(own("ankle_right", "foot_right")),
        "wrist_left": np.flatnonzero(own("wrist_left")),
        "wrist_right": np.flatnonzero(own("wrist_right")),
    }
    return {k: v.astype(np.int64) for k, v in masks.items()}


def procedural_test_body() -> SkinnedBody:
    """Deterministic capsule humanoid with skeleton, weights and masks."""
    grid = build_grid(_BODY_RESOLUTION, _BODY_BOUNDS)
    template, _ = marching_tets(grid, body_sdf(grid.vertices), name="body")

    names = [j[0] for j in _JOINTS]
    parents = np.array([j[1] for j in _JOINTS], dtype=np.int64)
    rest = np.tile(np.eye(4), (len(_JOINTS), 1, 1))
    for j, (_, _, p) in enumerate(_JOINTS):
        rest[j, :3, 3] = p

    cap_dist = _capsule_distances(template.vertices)
    owner = np.argmin(cap_dist, axis=1)

    joint_of_capsule = np.array([names.index(c[0]) for c in _CAPSULES])
    # per-joint proximity: closest of the joint's capsules
    nj = len(names)
    joint_dist = np.full((len(template.vertices), nj), np.inf)
    for k in range(len(_CAPSULES)):
        j = joint_of_capsule[k]
        joint_dist[:, j] = np.minimum(joint_dist[:, j], cap_dist[:, k])
    # smooth falloff, 3 nearest joints
    sigma = 0.05
    order = np.argsort(joint_dist, axis=1)[:, :3]
    near = np.take_along_axis(joint_dist, order, axis=1)
    w = np.exp(-np.maximum(near - near[:, :1], 0.0) ** 2 / (2 * sigma**2))
    w /= w.sum(axis=1, keepdims=True)
    weights = np.zeros((len(template.vertices), nj))
    np.put_along_axis(weights, order, w, axis=1)

    body = SkinnedBody(template, names, parents, rest, weights,
                       _build_masks(template.vertices, owner))
    body.validate()
    return body
