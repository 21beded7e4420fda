"""Body/skinning tests.

Hand oracles: a two-joint chain with a fully-bound vertex (rigid case) and
a 50/50 blend of two rigid transforms, both computed by hand.
"""

import hashlib

import numpy as np
import pytest

from dressform.body import (
    EvolvableTemplate,
    SkinnedBody,
    apply_offsets,
    body_sdf,
    load_body,
    pose,
    procedural_test_body,
    save_body,
)
from dressform.mesh import TriMesh, make_icosphere


@pytest.fixture(scope="module")
def test_body():
    return procedural_test_body()


def tet_mesh(scale=1.0):
    v = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]]) * scale
    f = np.array([[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]])
    return TriMesh(v, f)


def two_joint_body(weights_row0=(0.0, 1.0)):
    """Root at origin, child joint at (1,0,0); template is a small tet
    placed so vertex 0 sits at (2,0,0)."""
    mesh = tet_mesh(0.1)
    mesh = TriMesh(mesh.vertices + (2.0, 0.0, 0.0), mesh.faces)
    rest = np.tile(np.eye(4), (2, 1, 1))
    rest[1, :3, 3] = (1.0, 0.0, 0.0)
    weights = np.zeros((4, 2))
    weights[:] = (1.0, 0.0)
    weights[0] = weights_row0
    body = SkinnedBody(mesh, ["root", "arm"], np.array([-1, 0]), rest,
                       weights, {})
    return body


ROT_Z90 = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])


def test_identity_pose_is_exact_identity(test_body):
    eye = np.tile(np.eye(3), (test_body.n_joints, 1, 1))
    posed = pose(test_body, eye)
    assert posed.vertices.tobytes() == test_body.template.vertices.tobytes()
    assert posed.faces.tobytes() == test_body.template.faces.tobytes()


def test_fully_bound_vertex_rotates_rigidly():
    body = two_joint_body(weights_row0=(0.0, 1.0))
    rots = np.stack([np.eye(3), ROT_Z90])
    posed = pose(body, rots)
    # pivot (1,0,0), vertex (2,0,0): rotates to pivot + Rz90*(1,0,0) = (1,1,0)
    np.testing.assert_allclose(posed.vertices[0], (1.0, 1.0, 0.0), atol=1e-12)


def test_half_half_blend_of_two_transforms():
    body = two_joint_body(weights_row0=(0.5, 0.5))
    rots = np.stack([np.eye(3), ROT_Z90])
    posed = pose(body, rots)
    # blend of identity (keeps (2,0,0)) and the rigid image (1,1,0)
    np.testing.assert_allclose(posed.vertices[0], (1.5, 0.5, 0.0), atol=1e-12)


def test_pose_rejects_wrong_joint_count(test_body):
    with pytest.raises(ValueError):
        pose(test_body, np.tile(np.eye(3), (3, 1, 1)))


def test_procedural_body_shape(test_body):
    m = test_body.template
    assert m.is_watertight()
    assert m.component_count() == 1
    assert 4000 <= len(m.vertices) <= 8000
    assert test_body.n_joints == 20
    test_body.validate()


def test_procedural_body_masks(test_body):
    masks = test_body.masks
    expected = {"torso_upper", "neck", "head", "legs", "feet_left",
                "feet_right", "wrist_left", "wrist_right"}
    assert expected <= set(masks)
    for name in expected:
        assert len(masks[name]) > 0, name
    # pairwise disjoint except the declared neck-in-torso overlap
    assert np.all(np.isin(masks["neck"], masks["torso_upper"]))
    names = sorted(expected)
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            if {a, b} == {"neck", "torso_upper"}:
                continue
            assert len(np.intersect1d(masks[a], masks[b])) == 0, (a, b)


def test_procedural_body_hash_stable(test_body):
    other = procedural_test_body()

    def digest(b):
        h = hashlib.sha256()
        h.update(b.template.vertices.tobytes())
        h.update(b.template.faces.tobytes())
        h.update(b.weights.tobytes())
        h.update(b.rest.tobytes())
        for name in sorted(b.masks):
            h.update(name.encode())
            h.update(b.masks[name].tobytes())
        return h.hexdigest()

    assert digest(test_body) == digest(other)


def test_body_sdf_sign_matches_template(test_body):
    # template came out of the zero level set: interior joints negative,
    # far-field positive
    inside = np.array([[0.0, 1.0, 0.0], [0.0, 1.62, 0.0], [0.11, 0.3, 0.0]])
    outside = np.array([[0.0, 1.0, 0.5], [0.6, 0.3, 0.0], [0.0, 1.9, 0.0]])
    assert np.all(body_sdf(inside) < 0)
    assert np.all(body_sdf(outside) > 0)


def test_save_load_round_trip(tmp_path, test_body):
    mesh_path = tmp_path / "body.obj"
    rig_path = tmp_path / "body.rig.json"
    save_body(test_body, mesh_path, rig_path)
    loaded = load_body(mesh_path, rig_path)
    assert loaded.template.vertices.tobytes() == test_body.template.vertices.tobytes()
    assert loaded.template.faces.tobytes() == test_body.template.faces.tobytes()
    assert loaded.weights.tobytes() == test_body.weights.tobytes()
    assert loaded.rest.tobytes() == test_body.rest.tobytes()
    assert loaded.parents.tolist() == test_body.parents.tolist()
    assert loaded.joint_names == test_body.joint_names
    assert set(loaded.masks) == set(test_body.masks)
    for name in loaded.masks:
        np.testing.assert_array_equal(np.sort(loaded.masks[name]),
                                      np.sort(test_body.masks[name]))


def rig_dict(body):
    return {
        "version": 1,
        "joints": [{"name": body.joint_names[j], "parent": int(body.parents[j]),
                    "rest": body.rest[j].reshape(-1).tolist()}
                   for j in range(body.n_joints)],
        "weights": [[[int(j), float(w)] for j, w in zip(row.nonzero()[0],
                                                        row[row.nonzero()[0]])]
                    for row in body.weights],
        "masks": {},
    }


def test_weight_row_renormalized_within_tolerance(tmp_path):
    import json

    body = two_joint_body()
    save_body(body, tmp_path / "m.obj", tmp_path / "r.json")
    rig = rig_dict(body)
    rig["weights"][0] = [[1, 0.999999]]
    (tmp_path / "r.json").write_text(json.dumps(rig))
    loaded = load_body(tmp_path / "m.obj", tmp_path / "r.json")
    assert loaded.weights[0].sum() == pytest.approx(1.0, abs=1e-12)


def test_weight_row_far_from_one_rejected(tmp_path):
    import json

    body = two_joint_body()
    save_body(body, tmp_path / "m.obj", tmp_path / "r.json")
    rig = rig_dict(body)
    rig["weights"][2] = [[0, 0.9]]
    (tmp_path / "r.json").write_text(json.dumps(rig))
    with pytest.raises(ValueError, match="row 2"):
        load_body(tmp_path / "m.obj", tmp_path / "r.json")


def test_rig_with_missing_vertex_row_rejected(tmp_path):
    import json

    body = two_joint_body()
    save_body(body, tmp_path / "m.obj", tmp_path / "r.json")
    rig = rig_dict(body)
    rig["weights"] = rig["weights"][:-1]
    (tmp_path / "r.json").write_text(json.dumps(rig))
    with pytest.raises(ValueError, match="weights"):
        load_body(tmp_path / "m.obj", tmp_path / "r.json")


def test_rig_weight_referencing_bad_joint(tmp_path):
    import json

    body = two_joint_body()
    save_body(body, tmp_path / "m.obj", tmp_path / "r.json")
    rig = rig_dict(body)
    rig["weights"][1] = [[7, 1.0]]
    (tmp_path / "r.json").write_text(json.dumps(rig))
    with pytest.raises(ValueError, match="row 1"):
        load_body(tmp_path / "m.obj", tmp_path / "r.json")


def sphere_body():
    mesh = make_icosphere(3, radius=1.0)
    rest = np.eye(4)[None]
    weights = np.ones((len(mesh.vertices), 1))
    return SkinnedBody(mesh, ["root"], np.array([-1]), rest, weights, {})


def test_apply_offsets_zero_and_uniform():
    body = sphere_body()
    t = EvolvableTemplate(body, np.zeros_like(body.template.vertices))
    out = apply_offsets(t)
    assert out.vertices.tobytes() == body.template.vertices.tobytes()
    assert not t.warnings

    d = np.array([0.01, -0.02, 0.005])
    t = EvolvableTemplate(body, np.tile(d, (len(body.template.vertices), 1)))
    out = apply_offsets(t)
    np.testing.assert_allclose(out.vertices, body.template.vertices + d, atol=1e-15)
    assert out.faces.tobytes() == body.template.faces.tobytes()


def test_apply_offsets_along_normals_grows_radius():
    body = sphere_body()
    eps = 0.03
    normals = body.template.vertex_normals()
    t = EvolvableTemplate(body, eps * normals)
    out = apply_offsets(t)
    radii = np.linalg.norm(out.vertices, axis=1)
    np.testing.assert_allclose(radii, 1.0 + eps, rtol=0.01)
    assert not t.warnings


def test_apply_offsets_clamps_and_warns():
    body = sphere_body()
    cap = EvolvableTemplate(body, np.zeros((len(body.template.vertices), 3))).offset_cap
    offsets = np.zeros((len(body.template.vertices), 3))
    offsets[0] = (3.0 * cap, 0.0, 0.0)
    t = EvolvableTemplate(body, offsets)
    out = apply_offsets(t)
    assert len(t.warnings) == 1
    assert np.linalg.norm(out.vertices[0] - body.template.vertices[0]) == pytest.approx(cap, rel=1e-12)


def test_pose_preserves_topology_and_moves_limbs(test_body):
    rots = np.tile(np.eye(3), (test_body.n_joints, 1, 1))
    j = test_body.joint_names.index("shoulder_left")
    rots[j] = ROT_Z90
    posed = pose(test_body, rots)
    assert posed.faces.tobytes() == test_body.template.faces.tobytes()
    assert np.all(np.isfinite(posed.vertices))
    moved = np.linalg.norm(posed.vertices - test_body.template.vertices, axis=1)
    wl = test_body.masks["wrist_left"]
    wr = test_body.masks["wrist_right"]
    assert moved[wl].min() > 0.2      # left arm swung
    assert moved[wr].max() < 1e-9     # right arm untouched
