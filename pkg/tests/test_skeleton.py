import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import chain_skeleton, random_rotations
from kitro.skeleton import (BodyState, KinematicTree, SkeletonModel, bone_length_3d,
                            bone_lengths, default_skeleton, forward_kinematics,
                            load_skeleton, rest_joints, save_skeleton)


class TestKinematicTree:
    def test_canonical_structure(self, model):
        tree = model.tree
        assert tree.num_joints == 24
        assert tree.num_bones == 23
        assert tree.parent_of(0) is None
        assert tree.children_of(0) == [1, 2, 3]
        assert tree.children_of(9) == [12, 13, 14]
        for j in range(1, 24):
            assert tree.parent_of(j) is not None

    def test_chain_of(self, model):
        tree = model.tree
        assert tree.chain_of(0) == [0]
        assert tree.chain_of(10) == [0, 1, 4, 7, 10]
        assert tree.chain_of(23) == [0, 3, 6, 9, 14, 17, 19, 21, 23]
        for j in range(24):
            chain = tree.chain_of(j)
            assert chain[0] == 0 and chain[-1] == j

    def test_bone_list_ordered_by_child(self, model):
        assert [c for _, c in model.tree.bone_list] == list(range(1, 24))

    def test_rejects_second_root(self):
        with pytest.raises(ValueError):
            KinematicTree([-1, -1, 0])

    def test_rejects_nonzero_root(self):
        with pytest.raises(ValueError):
            KinematicTree([0, -1, 1])

    def test_rejects_out_of_range_parent(self):
        with pytest.raises(ValueError):
            KinematicTree([-1, 7])


class TestRestJoints:
    def test_zero_beta_gives_template(self, model):
        out = rest_joints(model, np.zeros(10))
        np.testing.assert_array_equal(out, model.template_joints)

    def test_unit_beta_reads_basis_column(self, model):
        for k in (0, 4, 9):
            e = np.zeros(10)
            e[k] = 1.0
            out = rest_joints(model, e)
            np.testing.assert_allclose(
                out, model.template_joints + model.shape_basis[:, :, k], atol=1e-15)

    def test_matches_naive_summation(self, model):
        rng = np.random.default_rng(11)
        beta = rng.standard_normal(10)
        naive = model.template_joints.copy()
        for k in range(10):
            naive = naive + beta[k] * model.shape_basis[:, :, k]
        np.testing.assert_allclose(rest_joints(model, beta), naive, atol=1e-12)

    def test_affine_in_beta(self, model):
        rng = np.random.default_rng(12)
        b1, b2 = rng.standard_normal(10), rng.standard_normal(10)
        zero = rest_joints(model, np.zeros(10))
        lhs = rest_joints(model, b1 + b2) - zero
        rhs = (rest_joints(model, b1) - zero) + (rest_joints(model, b2) - zero)
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)

    def test_wrong_beta_length_rejected(self, model):
        with pytest.raises(ValueError):
            rest_joints(model, np.zeros(9))


class TestBoneLength:
    def test_direct_norm(self):
        template = np.array([[0.0, 0.0, 0.0], [0.0, 0.0, 0.5]])
        skel = SkeletonModel(template_joints=template,
                             shape_basis=np.zeros((2, 3, 2)),
                             tree=KinematicTree([-1, 0]))
        assert bone_length_3d(skel, np.zeros(2), (0, 1)) == pytest.approx(0.5)

    def test_homogeneity_doubles_with_offset(self):
        template = np.array([[0.0, 0.0, 0.0], [0.0, 0.0, 0.5]])
        basis = np.zeros((2, 3, 1))
        basis[1, 2, 0] = 0.5  # at beta=1 the rest offset doubles
        skel = SkeletonModel(template_joints=template, shape_basis=basis,
                             tree=KinematicTree([-1, 0]))
        base = bone_length_3d(skel, np.zeros(1), (0, 1))
        assert bone_length_3d(skel, np.ones(1), (0, 1)) == pytest.approx(2 * base)

    def test_equals_posed_distance_for_any_theta(self, model):
        rng = np.random.default_rng(21)
        beta = rng.standard_normal(10)
        state = BodyState(theta=random_rotations(24, 21), beta=beta, trans=np.zeros(3))
        pos, _ = forward_kinematics(model, state)
        for p, c in model.tree.bone_list:
            posed = np.linalg.norm(pos[c] - pos[p])
            length = bone_length_3d(model, beta, (p, c))
            assert posed == pytest.approx(length, rel=1e-9)

    def test_not_a_bone_rejected(self, model):
        with pytest.raises(ValueError):
            bone_length_3d(model, np.zeros(10), (0, 7))

    def test_template_bones_strictly_positive(self, model):
        assert bone_lengths(model, np.zeros(10)).min() > 0


def _fk_reference(model, state):
    """Independent recursive FK walking the tree joint by joint."""
    rest = model.template_joints + model.shape_basis @ state.beta

    def solve(j):
        parent = model.tree.parent_of(j)
        if parent is None:
            return rest[j], state.theta[j]
        p_pos, p_rot = solve(parent)
        return p_pos + p_rot @ (rest[j] - rest[parent]), p_rot @ state.theta[j]

    pos = np.stack([solve(j)[0] for j in range(model.num_joints)])
    rots = np.stack([solve(j)[1] for j in range(model.num_joints)])
    return pos, rots


class TestForwardKinematics:
    def test_identity_pose_gives_rest(self, model):
        beta = np.full(10, 0.3)
        state = BodyState(theta=np.tile(np.eye(3), (24, 1, 1)), beta=beta,
                          trans=np.zeros(3))
        pos, rots = forward_kinematics(model, state)
        np.testing.assert_allclose(pos, rest_joints(model, beta), atol=1e-12)
        np.testing.assert_allclose(rots, np.tile(np.eye(3), (24, 1, 1)), atol=1e-15)

    def test_root_quarter_turn_rotates_chain(self):
        skel = chain_skeleton(4)
        theta = np.tile(np.eye(3), (4, 1, 1))
        theta[0] = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
        state = BodyState(theta=theta, beta=np.zeros(2), trans=np.zeros(3))
        pos, _ = forward_kinematics(skel, state)
        # rest joints lie on +x; a 90 deg turn about z sends them to +y
        np.testing.assert_allclose(pos[:, 1], skel.template_joints[:, 0], atol=1e-12)
        np.testing.assert_allclose(pos[:, 0], 0.0, atol=1e-12)

    def test_matches_recursive_reference(self, model):
        for seed in range(5):
            rng = np.random.default_rng(seed)
            state = BodyState(theta=random_rotations(24, seed),
                              beta=rng.standard_normal(10), trans=np.zeros(3))
            pos, rots = forward_kinematics(model, state)
            ref_pos, ref_rots = _fk_reference(model, state)
            np.testing.assert_allclose(pos, ref_pos, atol=1e-12)
            np.testing.assert_allclose(rots, ref_rots, atol=1e-12)

    def test_rejects_non_orthonormal_rotation(self, model):
        state = BodyState(theta=np.tile(np.eye(3), (24, 1, 1)), beta=np.zeros(10),
                          trans=np.zeros(3))
        state.theta[5] = np.eye(3) * 1.2
        with pytest.raises(ValueError):
            forward_kinematics(model, state)

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_preserves_every_bone_length(self, seed):
        model = default_skeleton()
        rng = np.random.default_rng(seed)
        beta = np.clip(rng.standard_normal(10), -3, 3)
        state = BodyState(theta=random_rotations(24, seed), beta=beta,
                          trans=np.zeros(3))
        pos, _ = forward_kinematics(model, state)
        lengths = bone_lengths(model, beta)
        for (p, c), length in zip(model.tree.bone_list, lengths):
            assert np.linalg.norm(pos[c] - pos[p]) == pytest.approx(length, rel=1e-9)

    def test_equivariant_to_global_rotation(self, model):
        rng = np.random.default_rng(33)
        state = BodyState(theta=random_rotations(24, 33),
                          beta=rng.standard_normal(10), trans=np.zeros(3))
        q = random_rotations(1, 99)[0]
        rotated = state.copy()
        rotated.theta[0] = q @ state.theta[0]
        pos, _ = forward_kinematics(model, state)
        pos_rot, _ = forward_kinematics(model, rotated)
        root = pos[0]
        np.testing.assert_allclose(pos_rot - root, (pos - root) @ q.T, atol=1e-9)

    def test_chain_concatenation(self, model):
        state = BodyState(theta=random_rotations(24, 44), beta=np.zeros(10),
                          trans=np.zeros(3))
        _, rots = forward_kinematics(model, state)
        for j in range(24):
            prod = np.eye(3)
            for i in model.tree.chain_of(j):
                prod = prod @ state.theta[i]
            np.testing.assert_allclose(rots[j], prod, atol=1e-12)


class TestBodyState:
    def test_theta_ref_frozen(self, model):
        state = BodyState(theta=random_rotations(24, 1), beta=np.zeros(10),
                          trans=np.zeros(3))
        with pytest.raises(ValueError):
            state.theta_ref[0, 0, 0] = 2.0

    def test_theta_ref_survives_copy_and_mutation(self):
        theta = random_rotations(4, 2)
        state = BodyState(theta=theta, beta=np.zeros(2), trans=np.zeros(3))
        dup = state.copy()
        dup.theta[1] = np.eye(3)
        np.testing.assert_array_equal(state.theta[1], theta[1])
        np.testing.assert_array_equal(dup.theta_ref, theta)

    def test_rejects_non_orthonormal(self):
        bad = np.tile(np.eye(3), (4, 1, 1))
        bad[2, 0, 1] = 1e-6
        with pytest.raises(ValueError):
            BodyState(theta=bad, beta=np.zeros(2), trans=np.zeros(3))

    def test_rejects_reflection(self):
        bad = np.tile(np.eye(3), (4, 1, 1))
        bad[1] = np.diag([1.0, 1.0, -1.0])
        with pytest.raises(ValueError):
            BodyState(theta=bad, beta=np.zeros(2), trans=np.zeros(3))


class TestSkeletonIO:
    def test_round_trip(self, model, tmp_path):
        path = tmp_path / "skeleton.json"
        save_skeleton(model, path)
        loaded = load_skeleton(path)
        np.testing.assert_array_equal(loaded.template_joints, model.template_joints)
        np.testing.assert_array_equal(loaded.shape_basis, model.shape_basis)
        np.testing.assert_array_equal(loaded.tree.parents, model.tree.parents)
        assert loaded.joint_names == model.joint_names

    def test_schema_fields(self, model, tmp_path):
        path = tmp_path / "skeleton.json"
        save_skeleton(model, path)
        doc = json.loads(path.read_text())
        assert set(doc) == {"template_joints", "shape_basis", "parents", "joint_names"}
        assert len(doc["shape_basis"]) == 10          # 10 stacked 24x3 arrays
        assert len(doc["shape_basis"][0]) == 24
        assert len(doc["template_joints"]) == 24
        assert len(doc["parents"]) == 24

    def test_zero_length_template_bone_rejected(self):
        template = np.zeros((2, 3))
        with pytest.raises(ValueError):
            SkeletonModel(template_joints=template, shape_basis=np.zeros((2, 3, 1)),
                          tree=KinematicTree([-1, 0]))
