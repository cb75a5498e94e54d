import copy
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from depthpose.skeleton import (N_DOFS, N_POINTS, SkeletonConfigError, SkeletonModel, apply_dof_subset,
                                forward_kinematics, jacobian, world_rotations, zero_pose)

from conftest import random_poses


def _elem(axis, a):
    c, s = math.cos(a), math.sin(a)
    if axis == "x":
        return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])
    if axis == "y":
        return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


def homogeneous_fk(cfg, q):
    """Oracle: chain 4x4 transforms straight from the raw config."""
    recs = cfg["joints"] + cfg["end_sites"]
    names = [r["name"] for r in recs]
    world = {}
    out = np.zeros((len(recs), 3))
    for k, rec in enumerate(recs):
        local = np.eye(4)
        local[:3, 3] = rec["offset"]
        if rec["parent"] is None:
            local[:3, 3] = q[:3]
        for d, m in enumerate(cfg["dof_map"]):
            if m["joint"] == rec["name"] and m["kind"] == "rotation":
                R = np.eye(4)
                R[:3, :3] = _elem(m["axis"], q[d])
                local = local @ R
        T = local if rec["parent"] is None else world[rec["parent"]] @ local
        world[rec["name"]] = T
        out[names.index(rec["name"])] = T[:3, 3]
    return out


def test_zero_pose_chain_offsets(skeleton):
    P = forward_kinematics(skeleton, zero_pose())
    for k in range(N_POINTS):
        acc, p = np.zeros(3), k
        while p >= 0:
            acc += skeleton.offsets[p] if skeleton.parents[p] >= 0 else 0
            p = skeleton.parents[p]
        assert np.allclose(P[k], acc, atol=1e-12)


def test_two_link_chain():
    cfg = copy.deepcopy(SkeletonModel.default().config)
    for j in cfg["joints"]:
        if j["name"] == "lowerback":
            j["offset"] = [0, 1, 0]
        if j["name"] == "upperback":
            j["offset"] = [0, 1, 0]
    sk = SkeletonModel.from_config(cfg)
    P = forward_kinematics(sk, zero_pose())
    assert np.allclose(P[sk.index("upperback")], [0, 2, 0])


def test_root_translation_equivariance(skeleton):
    q = zero_pose()
    q[:3] = (0.3, -1.2, 4.0)
    assert np.allclose(forward_kinematics(skeleton, q), forward_kinematics(skeleton, zero_pose()) + q[:3],
                       atol=1e-12)


def test_fk_matches_homogeneous_oracle(skeleton):
    for q in random_poses(skeleton, 20, seed=1):
        assert np.abs(forward_kinematics(skeleton, q) - homogeneous_fk(skeleton.config, q)).max() < 1e-9


def test_batch_fk_equals_single(skeleton):
    Q = random_poses(skeleton, 7, seed=2)
    B = forward_kinematics(skeleton, Q)
    for i in range(7):
        assert np.array_equal(B[i], forward_kinematics(skeleton, Q[i]))


def test_world_rotations(skeleton):
    R = world_rotations(skeleton, zero_pose())
    assert np.allclose(R, np.eye(3))
    q = zero_pose()
    q[3] = math.pi / 2  # root yaw (y axis first in the root order)
    R = world_rotations(skeleton, q)
    assert np.allclose(R, _elem("y", math.pi / 2), atol=1e-12)
    for q in random_poses(skeleton, 10, seed=4):
        R = world_rotations(skeleton, q)
        assert np.abs(np.einsum("jki,jkl->jil", R, R) - np.eye(3)).max() < 1e-12
        assert np.abs(np.linalg.det(R) - 1).max() < 1e-12


def _fd_jacobian(skeleton, q, h=1e-6):
    J = np.zeros((3 * N_POINTS, N_DOFS))
    for d in range(N_DOFS):
        a, b = q.copy(), q.copy()
        a[d] += h
        b[d] -= h
        J[:, d] = (forward_kinematics(skeleton, a) - forward_kinematics(skeleton, b)).ravel() / (2 * h)
    return J


def test_jacobian_finite_difference(skeleton):
    for q in random_poses(skeleton, 10, seed=5):
        J = jacobian(skeleton, q)
        F = _fd_jacobian(skeleton, q)
        assert np.abs(J - F).max() / np.abs(F).max() < 1e-5


def test_jacobian_translation_columns_identity(skeleton):
    J = jacobian(skeleton, random_poses(skeleton, 1, seed=6)[0])
    assert np.allclose(J[:, :3], np.tile(np.eye(3), (N_POINTS, 1)))


def test_jacobian_subtree_sparsity(skeleton):
    J = jacobian(skeleton, random_poses(skeleton, 1, seed=7)[0]).reshape(N_POINTS, 3, N_DOFS)
    lradius = skeleton.dofs_of("lradius")
    assert lradius
    below = {skeleton.index("lhand_site")}
    for k in range(N_POINTS):
        if k not in below:
            assert np.all(J[k][:, lradius] == 0), skeleton.names[k]


def test_jacobian_dof_subset(skeleton):
    q = random_poses(skeleton, 1, seed=8)[0]
    sub = [0, 5, 20, 37]
    assert np.array_equal(jacobian(skeleton, q, sub), jacobian(skeleton, q)[:, sub])


def test_apply_dof_subset():
    base = np.arange(38.0)
    assert np.array_equal(apply_dof_subset(base, [], []), base)
    assert np.array_equal(apply_dof_subset(base, -base, list(range(38))), np.zeros(38))
    out = apply_dof_subset(base, np.ones(6), range(6))
    assert np.count_nonzero(out != base) == 6
    with pytest.raises(IndexError):
        apply_dof_subset(base, [1.0], [38])
    with pytest.raises(ValueError):
        apply_dof_subset(base, [1.0, 2.0], [3])


def test_bone_lengths_preserved(skeleton):
    P = forward_kinematics(skeleton, random_poses(skeleton, 50, seed=9))
    seg = np.linalg.norm(P[:, 1:] - P[:, skeleton.parents[1:]], axis=2)
    assert np.abs(seg - skeleton.bone_lengths[1:]).max() < 1e-12


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-3.0, 3.0), min_size=38, max_size=38))
def test_bone_lengths_any_angles(q):
    sk = SkeletonModel.default()
    P = forward_kinematics(sk, np.array(q))
    seg = np.linalg.norm(P[1:] - P[sk.parents[1:]], axis=1)
    assert np.abs(seg - sk.bone_lengths[1:]).max() < 1e-9


def test_config_roundtrip_and_hash(skeleton, tmp_path):
    skeleton.save(tmp_path / "s.json")
    again = SkeletonModel.load(tmp_path / "s.json")
    assert again.config_hash == skeleton.config_hash
    assert np.array_equal(again.offsets, skeleton.offsets)


@pytest.mark.parametrize("mutate", [
    lambda c: c.update(schema_version=99),
    lambda c: c["joints"].pop(),
    lambda c: c["dof_map"].pop(),
    lambda c: c["joints"][1].update(offset=[0, 0, 0]),
    lambda c: c["radii"][0].update(radius=-1),
    lambda c: c["joints"][2].update(parent="nosuch"),
    lambda c: c["joints"][2].update(rotation_order="zyx"),
    lambda c: c["limits"][0].update(min=5.0),
])
def test_invalid_configs_rejected(skeleton, mutate):
    cfg = copy.deepcopy(skeleton.config)
    mutate(cfg)
    with pytest.raises(SkeletonConfigError):
        SkeletonModel.from_config(cfg)


def test_a_pose_in_limits(skeleton):
    lo, hi = skeleton.joint_limits[3:].T
    assert np.all(skeleton.a_pose[3:] >= lo) and np.all(skeleton.a_pose[3:] <= hi)
