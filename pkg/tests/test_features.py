import copy

import numpy as np
import pytest

from depthpose.depthcam import BACKGROUND, DepthImage, DepthStack, render_capsule_scene, render_depth
from depthpose.features import (SAMPLING_SEGMENTS, DescriptorTable, FeatureDescriptor, LazyFeatures,
                                SamplingSpec, adaptive_radius, eval_feature, feature_matrix, sample_descriptors)
from depthpose.skeleton import N_JOINTS, N_POINTS, SkeletonModel, fk_cache

from conftest import random_poses


def _fk_at(point, joint=0):
    pos = np.zeros((N_POINTS, 3))
    pos[joint] = point
    rot = np.broadcast_to(np.eye(3), (N_JOINTS, 3, 3)).copy()
    return pos, rot


def test_identical_probes_zero(skeleton, camera):
    q = random_poses(skeleton, 1, seed=0)[0]
    img = render_depth(skeleton, q, camera)
    d = FeatureDescriptor(3, 3, (0.01, 0.02, -0.03), (0.01, 0.02, -0.03))
    assert eval_feature(d, img, camera, skeleton, q) == 0.0


def test_both_probes_off_image(skeleton, camera):
    img = render_depth(skeleton, random_poses(skeleton, 1, seed=0)[0], camera)
    d = FeatureDescriptor(0, 0, (50.0, 0, 0), (0, -50.0, 0))
    assert eval_feature(d, img, camera, skeleton, None, fk=_fk_at((0, 0, 3.0))) == 0.0
    behind = FeatureDescriptor(0, 0, (0, 0, -10.0), (0, 0, -10.0))
    assert eval_feature(behind, img, camera, skeleton, None, fk=_fk_at((0, 0, 3.0))) == 0.0


def test_wall_and_capsule_scene(skeleton, camera):
    z_w, z_c, r = 3.0, 2.0, 0.15
    c = np.array([[0.0, 0.0, z_c]])
    body = render_capsule_scene(camera, c, c, np.array([r])).depth
    scene = DepthImage.from_array(np.minimum(body, np.float32(z_w)))
    d = FeatureDescriptor(0, 0, (0.0, 0.0, 0.0), (0.6, 0.0, z_w - z_c))
    value = eval_feature(d, scene, camera, skeleton, None, fk=_fk_at((0, 0, z_c)))
    assert abs(value - ((z_c - r) - z_w)) < 2e-3


def test_probe_rides_joint_frame(skeleton):
    rng = np.random.default_rng(1)
    for q in random_poses(skeleton, 10, seed=2):
        pos, rot = fk_cache(skeleton, q)
        j = int(rng.integers(N_JOINTS))
        dp = rng.uniform(-0.1, 0.1, 3)
        w = pos[j] + rot[j] @ dp
        assert abs(np.linalg.norm(w - pos[j]) - np.linalg.norm(dp)) < 1e-12


def test_feature_matrix_matches_single_evaluations(skeleton, camera, small_data):
    table = sample_descriptors(SamplingSpec(0.1, tuple(range(N_JOINTS)), 40), 3)
    Q = small_data.truths[:5]
    stack = DepthStack(small_data.images[:5])
    pos, rot, _ = skeleton._fk(Q)
    M = feature_matrix(table, stack, camera, pos, rot)
    for s in range(5):
        for k in (0, 7, 39):
            assert M[s, k] == eval_feature(table[k], small_data.images[s], camera, skeleton, Q[s])
    lazy = LazyFeatures(table, stack, camera, pos, rot)
    assert np.array_equal(lazy.take([4, 0, 2], [39, 3]), M[np.ix_([4, 0, 2], [39, 3])])
    assert lazy.n_evaluated == 2


def test_features_bounded_by_sentinel(skeleton, camera, small_data):
    table = sample_descriptors(SamplingSpec(5.0, tuple(range(N_JOINTS)), 200), 4)
    pos, rot, _ = skeleton._fk(small_data.truths)
    M = feature_matrix(table, DepthStack(small_data.images), camera, pos, rot)
    assert np.all(np.abs(M) <= BACKGROUND)


def test_sampling_contract():
    spec = SamplingSpec(0.08, (2, 5, 9), 10_000)
    t = sample_descriptors(spec, 11)
    assert np.all(np.linalg.norm(t.dp1, axis=1) <= 0.08) and np.all(np.linalg.norm(t.dp2, axis=1) <= 0.08)
    unary = np.mean(t.joint_i == t.joint_j)
    assert abs(unary - 0.5) < 0.02
    assert set(t.joint_i) <= {2, 5, 9} and set(t.joint_j) <= {2, 5, 9}
    sigma = 0.08 / np.sqrt(5 * len(t))
    assert np.all(np.abs(t.dp1.mean(axis=0)) < 3 * sigma)
    assert sample_descriptors(spec, 11) == t
    assert sample_descriptors(spec, 12) != t


def test_descriptor_rows_roundtrip():
    t = sample_descriptors(SamplingSpec(0.1, (0, 1), 50), 0)
    assert DescriptorTable.from_rows(t.to_rows()) == t
    assert list(DescriptorTable.from_descriptors(list(t))) == list(t)


def test_sampling_spec_validation():
    with pytest.raises(ValueError):
        SamplingSpec(0.0, (1,))
    with pytest.raises(ValueError):
        SamplingSpec(0.1, ())


def _product(cfg, names):
    """Mean of length x radius, straight from the raw config."""
    recs = {r["name"]: r for r in cfg["joints"] + cfg["end_sites"]}
    radius = {r["segment"]: r["radius"] for r in cfg["radii"]}
    return np.mean([np.linalg.norm(recs[n]["offset"]) * radius[n] for n in names])


def _scaled(skeleton, section, factor):
    cfg = copy.deepcopy(skeleton.config)
    for r in cfg["radii"]:
        if r["segment"] in SAMPLING_SEGMENTS[section]:
            r["radius"] *= factor
    return SkeletonModel.from_config(cfg)


def test_adaptive_radius_limb_identity(skeleton):
    assert adaptive_radius(skeleton, "limb", 0.1) == 0.1
    assert adaptive_radius(skeleton, "left_leg", 0.1) == 0.1


def test_adaptive_radius_torso_double(skeleton):
    cfg = skeleton.config
    k = 2 * _product(cfg, SAMPLING_SEGMENTS["limb"]) / _product(cfg, SAMPLING_SEGMENTS["torso"])
    assert adaptive_radius(_scaled(skeleton, "torso", k), "torso", 0.100) == pytest.approx(0.200, abs=1e-12)
    k = _product(cfg, SAMPLING_SEGMENTS["limb"]) / _product(cfg, SAMPLING_SEGMENTS["root"])
    assert adaptive_radius(_scaled(skeleton, "root", k), "root", 0.07) == pytest.approx(0.07, abs=1e-12)


def test_adaptive_radius_random_skeletons(skeleton):
    rng = np.random.default_rng(5)
    for _ in range(10):
        cfg = copy.deepcopy(skeleton.config)
        for r in cfg["radii"]:
            r["radius"] = float(rng.uniform(0.02, 0.2))
        sk = SkeletonModel.from_config(cfg)
        limb = _product(cfg, SAMPLING_SEGMENTS["limb"])
        for sec in ("root", "torso"):
            want = _product(cfg, SAMPLING_SEGMENTS[sec]) / limb * 0.1
            assert adaptive_radius(sk, sec, 0.1) == pytest.approx(want, rel=1e-12)


def test_adaptive_radius_validation(skeleton):
    with pytest.raises(ValueError):
        adaptive_radius(skeleton, "torso", 0.0)
    with pytest.raises(ValueError):
        adaptive_radius(skeleton, "nosuch", 0.1)
