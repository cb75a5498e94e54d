"""Hierarchical gradient-boosted pose cascade.

Training walks the sections root -> torso -> four limbs. Each stage fits a
forest to the per-sample regression target, learns one step size by line
search and moves every training estimate by ``beta * forest(image, pose)``.
Inference replays the same updates. Three objectives share this machinery:

``gradient``
    target is ``-J^T r`` (the negative loss gradient) on the stage's dofs.
``euler_delta``
    target is the raw angle difference ``q* - q`` on the stage's dofs.
``position``
    the state is the 63-vector of point positions, the target its residual,
    and probes hang off current positions without rotation frames.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator

from ._kernels import forest_predict
from .depthcam import CameraModel, DepthImage, DepthStack, meanshift_root_init, render_depth
from .features import DescriptorTable, LazyFeatures, SamplingSpec, adaptive_radius, sample_descriptors
from .forest import Forest, ForestTrainParams, train_forest
from .skeleton import N_DOFS, N_JOINTS, N_POINTS, SkeletonModel

logger = logging.getLogger(__name__)

MODEL_FORMAT_VERSION = 1
OBJECTIVES = ("gradient", "euler_delta", "position")
LIMBS = ("left_arm", "right_arm", "left_leg", "right_leg")
SECTION_ORDER = ("root", "torso") + LIMBS

_SECTION_DOF_JOINTS = {
    "root": ("root",),
    "torso": ("root", "upperback", "head", "lclavicle", "rclavicle", "lhumerus", "rhumerus",
              "lfemur", "rfemur"),
    "left_arm": ("lhumerus", "lradius"),
    "right_arm": ("rhumerus", "rradius"),
    "left_leg": ("lfemur", "ltibia", "lfoot"),
    "right_leg": ("rfemur", "rtibia", "rfoot"),
}
# points whose positions the section's dofs (plus earlier sections) determine
_SECTION_POINTS = {
    "root": ("root", "lowerback", "upperback", "lfemur", "rfemur"),
    "torso": ("root", "lowerback", "upperback", "head", "head_site", "lclavicle", "rclavicle",
              "lhumerus", "rhumerus", "lradius", "rradius", "lfemur", "rfemur", "ltibia", "rtibia"),
    "left_arm": ("lhumerus", "lradius", "lhand_site"),
    "right_arm": ("rhumerus", "rradius", "rhand_site"),
    "left_leg": ("lfemur", "ltibia", "lfoot", "ltoes_site"),
    "right_leg": ("rfemur", "rtibia", "rfoot", "rtoes_site"),
}


def section_dofs(skeleton: SkeletonModel, section: str) -> np.ndarray:
    return np.array(skeleton.dofs_of(*_SECTION_DOF_JOINTS[section]), dtype=np.int64)


def section_points(skeleton: SkeletonModel, section: str) -> np.ndarray:
    return np.array([skeleton.index(n) for n in _SECTION_POINTS[section]], dtype=np.int64)


def section_joints(skeleton: SkeletonModel, section: str) -> tuple:
    return tuple(int(p) for p in section_points(skeleton, section) if p < N_JOINTS)


def torso_reset_dofs(skeleton: SkeletonModel) -> np.ndarray:
    """Torso dofs outside the root, re-initialized after the root section."""
    return np.setdiff1d(section_dofs(skeleton, "torso"), section_dofs(skeleton, "root"))


# ---------------------------------------------------------------------------
# loss, targets, line search

def _positions(skeleton: SkeletonModel, Q: np.ndarray) -> np.ndarray:
    return skeleton._fk(np.ascontiguousarray(Q, dtype=float))[0]


def loss(skeleton: SkeletonModel, poses, truths, points=None) -> float:
    """Sum over samples of squared point-position error (m^2)."""
    Q = np.atleast_2d(np.asarray(poses, dtype=float))
    T = np.atleast_2d(np.asarray(truths, dtype=float))
    if Q.shape != T.shape:
        raise ValueError("poses and truths differ in shape")
    P, PT = _positions(skeleton, Q), _positions(skeleton, T)
    if points is not None:
        P, PT = P[:, points], PT[:, points]
    return float(np.sum((P - PT) ** 2))


def _gradient_targets(skeleton, Q, PT, dofs, points):
    pos, _, axes = skeleton._fk(np.ascontiguousarray(Q), want_axes=True)
    n = Q.shape[0]
    J = skeleton.jacobian_from_fk(pos, axes, dofs).reshape(n, N_POINTS, 3, len(dofs))
    r = pos - PT
    if points is not None:
        J, r = J[:, points], r[:, points]
    return -np.einsum("npcd,npc->nd", J, r)


def regression_target(skeleton: SkeletonModel, current, truth, dof_subset, points=None) -> np.ndarray:
    """``-J(current)^T (J(current) - J(truth))`` restricted to ``dof_subset``.

    ``points`` limits the residual to a subset of the 21 points.
    Accepts single poses or (n, 38) batches.
    """
    Q = np.atleast_2d(np.asarray(current, dtype=float))
    T = np.atleast_2d(np.asarray(truth, dtype=float))
    out = _gradient_targets(skeleton, Q, _positions(skeleton, T), list(dof_subset), points)
    return out[0] if np.ndim(current) == 1 else out


INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0


def golden_section(f: Callable[[float], float], a: float, b: float, tol: float = 1e-3) -> float:
    """Minimizer of a unimodal ``f`` on [a, b], bracketed to width < tol."""
    c = b - INV_PHI * (b - a)
    d = a + INV_PHI * (b - a)
    fc, fd = f(c), f(d)
    while b - a >= tol:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - INV_PHI * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + INV_PHI * (b - a)
            fd = f(d)
    return 0.5 * (a + b)


def _search_beta(step_loss: Callable[[float], float], beta_max: float, tol: float) -> float:
    beta = golden_section(step_loss, 0.0, beta_max, tol)
    return beta if step_loss(beta) < step_loss(0.0) else 0.0


def line_search(skeleton: SkeletonModel, currents, gradients, truths, dof_subset,
                beta_max: float = 4.0, tol: float = 1e-3, points=None) -> float:
    """Step size minimizing the summed squared point error along ``gradients``.

    Golden-section search over [0, beta_max]; falls back to 0 when the
    search result does not beat taking no step.
    """
    Q = np.atleast_2d(np.asarray(currents, dtype=float))
    G = np.atleast_2d(np.asarray(gradients, dtype=float))
    T = np.atleast_2d(np.asarray(truths, dtype=float))
    dof_subset = np.asarray(dof_subset, dtype=np.int64)
    if not np.any(G):
        return 0.0
    PT = _positions(skeleton, T)
    pts = slice(None) if points is None else points

    def step_loss(beta):
        Qb = Q.copy()
        Qb[:, dof_subset] += beta * G
        return float(np.sum((_positions(skeleton, Qb)[:, pts] - PT[:, pts]) ** 2))

    return _search_beta(step_loss, beta_max, tol)


# ---------------------------------------------------------------------------
# model records

@dataclass
class StageModel:
    section: str
    subset: np.ndarray           # indices into the state vector (pose or 63 positions)
    descriptors: DescriptorTable
    forest: Forest
    beta: float

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        if self.forest.n_outputs != len(self.subset):
            raise ValueError("forest output length differs from the stage subset")


@dataclass
class CascadeModel:
    skeleton_hash: str
    objective: str
    canonical_pose: np.ndarray
    initial_pose: np.ndarray
    root_offset: np.ndarray
    stage_counts: tuple
    stages: List[StageModel] = field(default_factory=list)
    bandwidth: float = 0.5
    config: dict = field(default_factory=dict)
    format_version: int = MODEL_FORMAT_VERSION

    def stage_slices(self) -> dict:
        """Section name -> list of stage indices, in execution order."""
        out = {s: [] for s in SECTION_ORDER}
        for i, st in enumerate(self.stages):
            out[st.section].append(i)
        return out

    def probe_bound(self) -> int:
        """Upper bound on pixel reads per frame: 2 per traversed internal node."""
        return int(sum(2 * st.forest.n_trees * max(t.depth for t in st.forest.trees) for st in self.stages))


# ---------------------------------------------------------------------------
# objective-specific state handling

class _State:
    """Per-objective view of the cascade state."""

    def __init__(self, skeleton: SkeletonModel, objective: str):
        if objective not in OBJECTIVES:
            raise ValueError(f"unknown objective {objective!r}; choose from {OBJECTIVES}")
        self.skeleton = skeleton
        self.objective = objective

    @property
    def is_position(self) -> bool:
        return self.objective == "position"

    def subset(self, section: str) -> np.ndarray:
        if self.is_position:
            pts = section_points(self.skeleton, section)
            return (3 * pts[:, None] + np.arange(3)).ravel()
        return section_dofs(self.skeleton, section)

    def initial(self, q0: np.ndarray) -> np.ndarray:
        if self.is_position:
            return _positions(self.skeleton, q0).reshape(q0.shape[0], -1)
        return q0.copy()

    def positions(self, S: np.ndarray) -> np.ndarray:
        if self.is_position:
            return S.reshape(S.shape[0], N_POINTS, 3)
        return _positions(self.skeleton, S)

    def frames(self, S: np.ndarray):
        if self.is_position:
            rot = np.broadcast_to(np.eye(3), (S.shape[0], N_JOINTS, 3, 3))
            return np.ascontiguousarray(S.reshape(S.shape[0], N_POINTS, 3)), np.ascontiguousarray(rot)
        pos, rot, _ = self.skeleton._fk(np.ascontiguousarray(S))
        return pos, rot

    def targets(self, S, truth_q, truth_pos, section) -> np.ndarray:
        pts = section_points(self.skeleton, section)
        if self.objective == "gradient":
            return _gradient_targets(self.skeleton, S, truth_pos, section_dofs(self.skeleton, section), pts)
        sub = self.subset(section)
        if self.objective == "euler_delta":
            return truth_q[:, sub] - S[:, sub]
        return truth_pos.reshape(S.shape[0], -1)[:, sub] - S[:, sub]

    def reset_after_root(self, S: np.ndarray, S_before: np.ndarray, canonical: np.ndarray) -> None:
        """Re-initialize torso coordinates on top of the estimated root (in place)."""
        if self.is_position:
            root_pts = section_points(self.skeleton, "root")
            P = S.reshape(S.shape[0], N_POINTS, 3)
            P0 = S_before.reshape(S.shape[0], N_POINTS, 3)
            shift = (P[:, root_pts] - P0[:, root_pts]).mean(axis=1)
            rest = np.setdiff1d(np.arange(N_POINTS), root_pts)
            P[:, rest] = P0[:, rest] + shift[:, None, :]
        else:
            dofs = torso_reset_dofs(self.skeleton)
            S[:, dofs] = canonical[dofs]

    def section_loss(self, S, truth_pos, section) -> float:
        pts = section_points(self.skeleton, section)
        return float(np.sum((self.positions(S)[:, pts] - truth_pos[:, pts]) ** 2))


def _stage_update(stage: StageModel, state: _State, S: np.ndarray, stack: DepthStack, camera: CameraModel,
                  image_of: np.ndarray):
    """Forest output for every sample plus pixel reads (no step applied)."""
    pos, rot = state.frames(S)
    roots, feat, thr, right, value = stage.forest.flat
    return forest_predict(roots, feat, thr, right, value, *stage.descriptors.arrays(),
                          pos, rot, image_of, *stack.kernel_args(), camera.intrinsics,
                          camera.width, camera.height)


def _run_stages(model: CascadeModel, state: _State, S0: np.ndarray, stack: DepthStack,
                camera: CameraModel, on_stage=None):
    """Apply every stage of ``model`` to the initial batch state ``S0``."""
    S = S0.copy()
    image_of = np.arange(S.shape[0], dtype=np.int64)
    reads = np.zeros(S.shape[0], dtype=np.int64)
    slices = model.stage_slices()

    def apply(idx, S_sec):
        st = model.stages[idx]
        g, r = _stage_update(st, state, S_sec, stack, camera, image_of)
        S_sec[:, st.subset] += st.beta * g
        reads[:] += r
        if on_stage is not None:
            on_stage(idx, st, S_sec)

    for idx in slices["root"]:
        apply(idx, S)
    state.reset_after_root(S, S0 if state.is_position else S.copy(), model.canonical_pose)
    for idx in slices["torso"]:
        apply(idx, S)
    merged = S.copy()
    for limb in LIMBS:
        S_limb = S.copy()
        for idx in slices[limb]:
            apply(idx, S_limb)
        sub = state.subset(limb)
        merged[:, sub] = S_limb[:, sub]
    return merged, reads


# ---------------------------------------------------------------------------
# initialization

def a_pose_root_offset(skeleton: SkeletonModel, camera: CameraModel, bandwidth: float = 0.5,
                       distance: float = 3.0) -> np.ndarray:
    """Root position minus the mean-shift mode for the A-pose seen head-on."""
    q = skeleton.a_pose.copy()
    q[:3] = (0.0, 0.0, distance)
    mode = meanshift_root_init(render_depth(skeleton, q, camera), camera, bandwidth)
    return q[:3] - mode


def initial_pose(image: DepthImage, camera: CameraModel, skeleton: SkeletonModel,
                 model: CascadeModel) -> np.ndarray:
    """A-pose angles with the root placed at the cloud's mean-shift mode plus offset."""
    q = np.array(model.initial_pose, dtype=float)
    q[:3] = meanshift_root_init(image, camera, model.bandwidth) + model.root_offset
    return q


# ---------------------------------------------------------------------------
# training (offline) and inference (online)

@dataclass
class CascadeConfig:
    stage_counts: tuple = (5, 10, 5)
    forest: ForestTrainParams = field(default_factory=ForestTrainParams)
    probe_offset: float = 0.1
    n_descriptors: int = 1000
    beta_max: float = 4.0
    line_search_tol: float = 1e-3
    bandwidth: float = 0.5
    objective: str = "gradient"
    seed: int = 0
    n_jobs: int = 1

    def __post_init__(self):
        if len(self.stage_counts) != 3 or any(int(h) < 0 for h in self.stage_counts):
            raise ValueError("stage_counts must be three non-negative integers")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.beta_max <= 0 or self.line_search_tol <= 0 or self.probe_offset <= 0:
            raise ValueError("beta_max, line_search_tol and probe_offset must be positive")

    def to_dict(self) -> dict:
        return {"stage_counts": list(self.stage_counts), "forest": self.forest.to_dict(),
                "probe_offset": self.probe_offset, "n_descriptors": self.n_descriptors,
                "beta_max": self.beta_max, "line_search_tol": self.line_search_tol,
                "bandwidth": self.bandwidth, "objective": self.objective, "seed": self.seed}


def _stage_seeds(seed: int, stage_index: int) -> tuple:
    desc = np.random.SeedSequence(seed, spawn_key=(stage_index, 0))
    forest = int(np.random.SeedSequence(seed, spawn_key=(stage_index, 1)).generate_state(1)[0])
    return desc, forest


@dataclass
class TrainResult:
    model: CascadeModel
    estimates: np.ndarray        # final training states
    trace: list                  # one dict per stage


def train_cascade(images: Sequence[DepthImage], truths, skeleton: SkeletonModel, camera: CameraModel,
                  config: CascadeConfig, root_offset=None) -> TrainResult:
    """Offline training over all sections; see the module docstring."""
    stack = images if isinstance(images, DepthStack) else DepthStack(images)
    T = np.asarray(truths, dtype=float)
    n = len(stack)
    if n == 0 or T.shape != (n, N_DOFS):
        raise ValueError("need one 38-dof truth pose per image")
    state = _State(skeleton, config.objective)
    offset = a_pose_root_offset(skeleton, camera, config.bandwidth) if root_offset is None \
        else np.asarray(root_offset, dtype=float)
    model = CascadeModel(skeleton.config_hash, config.objective, skeleton.a_pose.copy(),
                         skeleton.a_pose.copy(), offset, tuple(int(h) for h in config.stage_counts),
                         bandwidth=config.bandwidth, config={**config.to_dict(), "camera": camera.to_dict()})
    Q0 = np.array([initial_pose(stack[i], camera, skeleton, model) for i in range(n)])
    PT = _positions(skeleton, T)
    image_of = np.arange(n, dtype=np.int64)
    trace = []
    H_r, H_t, H_l = model.stage_counts

    def fit_stage(S, section, h):
        idx = len(model.stages)
        sub = state.subset(section)
        if sub.size == 0:
            raise ValueError(f"section {section!r} has an empty subset")
        pts = section_points(skeleton, section)
        before = state.section_loss(S, PT, section)
        targets = state.targets(S, T, PT, section)
        desc_seed, forest_seed = _stage_seeds(config.seed, idx)
        key = "limb" if section in LIMBS else section
        spec = SamplingSpec(adaptive_radius(skeleton, key, config.probe_offset),
                            section_joints(skeleton, section), config.n_descriptors)
        table = sample_descriptors(spec, desc_seed)
        pos, rot = state.frames(S)
        lazy = LazyFeatures(table, stack, camera, pos, rot)
        params = ForestTrainParams(**{**config.forest.to_dict(), "seed": forest_seed})
        forest = train_forest(lazy, targets, params, n_jobs=config.n_jobs)
        stage = StageModel(section, sub, table, forest, 0.0)
        G, _ = _stage_update(stage, state, S, stack, camera, image_of)

        def step_loss(beta):
            Sb = S.copy()
            Sb[:, sub] += beta * G
            return float(np.sum((state.positions(Sb)[:, pts] - PT[:, pts]) ** 2))

        beta = _search_beta(step_loss, config.beta_max, config.line_search_tol) if np.any(G) else 0.0
        stage.beta = beta
        S[:, sub] += beta * G
        model.stages.append(stage)
        after = state.section_loss(S, PT, section)
        trace.append({"stage": idx, "section": section, "step": h, "beta": beta,
                      "loss_before": before, "loss_after": after,
                      "features_evaluated": lazy.n_evaluated})
        logger.info("stage %d %s[%d] beta=%.4f loss %.5f -> %.5f", idx, section, h, beta, before, after)

    S = state.initial(Q0)
    for h in range(H_r):
        fit_stage(S, "root", h)
    S_root = state.initial(Q0) if state.is_position else S.copy()
    state.reset_after_root(S, S_root, model.canonical_pose)
    for h in range(H_t):
        fit_stage(S, "torso", h)
    merged = S.copy()
    for limb in LIMBS:
        S_limb = S.copy()
        for h in range(H_l):
            fit_stage(S_limb, limb, h)
        sub = state.subset(limb)
        merged[:, sub] = S_limb[:, sub]
    return TrainResult(model, merged, trace)


def infer_batch(model: CascadeModel, images: Sequence[DepthImage], camera: CameraModel,
                skeleton: SkeletonModel, on_stage=None):
    """Final states for many frames plus pixel reads per frame."""
    if skeleton.config_hash != model.skeleton_hash:
        raise ValueError("skeleton does not match the one the model was trained with")
    stack = images if isinstance(images, DepthStack) else DepthStack(images)
    state = _State(skeleton, model.objective)
    Q0 = np.array([initial_pose(stack[i], camera, skeleton, model) for i in range(len(stack))])
    return _run_stages(model, state, state.initial(Q0), stack, camera, on_stage)


def infer(model: CascadeModel, image: DepthImage, camera: CameraModel, skeleton: SkeletonModel) -> np.ndarray:
    """Single-frame online estimate (38-vector; 63 positions for the position objective)."""
    S, _ = infer_batch(model, [image], camera, skeleton)
    return S[0]


# ---------------------------------------------------------------------------
# estimator API

def _check_images(X) -> DepthStack:
    if isinstance(X, DepthStack):
        return X
    if isinstance(X, DepthImage):
        raise TypeError("expected a sequence of DepthImage, got a single image")
    X = list(X)
    if not X or not all(isinstance(im, DepthImage) for im in X):
        raise TypeError("X must be a non-empty sequence of DepthImage")
    return DepthStack(X)


def check_poses(y, n_samples: Optional[int] = None) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    if y.ndim != 2 or y.shape[1] != N_DOFS:
        raise ValueError(f"poses must have shape (n, {N_DOFS}), got {y.shape}")
    if not np.all(np.isfinite(y)):
        raise ValueError("poses contain non-finite values")
    if n_samples is not None and y.shape[0] != n_samples:
        raise ValueError(f"got {y.shape[0]} poses for {n_samples} images")
    return y


class CascadedPoseRegressor(BaseEstimator):
    """Depth image -> 38-dof pose regressor trained as a boosted forest cascade.

    ``fit(X, y)`` takes a sequence of :class:`DepthImage` (or a
    :class:`DepthStack`) and an (n, 38) array of ground-truth poses.
    ``predict`` returns (n, 38) poses, or (n, 63) flattened positions for
    ``objective="position"``; ``predict_positions`` always returns (n, 21, 3).
    """

    def __init__(self, skeleton=None, camera=None, stage_counts=(5, 10, 5), n_trees=16, max_depth=15,
                 n_candidates=200, n_thresholds=10, min_samples_leaf=5, bagging_fraction=0.8,
                 n_descriptors=1000, probe_offset=0.1, beta_max=4.0, line_search_tol=1e-3,
                 bandwidth=0.5, objective="gradient", random_state=0, n_jobs=1):
        self.skeleton = skeleton
        self.camera = camera
        self.stage_counts = stage_counts
        self.n_trees = n_trees
        self.max_depth = max_depth
        self.n_candidates = n_candidates
        self.n_thresholds = n_thresholds
        self.min_samples_leaf = min_samples_leaf
        self.bagging_fraction = bagging_fraction
        self.n_descriptors = n_descriptors
        self.probe_offset = probe_offset
        self.beta_max = beta_max
        self.line_search_tol = line_search_tol
        self.bandwidth = bandwidth
        self.objective = objective
        self.random_state = random_state
        self.n_jobs = n_jobs

    def _skeleton(self) -> SkeletonModel:
        return self.skeleton if self.skeleton is not None else SkeletonModel.default()

    def _camera(self) -> CameraModel:
        return self.camera if self.camera is not None else CameraModel()

    def _config(self) -> CascadeConfig:
        forest = ForestTrainParams(self.n_trees, self.max_depth, self.n_candidates, self.n_thresholds,
                                   self.min_samples_leaf, self.bagging_fraction, 0)
        return CascadeConfig(tuple(self.stage_counts), forest, self.probe_offset, self.n_descriptors,
                             self.beta_max, self.line_search_tol, self.bandwidth, self.objective,
                             int(self.random_state), self.n_jobs)

    def fit(self, X, y):
        stack = _check_images(X)
        y = check_poses(y, len(stack))
        self.skeleton_ = self._skeleton()
        self.camera_ = self._camera()
        result = train_cascade(stack, y, self.skeleton_, self.camera_, self._config())
        self.model_ = result.model
        self.train_estimates_ = result.estimates
        self.train_trace_ = result.trace
        return self

    @classmethod
    def from_model(cls, model: CascadeModel, skeleton=None, camera=None) -> "CascadedPoseRegressor":
        est = cls(skeleton=skeleton, camera=camera, objective=model.objective)
        est.skeleton_ = est._skeleton()
        est.camera_ = est._camera()
        est.model_ = model
        return est

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            from sklearn.exceptions import NotFittedError
            raise NotFittedError("CascadedPoseRegressor is not fitted yet")

    def predict(self, X) -> np.ndarray:
        self._check_fitted()
        S, _ = infer_batch(self.model_, _check_images(X), self.camera_, self.skeleton_)
        return S

    def predict_positions(self, X) -> np.ndarray:
        S = self.predict(X)
        return _State(self.skeleton_, self.model_.objective).positions(S)

    def staged_predict_positions(self, X):
        """List of (stage_index, section, (n, 21, 3) positions) after every stage.

        Limb stages report the whole body with that limb's partial update.
        """
        self._check_fitted()
        state = _State(self.skeleton_, self.model_.objective)
        out = []
        infer_batch(self.model_, _check_images(X), self.camera_, self.skeleton_,
                    on_stage=lambda i, st, S: out.append((i, st.section, state.positions(S))))
        return out

    def score(self, X, y) -> float:
        """Negative mean per-point position error in meters (higher is better)."""
        y = check_poses(y)
        P = self.predict_positions(X)
        return -float(np.linalg.norm(P - _positions(self.skeleton_, y), axis=2).mean())
