"""Pose-indexed depth-difference features.

A descriptor attaches two probe offsets to two joints. Offsets live in the
joints' local frames, so probes follow the body: under pose q a probe sits at
``pos(joint) + R_world(joint) @ offset``. The feature is the depth under the
first probe minus the depth under the second; probes that miss the raster
or sit behind the camera read the background sentinel.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from ._kernels import feature_columns
from .depthcam import CameraModel, DepthImage, DepthStack
from .skeleton import SkeletonModel, fk_cache

# segments (named by child point) whose length x radius sets each section's radius
SAMPLING_SEGMENTS = {
    "root": ("lowerback", "upperback", "lfemur", "rfemur"),
    "torso": ("head", "head_site", "lclavicle", "rclavicle", "lhumerus", "rhumerus"),
    "limb": ("lradius", "rradius", "lhand_site", "rhand_site", "ltibia", "rtibia",
             "lfoot", "rfoot", "ltoes_site", "rtoes_site"),
}
LIMB_SECTIONS = ("left_arm", "right_arm", "left_leg", "right_leg")


@dataclass(frozen=True)
class FeatureDescriptor:
    joint_i: int
    joint_j: int
    dp1: tuple
    dp2: tuple

    @property
    def unary(self) -> bool:
        return self.joint_i == self.joint_j


class DescriptorTable:
    """Column-oriented descriptor list, the layout the kernels consume."""

    def __init__(self, joint_i, joint_j, dp1, dp2):
        self.joint_i = np.ascontiguousarray(joint_i, dtype=np.int64)
        self.joint_j = np.ascontiguousarray(joint_j, dtype=np.int64)
        self.dp1 = np.ascontiguousarray(dp1, dtype=float).reshape(-1, 3)
        self.dp2 = np.ascontiguousarray(dp2, dtype=float).reshape(-1, 3)
        n = len(self.joint_i)
        if not (len(self.joint_j) == len(self.dp1) == len(self.dp2) == n):
            raise ValueError("descriptor columns differ in length")

    @classmethod
    def from_descriptors(cls, descs: Sequence[FeatureDescriptor]) -> "DescriptorTable":
        return cls([d.joint_i for d in descs], [d.joint_j for d in descs],
                   [d.dp1 for d in descs], [d.dp2 for d in descs])

    def __len__(self):
        return len(self.joint_i)

    def __getitem__(self, k) -> FeatureDescriptor:
        return FeatureDescriptor(int(self.joint_i[k]), int(self.joint_j[k]),
                                 tuple(self.dp1[k]), tuple(self.dp2[k]))

    def __iter__(self) -> Iterator[FeatureDescriptor]:
        return (self[k] for k in range(len(self)))

    def __eq__(self, other):
        return isinstance(other, DescriptorTable) and all(
            np.array_equal(a, b) for a, b in zip(self.arrays(), other.arrays()))

    def arrays(self):
        return self.joint_i, self.joint_j, self.dp1, self.dp2

    def to_rows(self) -> np.ndarray:
        """(n, 8) rows ``[joint_i, joint_j, dp1.xyz, dp2.xyz]``."""
        return np.column_stack([self.joint_i, self.joint_j, self.dp1, self.dp2]).astype(float)

    @classmethod
    def from_rows(cls, rows) -> "DescriptorTable":
        rows = np.asarray(rows, dtype=float).reshape(-1, 8)
        return cls(rows[:, 0].astype(np.int64), rows[:, 1].astype(np.int64), rows[:, 2:5], rows[:, 5:8])


@dataclass(frozen=True)
class SamplingSpec:
    radius: float
    joint_pool: tuple
    n_descriptors: int = 1000

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("sampling radius must be positive")
        if not self.joint_pool:
            raise ValueError("joint pool is empty")
        if self.n_descriptors <= 0:
            raise ValueError("descriptor count must be positive")


def _section_product(skeleton: SkeletonModel, section: str) -> float:
    idx = [skeleton.index(n) for n in SAMPLING_SEGMENTS[section]]
    return float(np.mean(skeleton.bone_lengths[idx] * skeleton.segment_radii[idx]))


def adaptive_radius(skeleton: SkeletonModel, section: str, dr_l: float) -> float:
    """Probe radius for a section, scaled from the limb radius ``dr_l`` by the
    ratio of mean segment length x radius (section over limbs)."""
    if dr_l <= 0:
        raise ValueError("dr_l must be positive")
    if section in LIMB_SECTIONS:
        section = "limb"
    if section not in SAMPLING_SEGMENTS:
        raise ValueError(f"unknown section {section!r}")
    limb = _section_product(skeleton, "limb")
    if limb <= 0:
        raise ValueError("degenerate skeleton: zero limb length x radius")
    if section == "limb":
        return float(dr_l)
    return _section_product(skeleton, section) / limb * dr_l


def _uniform_ball(rng: np.random.Generator, n: int, radius: float) -> np.ndarray:
    v = rng.standard_normal((n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v * (radius * np.cbrt(rng.uniform(size=(n, 1))))


def sample_descriptors(spec: SamplingSpec, rng_seed) -> DescriptorTable:
    rng = np.random.default_rng(rng_seed)
    n = spec.n_descriptors
    pool = np.asarray(spec.joint_pool, dtype=np.int64)
    ji = pool[rng.integers(len(pool), size=n)]
    jj = pool[rng.integers(len(pool), size=n)]
    unary = rng.uniform(size=n) < 0.5
    # binary features need a distinct second joint when the pool allows it
    if len(pool) > 1:
        clash = ~unary & (jj == ji)
        while clash.any():
            jj[clash] = pool[rng.integers(len(pool), size=int(clash.sum()))]
            clash = ~unary & (jj == ji)
    jj = np.where(unary, ji, jj)
    dp1 = _uniform_ball(rng, n, spec.radius)
    dp2 = _uniform_ball(rng, n, spec.radius)
    return DescriptorTable(ji, jj, dp1, dp2)


def feature_matrix(table: DescriptorTable, stack: DepthStack, camera: CameraModel,
                   positions: np.ndarray, rotations: np.ndarray, cols=None,
                   image_of=None) -> np.ndarray:
    """Feature values (n_samples, len(cols)) from cached FK of every sample."""
    cols = np.arange(len(table)) if cols is None else np.asarray(cols, dtype=np.int64)
    if image_of is None:
        image_of = np.arange(positions.shape[0], dtype=np.int64)
    return feature_columns(cols, *table.arrays(), np.ascontiguousarray(positions),
                           np.ascontiguousarray(rotations), image_of, *stack.kernel_args(),
                           camera.intrinsics, camera.width, camera.height)


def eval_feature(desc: FeatureDescriptor, image: DepthImage, camera: CameraModel,
                 skeleton: SkeletonModel, pose, fk=None) -> float:
    """Single feature value in meters; ``fk`` may carry (positions, rotations) for ``pose``."""
    pos, rot = fk if fk is not None else fk_cache(skeleton, pose)
    table = DescriptorTable.from_descriptors([desc])
    return float(feature_matrix(table, DepthStack([image]), camera, pos[None], rot[None])[0, 0])


class LazyFeatures:
    """Feature columns computed on first use and memoized.

    Looks like a 2-D array to the forest trainer: ``take(rows, cols)``.
    """

    def __init__(self, table: DescriptorTable, stack: DepthStack, camera: CameraModel,
                 positions: np.ndarray, rotations: np.ndarray, image_of=None):
        self.table, self.stack, self.camera = table, stack, camera
        self.positions = np.ascontiguousarray(positions)
        self.rotations = np.ascontiguousarray(rotations)
        self.image_of = image_of
        self._cols = np.full((positions.shape[0], len(table)), np.nan)
        self._have = np.zeros(len(table), dtype=bool)

    @property
    def shape(self):
        return self._cols.shape

    @property
    def n_evaluated(self) -> int:
        return int(self._have.sum())

    def take(self, rows, cols) -> np.ndarray:
        cols = np.asarray(cols, dtype=np.int64)
        missing = np.unique(cols[~self._have[cols]])
        if missing.size:
            self._cols[:, missing] = feature_matrix(self.table, self.stack, self.camera, self.positions,
                                                    self.rotations, missing, self.image_of)
            self._have[missing] = True
        return self._cols[np.ix_(np.asarray(rows), cols)]
