"""Kinematic skeleton, pose vectors, forward kinematics and analytic Jacobians.

A pose is a 38-vector: root translation (3), root orientation (3) and the
relative joint angles. Every rotational coordinate turns its joint about a
fixed local axis; a joint's local rotation is the product of its per-axis
rotations in the declared order, e.g. ``"zyx"`` gives ``Rz @ Ry @ Rx``.

Points are the 16 joints followed by the 5 end sites. A joint's world
rotation turns the offsets of its children, so the segment ending at point
``k`` is rigidly attached to the frame of ``parent(k)``.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from functools import cached_property
from importlib import resources
from pathlib import Path

import numpy as np

from ._kernels import fk_batch

N_DOFS = 38
N_JOINTS = 16
N_END_SITES = 5
N_POINTS = N_JOINTS + N_END_SITES
SCHEMA_VERSION = 1

_AXES = {"x": np.array([1.0, 0.0, 0.0]), "y": np.array([0.0, 1.0, 0.0]), "z": np.array([0.0, 0.0, 1.0])}

# dofs per joint, in joint order; the last entries close the 38-coordinate budget
REQUIRED_DOFS = {
    "root": 6, "head": 3, "upperback": 3,
    "lclavicle": 2, "rclavicle": 2, "lhumerus": 3, "rhumerus": 3,
    "lradius": 1, "rradius": 1, "lfemur": 3, "rfemur": 3,
    "ltibia": 1, "rtibia": 1, "lfoot": 3, "rfoot": 3,
}


class SkeletonConfigError(ValueError):
    """Raised for a malformed or inconsistent skeleton config."""


def _skew(v: np.ndarray) -> np.ndarray:
    # batched cross-product matrices, v: (..., 3)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def axis_rotation(axis: np.ndarray, angle) -> np.ndarray:
    """Rotation matrices about unit ``axis`` by ``angle`` (broadcast over angle)."""
    angle = np.asarray(angle, dtype=float)
    K = _skew(np.asarray(axis, dtype=float))
    c = np.cos(angle)[..., None, None]
    s = np.sin(angle)[..., None, None]
    return np.eye(3) + s * K + (1.0 - c) * (K @ K)


@dataclass(frozen=True, eq=False)
class SkeletonModel:
    """Immutable body prior: hierarchy, dof map, segment geometry and limits.

    Arrays are indexed by point (joints first, then end sites). Segment ``k``
    runs from ``parents[k]`` to point ``k`` for ``k >= 1``.
    """

    names: tuple
    parents: np.ndarray        # (21,) int, -1 for root
    offsets: np.ndarray        # (21, 3) local offsets in meters
    dof_joint: np.ndarray      # (38,) owning joint index
    dof_is_rotation: np.ndarray  # (38,) bool
    dof_axis: np.ndarray       # (38, 3) unit axes (translation axis for root translation)
    segment_radii: np.ndarray  # (21,) meters, entry 0 unused (nan)
    joint_limits: np.ndarray   # (38, 2) radians, +-inf for translations
    a_pose: np.ndarray         # (38,)
    config: dict

    def __post_init__(self):
        for arr in (self.parents, self.offsets, self.dof_joint, self.dof_is_rotation,
                    self.dof_axis, self.segment_radii, self.joint_limits, self.a_pose):
            arr.setflags(write=False)

    # -- construction -----------------------------------------------------
    @classmethod
    def from_config(cls, cfg: dict) -> "SkeletonModel":
        if cfg.get("schema_version") != SCHEMA_VERSION:
            raise SkeletonConfigError(f"unsupported schema_version {cfg.get('schema_version')!r}")
        joints = cfg["joints"]
        sites = cfg["end_sites"]
        if len(joints) != N_JOINTS or len(sites) != N_END_SITES:
            raise SkeletonConfigError(
                f"expected {N_JOINTS} joints and {N_END_SITES} end sites, "
                f"got {len(joints)} and {len(sites)}")
        names = [j["name"] for j in joints] + [s["name"] for s in sites]
        if len(set(names)) != len(names):
            raise SkeletonConfigError("duplicate point names")
        index = {n: i for i, n in enumerate(names)}

        parents = np.full(N_POINTS, -1, dtype=np.int64)
        offsets = np.zeros((N_POINTS, 3))
        for k, rec in enumerate(joints + sites):
            p = rec.get("parent")
            if k == 0:
                if p is not None:
                    raise SkeletonConfigError("first joint must be the root (parent null)")
            else:
                if p not in index or index[p] >= N_JOINTS:
                    raise SkeletonConfigError(f"{rec['name']}: unknown parent joint {p!r}")
                if k < N_JOINTS and index[p] >= k:
                    raise SkeletonConfigError(f"{rec['name']}: joints must be topologically ordered")
                parents[k] = index[p]
            offsets[k] = rec["offset"]

        dof_map = cfg["dof_map"]
        if len(dof_map) != N_DOFS:
            raise SkeletonConfigError(f"dof_map must have {N_DOFS} entries, got {len(dof_map)}")
        dof_joint = np.zeros(N_DOFS, dtype=np.int64)
        dof_rot = np.zeros(N_DOFS, dtype=bool)
        dof_axis = np.zeros((N_DOFS, 3))
        for d, rec in enumerate(dof_map):
            if rec["joint"] not in index or index[rec["joint"]] >= N_JOINTS:
                raise SkeletonConfigError(f"dof {d}: unknown joint {rec['joint']!r}")
            dof_joint[d] = index[rec["joint"]]
            if rec["kind"] == "translation":
                if dof_joint[d] != 0 or d >= 3:
                    raise SkeletonConfigError("translations must be the first three root dofs")
            elif rec["kind"] != "rotation":
                raise SkeletonConfigError(f"dof {d}: unknown kind {rec['kind']!r}")
            dof_rot[d] = rec["kind"] == "rotation"
            dof_axis[d] = _AXES[rec["axis"]]
        if np.any(np.diff(dof_joint) < 0):
            raise SkeletonConfigError("dof_map must be grouped by joint in joint order")
        counts = {n: int(np.sum(dof_joint == index[n])) for n in names[:N_JOINTS]}
        for n, c in REQUIRED_DOFS.items():
            if counts.get(n) != c:
                raise SkeletonConfigError(f"joint {n!r} needs {c} dofs, has {counts.get(n)}")
        for j, rec in enumerate(joints):
            own = np.flatnonzero(dof_rot & (dof_joint == j))
            if own.size and own[-1] - own[0] + 1 != own.size:
                raise SkeletonConfigError(f"{rec['name']}: rotational dofs must be contiguous")
            order = "".join(dof_map[d]["axis"] for d in range(N_DOFS)
                            if dof_rot[d] and dof_joint[d] == j)
            if order != rec.get("rotation_order", order):
                raise SkeletonConfigError(f"{rec['name']}: rotation_order disagrees with dof_map")

        radii = np.full(N_POINTS, np.nan)
        for rec in cfg["radii"]:
            radii[index[rec["segment"]]] = rec["radius"]
        if np.any(~np.isfinite(radii[1:])) or np.any(radii[1:] <= 0):
            raise SkeletonConfigError("every segment needs a strictly positive radius")
        if np.any(np.linalg.norm(offsets[1:], axis=1) <= 0):
            raise SkeletonConfigError("bone lengths must be strictly positive")

        limits = np.tile([-np.inf, np.inf], (N_DOFS, 1))
        for rec in cfg["limits"]:
            d = rec["dof"]
            if not dof_rot[d]:
                raise SkeletonConfigError(f"limit given for non-rotational dof {d}")
            if rec["min"] > rec["max"]:
                raise SkeletonConfigError(f"dof {d}: min > max")
            limits[d] = rec["min"], rec["max"]
        if np.any(~np.isfinite(limits[dof_rot])):
            raise SkeletonConfigError("every rotational dof needs limits")

        a_pose = np.asarray(cfg["a_pose"], dtype=float)
        if a_pose.shape != (N_DOFS,):
            raise SkeletonConfigError("a_pose must have 38 entries")

        return cls(tuple(names), parents, offsets, dof_joint, dof_rot, dof_axis,
                   radii, limits, a_pose, cfg)

    @classmethod
    def load(cls, path) -> "SkeletonModel":
        with open(path) as f:
            return cls.from_config(json.load(f))

    @classmethod
    def default(cls) -> "SkeletonModel":
        text = resources.files("depthpose").joinpath("data/default_skeleton.json").read_text()
        return cls.from_config(json.loads(text))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.config, indent=1))

    # -- derived quantities -------------------------------------------------
    @cached_property
    def config_hash(self) -> str:
        blob = json.dumps(self.config, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    @property
    def n_points(self) -> int:
        return N_POINTS

    @cached_property
    def bone_lengths(self) -> np.ndarray:
        """(21,) segment lengths indexed by child point; entry 0 is nan."""
        out = np.linalg.norm(self.offsets, axis=1)
        out[0] = np.nan
        out.setflags(write=False)
        return out

    @cached_property
    def joint_dofs(self) -> tuple:
        """Rotational dof indices per joint, in composition order."""
        return tuple(tuple(int(d) for d in np.flatnonzero(self.dof_is_rotation & (self.dof_joint == j)))
                     for j in range(N_JOINTS))

    @cached_property
    def subtree(self) -> np.ndarray:
        """(16, 21) bool: points strictly below each joint."""
        out = np.zeros((N_JOINTS, N_POINTS), dtype=bool)
        for k in range(1, N_POINTS):
            p = self.parents[k]
            while p >= 0:
                out[p, k] = True
                p = self.parents[p]
        out.setflags(write=False)
        return out

    def index(self, name: str) -> int:
        return self.names.index(name)

    def dofs_of(self, *joint_names: str) -> list:
        """All pose indices owned by the named joints, ascending."""
        ids = [self.index(n) for n in joint_names]
        return [d for d in range(N_DOFS) if self.dof_joint[d] in ids]

    # -- kinematics ---------------------------------------------------------
    @cached_property
    def _rot_ranges(self):
        starts = np.array([d[0] if d else 0 for d in self.joint_dofs], dtype=np.int64)
        stops = np.array([d[-1] + 1 if d else 0 for d in self.joint_dofs], dtype=np.int64)
        return starts, stops

    def _fk(self, q: np.ndarray, want_axes: bool = False):
        """Batched FK. Returns positions (n,21,3), rotations (n,16,3,3) and
        world axes of every rotational dof (n,38,3) when ``want_axes``."""
        starts, stops = self._rot_ranges
        pos, rot, axes = fk_batch(np.ascontiguousarray(q, dtype=float), self.parents, self.offsets,
                                  starts, stops, self.dof_axis, want_axes)
        return pos, rot, (axes if want_axes else None)

    def jacobian_from_fk(self, pos: np.ndarray, axes: np.ndarray, dofs=None) -> np.ndarray:
        """Jacobian columns ``dofs`` from cached FK; shape (n, 63, len(dofs))."""
        dofs = range(N_DOFS) if dofs is None else dofs
        n = pos.shape[0]
        out = np.zeros((n, N_POINTS, 3, len(dofs)))
        for c, d in enumerate(dofs):
            if not self.dof_is_rotation[d]:
                out[:, :, :, c] = self.dof_axis[d]
                continue
            j = self.dof_joint[d]
            lever = pos - pos[:, j:j + 1]
            out[..., c] = np.cross(axes[:, d][:, None, :], lever) * self.subtree[j][None, :, None]
        return out.reshape(n, 3 * N_POINTS, len(dofs))


def _as_batch(q) -> tuple[np.ndarray, bool]:
    q = np.asarray(q, dtype=float)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    if q.shape[1] != N_DOFS:
        raise ValueError(f"pose must have {N_DOFS} entries, got {q.shape[1]}")
    if not np.all(np.isfinite(q)):
        raise ValueError("pose entries must be finite")
    return q, single


def forward_kinematics(skeleton: SkeletonModel, pose) -> np.ndarray:
    """World positions of the 21 points, shape (21, 3) or (n, 21, 3) for a batch."""
    q, single = _as_batch(pose)
    pos, _, _ = skeleton._fk(q)
    return pos[0] if single else pos


def world_rotations(skeleton: SkeletonModel, pose) -> np.ndarray:
    """Per-joint world rotation matrices, (16, 3, 3) or batched."""
    q, single = _as_batch(pose)
    _, rot, _ = skeleton._fk(q)
    return rot[0] if single else rot


def fk_cache(skeleton: SkeletonModel, pose) -> tuple[np.ndarray, np.ndarray]:
    """Positions and world rotations in one pass."""
    q, single = _as_batch(pose)
    pos, rot, _ = skeleton._fk(q)
    return (pos[0], rot[0]) if single else (pos, rot)


def jacobian(skeleton: SkeletonModel, pose, dofs=None) -> np.ndarray:
    """Analytic d(positions)/dq, rows ordered point-major (x, y, z per point).

    Shape (63, 38) for a single pose; pass ``dofs`` to get only those columns.
    """
    q, single = _as_batch(pose)
    pos, _, axes = skeleton._fk(q, want_axes=True)
    J = skeleton.jacobian_from_fk(pos, axes, dofs)
    return J[0] if single else J


def apply_dof_subset(base, delta, subset) -> np.ndarray:
    """Copy of ``base`` with ``base[subset] += delta``."""
    q = np.array(base, dtype=float)
    subset = np.asarray(subset, dtype=np.int64).reshape(-1)
    delta = np.asarray(delta, dtype=float).reshape(-1)
    if delta.shape != subset.shape:
        raise ValueError("delta and subset lengths differ")
    if subset.size and (subset.min() < 0 or subset.max() >= N_DOFS):
        raise IndexError("dof index out of range [0, 38)")
    q[..., subset] += delta
    return q


def zero_pose() -> np.ndarray:
    return np.zeros(N_DOFS)
