"""Pinhole camera, depth images, synthetic capsule-body rendering and datasets.

Camera frame: x right, y down, z forward; depth is the z coordinate in
meters. Background pixels hold the sentinel ``BACKGROUND`` (1e5).
"""
from __future__ import annotations

import hashlib
import json
import logging
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from ._kernels import BACKGROUND, render_capsules
from .skeleton import N_DOFS, SkeletonModel, forward_kinematics

logger = logging.getLogger(__name__)

DPT_MAGIC = b"DPT1"
DATASET_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class CameraModel:
    width: int = 512
    height: int = 424
    fx: float = 365.0
    fy: float = 365.0
    cx: float = 256.0
    cy: float = 212.0

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError("raster size must be positive")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")

    @property
    def intrinsics(self) -> np.ndarray:
        return np.array([self.fx, self.fy, self.cx, self.cy])

    def to_dict(self) -> dict:
        return asdict(self)


def project(camera: CameraModel, point) -> tuple[float, float, bool]:
    """Pixel coordinates of a 3D point and whether it lands inside the raster.

    Points with z <= 0 come back as ``(nan, nan, False)``.
    """
    x, y, z = (float(c) for c in point)
    if z <= 0.0:
        return float("nan"), float("nan"), False
    u = camera.fx * x / z + camera.cx
    v = camera.fy * y / z + camera.cy
    inside = 0.0 <= u < camera.width and 0.0 <= v < camera.height
    return u, v, inside


def backproject(camera: CameraModel, pixel, depth: float) -> np.ndarray:
    u, v = pixel
    if not np.isfinite(depth) or depth <= 0 or depth >= BACKGROUND:
        raise ValueError(f"cannot backproject depth {depth!r}: not a foreground depth")
    return np.array([(u - camera.cx) * depth / camera.fx, (v - camera.cy) * depth / camera.fy, depth])


def backproject_image(camera: CameraModel, image: "DepthImage") -> np.ndarray:
    """Point cloud (m, 3) of all foreground pixels, row-major order."""
    v, u = np.nonzero(image.crop < BACKGROUND)
    z = image.crop[v, u].astype(float)
    u = u + image.x0
    v = v + image.y0
    return np.column_stack([(u - camera.cx) * z / camera.fx, (v - camera.cy) * z / camera.fy, z])


class DepthImage:
    """Depth raster stored as the bounding box of its foreground.

    Pixels outside the box are background. ``depth`` materializes the full
    row-major float32 raster.
    """

    __slots__ = ("width", "height", "x0", "y0", "crop")

    def __init__(self, width: int, height: int, crop: np.ndarray, x0: int = 0, y0: int = 0):
        crop = np.ascontiguousarray(crop, dtype=np.float32)
        if crop.ndim != 2:
            raise ValueError("crop must be 2-D")
        if x0 < 0 or y0 < 0 or x0 + crop.shape[1] > width or y0 + crop.shape[0] > height:
            raise ValueError("crop exceeds the raster")
        crop.setflags(write=False)
        self.width, self.height, self.x0, self.y0, self.crop = int(width), int(height), int(x0), int(y0), crop

    @classmethod
    def from_array(cls, depth) -> "DepthImage":
        depth = np.asarray(depth, dtype=np.float32)
        h, w = depth.shape
        fg = depth < BACKGROUND
        if not np.all(np.isfinite(depth)) or np.any(depth <= 0):
            raise ValueError("depths must be finite and positive")
        if not fg.any():
            return cls(w, h, np.zeros((0, 0), np.float32))
        rows = np.flatnonzero(fg.any(axis=1))
        cols = np.flatnonzero(fg.any(axis=0))
        y0, y1, x0, x1 = rows[0], rows[-1] + 1, cols[0], cols[-1] + 1
        return cls(w, h, depth[y0:y1, x0:x1].copy(), x0, y0)

    @classmethod
    def background(cls, width: int, height: int) -> "DepthImage":
        return cls(width, height, np.zeros((0, 0), np.float32))

    @property
    def depth(self) -> np.ndarray:
        out = np.full((self.height, self.width), np.float32(BACKGROUND))
        h, w = self.crop.shape
        out[self.y0:self.y0 + h, self.x0:self.x0 + w] = self.crop
        return out

    def at(self, u: int, v: int) -> float:
        if not (0 <= u < self.width and 0 <= v < self.height):
            return BACKGROUND
        h, w = self.crop.shape
        if self.x0 <= u < self.x0 + w and self.y0 <= v < self.y0 + h:
            return float(self.crop[v - self.y0, u - self.x0])
        return BACKGROUND

    @property
    def n_foreground(self) -> int:
        return int(np.count_nonzero(self.crop < BACKGROUND))

    def to_bytes(self) -> bytes:
        header = DPT_MAGIC + struct.pack("<II", self.width, self.height) + b"\0" * 4
        return header + self.depth.astype("<f4").tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "DepthImage":
        if len(blob) < 16 or blob[:4] != DPT_MAGIC:
            raise ValueError("not a DPT1 depth file")
        width, height = struct.unpack("<II", blob[4:12])
        data = np.frombuffer(blob, dtype="<f4", offset=16)
        if data.size != width * height:
            raise ValueError("DPT payload size does not match header")
        return cls.from_array(data.reshape(height, width))

    def __eq__(self, other):
        if not isinstance(other, DepthImage):
            return NotImplemented
        return (self.width, self.height, self.x0, self.y0) == (other.width, other.height, other.x0, other.y0) \
            and np.array_equal(self.crop, other.crop)

    def __repr__(self):
        return f"DepthImage({self.width}x{self.height}, foreground={self.n_foreground})"


def write_dpt(path, image: DepthImage) -> None:
    Path(path).write_bytes(image.to_bytes())


def read_dpt(path) -> DepthImage:
    return DepthImage.from_bytes(Path(path).read_bytes())


@dataclass
class Frame:
    image: DepthImage
    truth: Optional[np.ndarray] = None
    frame_id: int = 0


class DepthStack:
    """Many depth images packed into one buffer for the compiled kernels."""

    def __init__(self, images: Sequence[DepthImage]):
        images = list(images)
        if not images:
            raise ValueError("empty image list")
        self.width, self.height = images[0].width, images[0].height
        if any((im.width, im.height) != (self.width, self.height) for im in images):
            raise ValueError("all images must share one raster size")
        sizes = np.array([im.crop.size for im in images], dtype=np.int64)
        self.offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64)
        self.buffer = np.concatenate([im.crop.ravel() for im in images]) if sizes.sum() \
            else np.zeros(1, np.float32)
        self.x0 = np.array([im.x0 for im in images], dtype=np.int64)
        self.y0 = np.array([im.y0 for im in images], dtype=np.int64)
        self.w = np.array([im.crop.shape[1] for im in images], dtype=np.int64)
        self.h = np.array([im.crop.shape[0] for im in images], dtype=np.int64)
        self._images = images

    def __len__(self):
        return len(self._images)

    def __getitem__(self, i) -> DepthImage:
        return self._images[i]

    def kernel_args(self):
        return self.buffer, self.offsets, self.x0, self.y0, self.w, self.h


# ---------------------------------------------------------------------------
# rendering

def segment_capsules(skeleton: SkeletonModel, pose) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Capsule endpoints and radii, one per segment (parent -> child point)."""
    pos = forward_kinematics(skeleton, pose)
    child = np.arange(1, skeleton.n_points)
    return pos[skeleton.parents[child]], pos[child], skeleton.segment_radii[child]


def render_capsule_scene(camera: CameraModel, A, B, radii) -> DepthImage:
    A = np.ascontiguousarray(A, dtype=float).reshape(-1, 3)
    B = np.ascontiguousarray(B, dtype=float).reshape(-1, 3)
    radii = np.ascontiguousarray(radii, dtype=float).reshape(-1)
    depth = render_capsules(A, B, radii, camera.fx, camera.fy, camera.cx, camera.cy,
                            camera.width, camera.height)
    return DepthImage.from_array(depth)


def render_depth(skeleton: SkeletonModel, pose, camera: CameraModel) -> DepthImage:
    """Z-buffered depth of the capsule body proxy seen through ``camera``."""
    A, B, r = segment_capsules(skeleton, pose)
    return render_capsule_scene(camera, A, B, r)


def meanshift_root_init(image: DepthImage, camera: CameraModel, bandwidth: float = 0.5,
                        tol: float = 1e-4, max_iter: int = 50) -> np.ndarray:
    """Gaussian-kernel mean-shift mode of the foreground cloud, started at its centroid."""
    cloud = backproject_image(camera, image)
    if cloud.shape[0] == 0:
        raise ValueError("depth image has no foreground pixels")
    mode = cloud.mean(axis=0)
    inv = -0.5 / (bandwidth * bandwidth)
    for _ in range(max_iter):
        w = np.exp(inv * np.sum((cloud - mode) ** 2, axis=1))
        new = w @ cloud / w.sum()
        shift = np.linalg.norm(new - mode)
        mode = new
        if shift < tol:
            break
    return mode


# ---------------------------------------------------------------------------
# procedural motion

@dataclass
class MotionConfig:
    """Keypose interpolation motion; root translation ranges in camera meters."""

    clip_length: int = 20
    root_x: tuple = (-0.4, 0.4)
    root_y: tuple = (-0.1, 0.1)
    root_z: tuple = (2.5, 3.5)
    max_rejections: int = 100

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "MotionConfig":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(key)))


def random_pose(skeleton: SkeletonModel, motion: MotionConfig, rng: np.random.Generator) -> np.ndarray:
    """Uniform in-limits angles with a root position inside the motion ranges."""
    q = np.zeros(N_DOFS)
    rot = skeleton.dof_is_rotation
    lo, hi = skeleton.joint_limits[rot].T
    q[rot] = rng.uniform(lo, hi)
    q[0] = rng.uniform(*motion.root_x)
    q[1] = rng.uniform(*motion.root_y)
    q[2] = rng.uniform(*motion.root_z)
    return q


def motion_pose(skeleton: SkeletonModel, motion: MotionConfig, seed: int, frame_id: int) -> np.ndarray:
    """Smoothstep blend between the keyposes bracketing ``frame_id``."""
    clip, step = divmod(frame_id, motion.clip_length)
    k0 = random_pose(skeleton, motion, _rng(seed, 0, clip))
    k1 = random_pose(skeleton, motion, _rng(seed, 0, clip + 1))
    t = step / motion.clip_length
    t = t * t * (3.0 - 2.0 * t)
    return (1.0 - t) * k0 + t * k1


def _make_frame(args) -> tuple[np.ndarray, DepthImage]:
    skeleton, camera, motion, seed, frame_id = args
    q = motion_pose(skeleton, motion, seed, frame_id)
    for attempt in range(motion.max_rejections + 1):
        image = render_depth(skeleton, q, camera)
        if image.n_foreground > 0:
            return q, image
        if attempt == motion.max_rejections:
            break
        q = random_pose(skeleton, motion, _rng(seed, 1, frame_id, attempt))
    raise RuntimeError(f"frame {frame_id}: more than {motion.max_rejections} consecutive "
                       "all-background renderings")


@dataclass
class Dataset:
    frames: list
    manifest: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.frames)

    @property
    def images(self) -> list:
        return [f.image for f in self.frames]

    @property
    def truths(self) -> np.ndarray:
        return np.array([f.truth for f in self.frames])


def generate_dataset(skeleton: SkeletonModel, camera: CameraModel, motion_config: Optional[MotionConfig],
                     n_frames: int, seed: int, start: int = 0, workers: int = 1) -> Dataset:
    """Render ``n_frames`` procedural frames; a pure function of its arguments.

    ``start`` offsets the frame ids so disjoint train/test splits can share a seed.
    """
    if n_frames <= 0:
        raise ValueError("n_frames must be positive")
    motion = motion_config or MotionConfig()
    jobs = [(skeleton, camera, motion, seed, start + i) for i in range(n_frames)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_make_frame, jobs, chunksize=max(1, n_frames // (4 * workers))))
    else:
        results = [_make_frame(j) for j in jobs]
    frames = [Frame(image, q, start + i) for i, (q, image) in enumerate(results)]
    manifest = {
        "schema_version": DATASET_SCHEMA_VERSION,
        "camera": camera.to_dict(),
        "skeleton_hash": skeleton.config_hash,
        "seed": int(seed),
        "motion": motion.to_dict(),
        "frames": [{"id": f.frame_id, "file": f"frame_{f.frame_id:06d}.dpt"} for f in frames],
    }
    return Dataset(frames, manifest)


# ---------------------------------------------------------------------------
# dataset container on disk

def write_poses(path, frame_ids, poses) -> None:
    poses = np.asarray(poses, dtype=float)
    doc = {"schema_version": DATASET_SCHEMA_VERSION, "frame_ids": [int(i) for i in frame_ids],
           "poses": [[float(x) for x in p] for p in poses.reshape(len(poses), -1)]}
    Path(path).write_text(json.dumps(doc, indent=None) + "\n")


def read_poses(path) -> tuple[list, np.ndarray]:
    doc = json.loads(Path(path).read_text())
    return doc["frame_ids"], np.asarray(doc["poses"], dtype=float)


def write_dataset(dataset: Dataset, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for rec, frame in zip(dataset.manifest["frames"], dataset.frames):
        write_dpt(out / rec["file"], frame.image)
    write_poses(out / "poses.json", [f.frame_id for f in dataset.frames], dataset.truths)
    (out / "manifest.json").write_text(json.dumps(dataset.manifest, indent=1, sort_keys=True) + "\n")
    return out


class DatasetError(ValueError):
    pass


def read_dataset(data_dir, with_truth: bool = True) -> Dataset:
    root = Path(data_dir)
    mpath = root / "manifest.json"
    if not mpath.is_file():
        raise DatasetError(f"missing manifest: {mpath}")
    manifest = json.loads(mpath.read_text())
    if manifest.get("schema_version") != DATASET_SCHEMA_VERSION:
        raise DatasetError(f"unsupported dataset schema_version {manifest.get('schema_version')!r}")
    truths = {}
    if with_truth and (root / "poses.json").is_file():
        ids, poses = read_poses(root / "poses.json")
        truths = dict(zip(ids, poses))
    frames = [Frame(read_dpt(root / rec["file"]), truths.get(rec["id"]), rec["id"])
              for rec in manifest["frames"]]
    return Dataset(frames, manifest)


def camera_from_manifest(manifest: dict) -> CameraModel:
    return CameraModel(**manifest["camera"])


def directory_digest(path) -> str:
    """sha256 over every file name and content in a directory (sorted)."""
    h = hashlib.sha256()
    for p in sorted(Path(path).rglob("*")):
        if p.is_file():
            h.update(p.relative_to(path).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()
