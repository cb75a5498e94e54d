"""Error metrics, parameter sweeps, objective comparison and throughput timing."""
from __future__ import annotations

import io
import json
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from sklearn.base import clone

from .cascade import CascadeModel, CascadedPoseRegressor, infer_batch, initial_pose
from .depthcam import CameraModel
from .skeleton import N_DOFS, N_POINTS, SkeletonModel, forward_kinematics

DEFAULT_THRESHOLDS_CM = tuple(float(d) for d in range(1, 21))
SWEEP_GRIDS = {
    "max_depth": (5, 10, 15, 20),
    "n_trees": (1, 8, 16, 24),
    "probe_offset_mm": (50, 80, 100, 120, 150, 200, 1000),
    "stage_counts": ((1, 2, 1), (3, 5, 3), (5, 10, 5), (8, 15, 8)),
}
_SWEEP_PARAM = {"max_depth": "max_depth", "n_trees": "n_trees", "stage_counts": "stage_counts",
                "probe_offset_mm": "probe_offset"}


def to_positions(skeleton: SkeletonModel, estimates) -> np.ndarray:
    """(n, 21, 3) positions from (n, 38) poses, (n, 63) vectors or (n, 21, 3) arrays."""
    a = np.asarray(estimates, dtype=float)
    if a.ndim == 3 and a.shape[1:] == (N_POINTS, 3):
        return a
    if a.ndim == 2 and a.shape[1] == 3 * N_POINTS:
        return a.reshape(-1, N_POINTS, 3)
    if a.ndim == 2 and a.shape[1] == N_DOFS:
        return forward_kinematics(skeleton, a).reshape(-1, N_POINTS, 3)
    raise ValueError(f"cannot interpret estimates of shape {a.shape}")


def per_joint_rmse(estimates, truths, skeleton: SkeletonModel):
    """RMSE in cm per point (21 columns) and the mean over columns."""
    P = to_positions(skeleton, estimates)
    T = to_positions(skeleton, truths)
    if P.shape != T.shape:
        raise ValueError("estimates and truths differ in length")
    if P.shape[0] == 0:
        raise ValueError("cannot score an empty frame set")
    rmse = 100.0 * np.sqrt(np.mean(np.sum((P - T) ** 2, axis=2), axis=0))
    return rmse, float(rmse.mean())


def frame_errors(estimates, truths, skeleton: SkeletonModel) -> np.ndarray:
    """Per-frame mean point error (cm)."""
    P = to_positions(skeleton, estimates)
    T = to_positions(skeleton, truths)
    return 100.0 * np.linalg.norm(P - T, axis=2).mean(axis=1)


def accuracy_curve(errors, thresholds) -> np.ndarray:
    """Fraction of frames whose error is <= each threshold."""
    e = np.asarray(errors, dtype=float).ravel()
    if e.size == 0:
        raise ValueError("no errors given")
    return np.array([np.count_nonzero(e <= d) / e.size for d in thresholds])


def bone_length_error(positions, skeleton: SkeletonModel) -> np.ndarray:
    """Mean |segment length - configured length| in cm, one entry per segment (child points 1..20)."""
    P = to_positions(skeleton, positions)
    seg = P[:, 1:] - P[:, skeleton.parents[1:]]
    return 100.0 * np.abs(np.linalg.norm(seg, axis=2) - skeleton.bone_lengths[1:]).mean(axis=0)


@dataclass
class EvalReport:
    point_names: list
    rmse_cm: list
    mean_rmse_cm: float
    mean_error_cm: float
    thresholds_cm: list
    accuracy: list
    bone_error_cm: list
    max_bone_error_cm: float
    n_frames: int
    model_id: str = ""
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def table(self) -> str:
        out = io.StringIO()
        out.write(f"frames {self.n_frames}  mean RMSE {self.mean_rmse_cm:.2f} cm  "
                  f"mean error {self.mean_error_cm:.2f} cm  max bone error {self.max_bone_error_cm:.3g} cm\n")
        for name, v in zip(self.point_names, self.rmse_cm):
            out.write(f"  {name:<12} {v:8.2f}\n")
        return out.getvalue()

    def curve_csv(self) -> str:
        return "threshold_cm,fraction\n" + "".join(f"{d:g},{f:.6f}\n" for d, f in zip(self.thresholds_cm, self.accuracy))


def evaluate(estimates, truths, skeleton: SkeletonModel, thresholds=DEFAULT_THRESHOLDS_CM,
             model_id: str = "", config: Optional[dict] = None) -> EvalReport:
    rmse, mean = per_joint_rmse(estimates, truths, skeleton)
    errs = frame_errors(estimates, truths, skeleton)
    bone = bone_length_error(estimates, skeleton)
    return EvalReport(list(skeleton.names), [float(x) for x in rmse], mean, float(errs.mean()),
                      [float(d) for d in thresholds], [float(x) for x in accuracy_curve(errs, thresholds)],
                      [float(x) for x in bone], float(bone.max()), int(len(errs)), model_id, dict(config or {}))


# ---------------------------------------------------------------------------
# experiments

@dataclass
class SweepResult:
    axis: str
    value: object
    report: EvalReport
    train_trace: list       # training-set loss per stage, as recorded by fit
    test_trace: list        # test mean error (cm) after each stage


def _staged_errors(est: CascadedPoseRegressor, images, truths) -> list:
    T = forward_kinematics(est.skeleton_, truths)
    return [float(100.0 * np.linalg.norm(P - T, axis=2).mean())
            for _, _, P in est.staged_predict_positions(images)]


def run_sweep(train, test, base: CascadedPoseRegressor, axis: str, values: Optional[Sequence] = None,
              thresholds=DEFAULT_THRESHOLDS_CM) -> list:
    """One model per axis value (same seed), each scored on ``test``.

    ``train`` and ``test`` are datasets (anything with ``images`` and ``truths``).
    """
    if axis not in _SWEEP_PARAM:
        raise ValueError(f"unknown sweep axis {axis!r}; choose from {sorted(_SWEEP_PARAM)}")
    values = SWEEP_GRIDS[axis] if values is None else values
    out = []
    for v in values:
        param = v / 1000.0 if axis == "probe_offset_mm" else v
        est = clone(base).set_params(**{_SWEEP_PARAM[axis]: param}).fit(train.images, train.truths)
        report = evaluate(est.predict(test.images), test.truths, est.skeleton_, thresholds,
                          model_id=f"{axis}={v}", config=est.model_.config)
        out.append(SweepResult(axis, v, report, est.train_trace_, _staged_errors(est, test.images, test.truths)))
    return out


def compare_objectives(train, test, base: CascadedPoseRegressor, thresholds=DEFAULT_THRESHOLDS_CM) -> dict:
    """objective -> EvalReport, trained under identical budgets and seed."""
    out = {}
    for obj in ("gradient", "euler_delta", "position"):
        est = clone(base).set_params(objective=obj).fit(train.images, train.truths)
        out[obj] = evaluate(est.predict(test.images), test.truths, est.skeleton_, thresholds,
                            model_id=obj, config=est.model_.config)
    return out


def bone_table(reports: dict) -> str:
    return "".join(f"{k:<12} rmse {r.mean_rmse_cm:7.2f} cm  bone error {r.max_bone_error_cm:.3g} cm\n"
                   for k, r in reports.items())


@dataclass
class BenchReport:
    frames: int
    repetitions: int
    elapsed_s: float
    fps: float
    init_s: float                     # mean per frame, root initialization
    stage_s: list                     # mean per frame, each stage
    probes_mean: float
    probes_max: int
    probe_bound: int

    def to_dict(self) -> dict:
        return asdict(self)

    def table(self) -> str:
        return (f"frames {self.frames} x {self.repetitions}  elapsed {self.elapsed_s:.3f} s  fps {self.fps:.1f}\n"
                f"init {1e3 * self.init_s:.3f} ms  stages {1e3 * sum(self.stage_s):.3f} ms\n"
                f"pixel reads per frame: mean {self.probes_mean:.1f}  max {self.probes_max}  "
                f"bound {self.probe_bound}\n"
                "reference rows: 100 fps (kinematic model), 120 fps (without), 30 fps (sensor)\n")


def benchmark(model: CascadeModel, images, camera: CameraModel, skeleton: SkeletonModel,
              repetitions: int = 1, clock: Callable[[], float] = time.perf_counter, warmup: int = 1,
              stage_timing: bool = True) -> BenchReport:
    """Frame-at-a-time inference throughput on the calling thread."""
    images = list(images)
    if not images:
        raise ValueError("benchmark needs at least one frame")
    for im in images[:warmup]:
        infer_batch(model, [im], camera, skeleton)
    probes = np.zeros(len(images), dtype=np.int64)
    t0 = clock()
    for _ in range(repetitions):
        for i, im in enumerate(images):
            _, reads = infer_batch(model, [im], camera, skeleton)
            probes[i] = reads[0]
    elapsed = clock() - t0
    fps = len(images) * repetitions / elapsed if elapsed > 0 else float("inf")

    init_s, stage_s = 0.0, np.zeros(len(model.stages))
    if stage_timing:
        # the first stage mark also covers initialization, timed separately and subtracted
        for im in images:
            a = clock()
            initial_pose(im, camera, skeleton, model)
            init = clock() - a
            init_s += init
            marks = []
            prev = clock() + init
            infer_batch(model, [im], camera, skeleton, on_stage=lambda i, st, S: marks.append((i, clock())))
            for i, t in marks:
                stage_s[i] += t - prev
                prev = t
        init_s /= len(images)
        stage_s /= len(images)
    return BenchReport(len(images), repetitions, float(elapsed), float(fps), float(init_s),
                       [float(x) for x in stage_s], float(probes.mean()), int(probes.max()), model.probe_bound())
