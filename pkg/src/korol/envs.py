"""Synthetic desk-scale manipulation tasks.

Two position-controlled tasks on the unit workspace, rendered to 32x32
two-channel images (objects in channel 0, robot tip in channel 1):

  point_reach   planar tip moves to a randomly placed goal disk along a
                min-jerk profile.
  handle_slide  tip approaches a handle on a vertical track, closes its
                aperture through the grasp threshold right at the
                handle, and slides the handle down 0.2 units.

Scripted demonstrations are smooth but genuinely nonlinear in state, so
a polynomial lift is exercised beyond linear fits.  Ground-truth object
states are relational (placement and tip offsets; for handle_slide also
gripper clearance and handle displacement): they exist for oracle
baselines only, and `Trajectory.training_view` strips them so the
learned-feature pipeline can never touch them.

Execution is open loop: a predicted robot-state sequence is fed to the
environment directly (the inverse-dynamics controller of a position-
controlled robot is the identity).  The handle couples to the tip with
a smooth attachment weight once the aperture closes near it.
"""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import featnet, koopman
from .dct import make_input_stack

POINT_REACH = "point_reach"
HANDLE_SLIDE = "handle_slide"
_TASK_ENUM = {POINT_REACH: 1, HANDLE_SLIDE: 2}

GRASP_APERTURE = 0.5     # aperture below this can hold the handle
ATTACH_RADIUS = 0.10     # no coupling beyond this tip-handle distance
ATTACH_FULL_RADIUS = 0.04
CLOSED_APERTURE = 0.2    # aperture when fully closed on the handle
TRACK_X = 0.7
SLIDE_DISTANCE = 0.2

# Disjoint seed-stream tags for demonstration and evaluation placements.
_DEMO_TAG = 0x44454D4F
_EVAL_TAG = 0x4556414C

_KDT_MAGIC = b"KDT1"
_KDT_HEADER = struct.Struct("<4s7IQ")


class DataFormatError(ValueError):
    """Raised when a trajectory file is malformed."""


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    n: int
    m_gt: int
    episode_length: int = 60
    image_side: int = 32
    channels: int = 2
    success_threshold: float = 0.05

    def __post_init__(self):
        if self.episode_length < 2:
            raise ValueError("episode length must be >= 2")


def task_by_name(name: str) -> TaskSpec:
    if name == POINT_REACH:
        return TaskSpec(POINT_REACH, n=2, m_gt=4, success_threshold=0.05)
    if name == HANDLE_SLIDE:
        return TaskSpec(HANDLE_SLIDE, n=3, m_gt=4, success_threshold=0.15)
    raise ValueError(f"unknown task {name!r}")


@dataclass
class ObservedTrajectory:
    """What the learned-feature pipeline is allowed to see."""

    task_id: str
    seed: int
    x_r: np.ndarray     # (T, n)
    images: np.ndarray  # (T, C, H, W)


@dataclass
class Trajectory:
    task_id: str
    seed: int
    x_r: np.ndarray
    images: np.ndarray
    x_o_gt: np.ndarray  # (T, m_gt), oracle baselines only

    def training_view(self) -> ObservedTrajectory:
        return ObservedTrajectory(
            task_id=self.task_id, seed=self.seed, x_r=self.x_r, images=self.images
        )


# ---------------------------------------------------------------------------
# Environment dynamics
# ---------------------------------------------------------------------------


@dataclass
class EnvState:
    tip: np.ndarray       # (2,)
    aperture: float       # 1.0 = open; only meaningful for handle_slide
    obj: np.ndarray       # current goal / handle position
    mount: np.ndarray     # object placement at episode start


def sample_placement(task: TaskSpec, rng: np.random.Generator) -> np.ndarray:
    if task.task_id == POINT_REACH:
        return rng.uniform(0.2, 0.8, 2)
    return np.array([TRACK_X, rng.uniform(0.3, 0.7)])


def sample_start(task: TaskSpec, rng: np.random.Generator) -> np.ndarray:
    """Initial robot state; handle_slide varies its start pose and grip."""
    if task.task_id == POINT_REACH:
        return np.array([0.1, 0.1])
    return np.array(
        [rng.uniform(0.05, 0.2), rng.uniform(0.25, 0.75), rng.uniform(0.9, 1.0)]
    )


def init_env(task: TaskSpec, placement: np.ndarray, x_r0: np.ndarray) -> EnvState:
    placement = np.asarray(placement, dtype=np.float64)
    x_r0 = np.asarray(x_r0, dtype=np.float64)
    aperture = float(x_r0[2]) if task.task_id == HANDLE_SLIDE else 1.0
    return EnvState(
        tip=x_r0[:2].copy(),
        aperture=aperture,
        obj=placement.copy(),
        mount=placement.copy(),
    )


def _attach_weight(aperture: float, dist: float) -> float:
    grip = np.clip((GRASP_APERTURE - aperture) / (GRASP_APERTURE - CLOSED_APERTURE - 0.1), 0.0, 1.0)
    near = np.clip((ATTACH_RADIUS - dist) / (ATTACH_RADIUS - ATTACH_FULL_RADIUS), 0.0, 1.0)
    return float(grip * near)


def exec_state(task: TaskSpec, state: EnvState, x_r: np.ndarray) -> EnvState:
    """Position-controlled step: the robot assumes the commanded state.

    For handle_slide the handle rides with the tip in proportion to a
    smooth attachment weight (fully attached once the aperture is well
    below the grasp threshold and the tip is at the handle).
    """
    x_r = np.asarray(x_r, dtype=np.float64)
    tip = x_r[:2].copy()
    aperture = float(x_r[2]) if task.task_id == HANDLE_SLIDE else 1.0
    obj = state.obj.copy()
    if task.task_id == HANDLE_SLIDE:
        w = _attach_weight(aperture, float(np.linalg.norm(state.tip - state.obj)))
        obj[1] += w * (tip[1] - obj[1])
    return EnvState(tip=tip, aperture=aperture, obj=obj, mount=state.mount)


def gt_object_state(task: TaskSpec, state: EnvState) -> np.ndarray:
    """Relational ground-truth object state, oracle baselines only.

    point_reach: goal position and goal-tip offset.
    handle_slide: mount-tip offset, gripper clearance above the closed
    width, and how far the handle has slid from its mount.
    """
    if task.task_id == POINT_REACH:
        return np.concatenate([state.obj, state.obj - state.tip])
    u = state.mount - state.tip
    return np.array(
        [u[0], u[1], state.aperture - CLOSED_APERTURE, state.mount[1] - state.obj[1]]
    )


def is_success(task: TaskSpec, initial: EnvState, final: EnvState) -> bool:
    if task.task_id == POINT_REACH:
        return bool(np.linalg.norm(final.tip - final.obj) < task.success_threshold)
    return bool(initial.obj[1] - final.obj[1] >= task.success_threshold)


# ---------------------------------------------------------------------------
# Scripted demonstrations
# ---------------------------------------------------------------------------


def _min_jerk(tau: np.ndarray) -> np.ndarray:
    tau = np.clip(tau, 0.0, 1.0)
    return 10 * tau**3 - 15 * tau**4 + 6 * tau**5


def _reference_states(
    task: TaskSpec, placement: np.ndarray, x_r0: np.ndarray
) -> np.ndarray:
    """Expert robot-state sequence (T, n) for one placement."""
    T = task.episode_length
    tau = np.arange(T) / (T - 1)
    if task.task_id == POINT_REACH:
        s = _min_jerk(tau)
        return x_r0[None, :] + s[:, None] * (placement - x_r0)[None, :]

    # One smooth arc start -> handle -> 0.2 below, under a global
    # min-jerk progress; the aperture sweeps monotonically and crosses
    # the grasp threshold right as the tip passes the handle.
    start, a0 = x_r0[:2], x_r0[2]
    reach = float(np.linalg.norm(placement - start))
    total = reach + SLIDE_DISTANCE
    f_handle = reach / total
    f = _min_jerk(tau)
    tip = np.where(
        (f <= f_handle)[:, None],
        start[None, :] + (f / f_handle)[:, None] * (placement - start)[None, :],
        np.concatenate(
            [
                np.full((T, 1), placement[0]),
                (placement[1] - (f - f_handle) * total)[:, None],
            ],
            axis=1,
        ),
    )
    t_handle = float(np.interp(f_handle, f, tau))
    t1, t2 = t_handle - 0.03, t_handle + 0.06
    a = np.empty(T)
    glide = tau <= t1
    a[glide] = a0 + (0.55 - a0) * _min_jerk(tau[glide] / t1)
    closing = (tau > t1) & (tau <= t2)
    a[closing] = 0.55 + (CLOSED_APERTURE - 0.55) * _min_jerk((tau[closing] - t1) / (t2 - t1))
    squeeze = tau > t2
    a[squeeze] = CLOSED_APERTURE - 0.04 * _min_jerk((tau[squeeze] - t2) / (1.0 - t2))
    return np.column_stack([tip, a])


def gen_demo(task: TaskSpec, seed: int) -> Trajectory:
    """Scripted expert episode with a randomized object placement."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, _DEMO_TAG)))
    placement = sample_placement(task, rng)
    x_r0 = sample_start(task, rng)
    refs = _reference_states(task, placement, x_r0)

    env = init_env(task, placement, x_r0)
    images = np.empty(
        (task.episode_length, task.channels, task.image_side, task.image_side)
    )
    x_o_gt = np.empty((task.episode_length, task.m_gt))
    images[0] = render(task, env)
    x_o_gt[0] = gt_object_state(task, env)
    for t in range(1, task.episode_length):
        env = exec_state(task, env, refs[t])
        images[t] = render(task, env)
        x_o_gt[t] = gt_object_state(task, env)
    return Trajectory(
        task_id=task.task_id, seed=seed, x_r=refs, images=images, x_o_gt=x_o_gt
    )


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------


def _disk(side: int, center_xy: np.ndarray, radius: float) -> np.ndarray:
    """Anti-aliased disk; workspace (x, y) maps to (col, row)."""
    col = center_xy[0] * (side - 1)
    row = center_xy[1] * (side - 1)
    rr, cc = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    dist = np.sqrt((rr - row) ** 2 + (cc - col) ** 2)
    return np.clip(radius + 0.5 - dist, 0.0, 1.0)


def render(task: TaskSpec, state: EnvState) -> np.ndarray:
    """Two-channel image: objects, then the robot tip."""
    side = task.image_side
    obj = _disk(side, state.obj, 3.0)
    if task.task_id == HANDLE_SLIDE:
        track_col = TRACK_X * (side - 1)
        cc = np.arange(side, dtype=np.float64)
        track = 0.3 * np.clip(1.0 - np.abs(cc - track_col), 0.0, 1.0)
        obj = np.maximum(obj, np.broadcast_to(track, (side, side)))
    tip = _disk(side, state.tip, 2.0)
    return np.stack([obj, tip])


# ---------------------------------------------------------------------------
# Trajectory files (.kdt)
# ---------------------------------------------------------------------------


def save_trajectory(path, traj: Trajectory) -> None:
    task = task_by_name(traj.task_id)
    T, C, H, W = traj.images.shape
    header = _KDT_HEADER.pack(
        _KDT_MAGIC, _TASK_ENUM[traj.task_id], task.n, task.m_gt, T, H, W, C, traj.seed
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(traj.x_r, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(traj.x_o_gt, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(traj.images, dtype="<f8").tobytes())


def load_trajectory(path) -> Trajectory:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _KDT_HEADER.size or raw[:4] != _KDT_MAGIC:
        raise DataFormatError(f"{path}: not a trajectory file")
    _, task_enum, n, m_gt, T, H, W, C, seed = _KDT_HEADER.unpack_from(raw)
    names = {v: k for k, v in _TASK_ENUM.items()}
    if task_enum not in names:
        raise DataFormatError(f"{path}: unknown task enum {task_enum}")
    body = np.frombuffer(raw, dtype="<f8", offset=_KDT_HEADER.size)
    want = T * n + T * m_gt + T * C * H * W
    if body.size != want:
        raise DataFormatError(f"{path}: expected {want} floats, found {body.size}")
    x_r = body[: T * n].reshape(T, n).copy()
    x_o = body[T * n : T * (n + m_gt)].reshape(T, m_gt).copy()
    images = body[T * (n + m_gt) :].reshape(T, C, H, W).copy()
    return Trajectory(
        task_id=names[task_enum], seed=seed, x_r=x_r, images=images, x_o_gt=x_o
    )


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def _episode_success(
    task: TaskSpec,
    params,
    model: koopman.KoopmanModel,
    episode_seed,
    oracle_features: bool,
    closed_loop: bool,
) -> bool:
    rng = np.random.default_rng(episode_seed)
    placement = sample_placement(task, rng)
    x_r0 = sample_start(task, rng)
    env0 = init_env(task, placement, x_r0)
    use_frequency = params is not None and params.arch.in_channels == 2 * task.channels
    pad = model.spec.n - task.n

    def feature_of(env: EnvState) -> np.ndarray:
        if oracle_features:
            return gt_object_state(task, env)
        stack = make_input_stack(render(task, env), use_frequency)
        feat, _ = featnet.forward(params, stack.channels)
        return feat

    env = env0
    steps = task.episode_length - 1
    if closed_loop:
        x_r = np.concatenate([x_r0, np.zeros(pad)])
        for _ in range(steps):
            x_o = feature_of(env)
            x_r, _ = koopman.step(model, x_r, x_o)
            if not np.all(np.isfinite(x_r)) or np.max(np.abs(x_r)) > koopman.DIVERGENCE_LIMIT:
                return False
            env = exec_state(task, env, x_r[: task.n])
    else:
        x_o0 = feature_of(env0)
        result = koopman.rollout(
            model, np.concatenate([x_r0, np.zeros(pad)]), x_o0, steps
        )
        if result.diverged or result.steps < steps:
            return False
        for t in range(steps):
            env = exec_state(task, env, result.x_r[t, : task.n])
    return is_success(task, env0, env)


def evaluate(
    task: TaskSpec,
    params,
    model: koopman.KoopmanModel,
    episodes: int,
    seed: int,
    oracle_features: bool = False,
    closed_loop: bool = False,
    workers: int = 1,
) -> float:
    """Success rate over freshly sampled, demonstration-disjoint episodes.

    params may be None when oracle_features is set; the model's feature
    dimension must then equal the task's ground-truth state dimension.
    Divergent rollouts count as failures.
    """
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    if oracle_features and model.spec.m != task.m_gt:
        raise ValueError("oracle features require a model fit on GT object states")
    if not oracle_features and params is None:
        raise ValueError("learned-feature evaluation requires params")

    seeds = [np.random.SeedSequence((seed, i, _EVAL_TAG)) for i in range(episodes)]

    def run(ep_seed):
        return _episode_success(task, params, model, ep_seed, oracle_features, closed_loop)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, seeds))
    else:
        results = [run(s) for s in seeds]
    return float(np.mean(results))
