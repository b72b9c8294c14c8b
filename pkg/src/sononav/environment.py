"""Episode dynamics for virtual probe navigation.

Implements the constrained state transition (surface tracking, tilt limit),
the improvement-shaped reward with optional confidence term, hierarchical
step-size scheduling, and the four termination conditions. One environment
instance owns one episode at a time; volumes and surface maps are shared
read-only.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .confidence import ConfidenceParams, RoiRect, compute_confidence_map, roi_confidence
from .pose import (
    Action,
    DegenerateProjectionError,
    Pose,
    StepSizes,
    apply_action,
    pos_distance,
    pose_improvement,
    quat_angle,
    tilt_angle,
    yawed_base_orientation,
)
from .volume import (
    OutsideFootprintError,
    SurfaceMap,
    Volume,
    nonzero_fraction,
    sample_slice,
    surface_lookup,
)


class EpisodeDoneError(RuntimeError):
    """step() was called on a finished episode."""


class ResetSamplingError(RuntimeError):
    """No valid start pose found within the resample budget."""


@dataclass(frozen=True)
class EnvConfig:
    """Environment constants; defaults are the full-scale values."""

    image_h: int = 150
    image_w: int = 150
    pixel_spacing_mm: float = 0.5
    frame_stack: int = 4
    roi: RoiRect = field(default_factory=lambda: RoiRect.centered(150, 150, 110, 90))
    tilt_limit_deg: float = 30.0
    oov_threshold: float = 0.30
    goal_pos_tol_mm: float = 1.0
    goal_ang_tol_deg: float = 1.0
    success_pos_tol_mm: float = 10.0
    success_ang_tol_deg: float = 10.0
    max_steps: int = 120
    pose_buffer_len: int = 30
    convergence_threshold: float = 0.01
    convergence_pairs: int = 3
    init_d_step_mm: float = 5.0
    init_theta_step_deg: float = 5.0
    init_x_frac: tuple[float, float] = (0.3, 0.7)
    init_y_frac: tuple[float, float] = (0.2, 0.8)
    confidence_in_reward: bool = False
    always_compute_confidence: bool = False
    confidence: ConfidenceParams = field(default_factory=ConfidenceParams)

    def __post_init__(self):
        self.roi.validate(self.image_h, self.image_w)
        if self.frame_stack < 1 or self.max_steps < 1 or self.pose_buffer_len < 1:
            raise ValueError("frame_stack, max_steps, pose_buffer_len must be >= 1")
        for name in (
            "pixel_spacing_mm",
            "tilt_limit_deg",
            "oov_threshold",
            "goal_pos_tol_mm",
            "goal_ang_tol_deg",
            "success_pos_tol_mm",
            "success_ang_tol_deg",
            "convergence_threshold",
            "init_d_step_mm",
            "init_theta_step_deg",
        ):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    @classmethod
    def desk(cls, confidence_in_reward: bool = False, **overrides) -> "EnvConfig":
        """Reduced 64x64 configuration for desk-scale runs: proportional
        ROI and a downsampled confidence solve."""
        defaults = dict(
            image_h=64,
            image_w=64,
            pixel_spacing_mm=1.0,
            roi=RoiRect.centered(64, 64, 47, 38),
            confidence_in_reward=confidence_in_reward,
            confidence=ConfidenceParams(downsample=2),
        )
        defaults.update(overrides)
        return cls(**defaults)

    @property
    def uses_confidence(self) -> bool:
        return self.confidence_in_reward or self.always_compute_confidence


@dataclass(frozen=True)
class StepInfo:
    """Diagnostics for one transition. beta_deg is the tilt of the
    unconstrained candidate pose (the value checked against the limit);
    c_roi / delta_c are NaN when the confidence map was not computed."""

    d_mm: float
    theta_deg: float
    c_roi: float
    delta_d: float
    delta_theta: float
    delta_c: float
    beta_deg: float
    reason: str | None
    d_step_mm: float
    theta_step_deg: float


@dataclass(frozen=True)
class StepOutcome:
    observation: np.ndarray
    reward: float
    done: bool
    info: StepInfo


def compute_reward(
    out_of_volume: bool,
    tilt_violation: bool,
    goal_reached: bool,
    delta_d: float,
    delta_theta: float,
    delta_c: float | None = None,
) -> float:
    """Reward cases in precedence order: leaving the volume, attempting a
    tilt past the limit, reaching the goal, otherwise the sum of the
    normalized improvements (confidence included when delta_c is given)."""
    if out_of_volume:
        return -1.0
    if tilt_violation:
        return -0.5
    if goal_reached:
        return 10.0
    shaped = delta_d + delta_theta
    if delta_c is not None:
        shaped += delta_c
    return shaped


def check_goal(d_mm: float, theta_deg: float, cfg: EnvConfig) -> bool:
    """Task accomplishment: both tolerances met (inclusive)."""
    return d_mm <= cfg.goal_pos_tol_mm and theta_deg <= cfg.goal_ang_tol_deg


def check_termination(
    steps_taken: int,
    sizes: StepSizes,
    out_of_volume: bool,
    goal_case: bool,
    eval_mode: bool,
    max_steps: int,
) -> tuple[bool, str | None]:
    """Episode end test. In evaluation mode the goal condition is dropped
    (its true location is unknown at test time)."""
    if out_of_volume:
        return True, "out_of_volume"
    if goal_case and not eval_mode:
        return True, "goal"
    if sizes.exhausted:
        return True, "step_exhausted"
    if steps_taken >= max_steps:
        return True, "max_steps"
    return False, None


def encode_pose(pose: Pose, diagonal_mm: float) -> np.ndarray:
    """Dimensionless 7-vector for convergence detection: position over the
    volume diagonal, plus the quaternion."""
    return np.concatenate([pose.position / diagonal_mm, pose.orientation])


def convergence_fired(
    encoded: np.ndarray, threshold: float, pairs_needed: int
) -> bool:
    """True when at least `pairs_needed` pairwise distances among the
    buffered pose vectors fall below `threshold`."""
    n = len(encoded)
    if n < 2:
        return False
    diffs = encoded[:, None, :] - encoded[None, :, :]
    dist = np.sqrt((diffs**2).sum(-1))
    close = int((dist[np.triu_indices(n, k=1)] < threshold).sum())
    return close >= pairs_needed


class StepScheduler:
    """Coarse-to-fine step sizes: a rolling pose buffer decrements both
    sizes one unit whenever the agent has converged at the current scale."""

    def __init__(self, cfg: EnvConfig, diagonal_mm: float):
        self._cfg = cfg
        self._diag = diagonal_mm
        self._buffer: deque[np.ndarray] = deque(maxlen=cfg.pose_buffer_len)
        self.current = StepSizes(cfg.init_d_step_mm, cfg.init_theta_step_deg)

    def reset(self) -> None:
        self._buffer.clear()
        self.current = StepSizes(self._cfg.init_d_step_mm, self._cfg.init_theta_step_deg)

    def push(self, pose: Pose) -> bool:
        """Record a pose; returns True when a decrement fired."""
        self._buffer.append(encode_pose(pose, self._diag))
        if self.current.exhausted:
            return False
        if convergence_fired(
            np.array(self._buffer),
            self._cfg.convergence_threshold,
            self._cfg.convergence_pairs,
        ):
            self.current = self.current.decremented()
            self._buffer.clear()
            return True
        return False


class ProbeEnv:
    """One navigation episode at a time over a (volume, surface, goal)."""

    def __init__(self, cfg: EnvConfig, eval_mode: bool = False):
        self.cfg = cfg
        self.eval_mode = eval_mode
        self._episode_active = False

    # -- episode lifecycle -------------------------------------------------

    def reset(
        self,
        volume: Volume,
        surface: SurfaceMap,
        goal: Pose,
        rng: np.random.Generator,
        start_pose: Pose | None = None,
    ) -> np.ndarray:
        """Start an episode; returns the initial observation (the first
        frame replicated across the stack).

        The start pose is sampled in the center region of the volume with
        the probe pointing straight down at a uniform random yaw, its
        height slaved to the surface. An explicit start_pose skips the
        sampling (its z is snapped to the surface too).
        """
        cfg = self.cfg
        self._volume = volume
        self._surface = surface
        self._goal = goal
        self._scheduler = StepScheduler(cfg, volume.diagonal_mm)
        if start_pose is not None:
            z = surface_lookup(surface, start_pose.position[0], start_pose.position[1])
            pose = Pose(
                np.array([start_pose.position[0], start_pose.position[1], z]),
                start_pose.orientation,
            )
        else:
            pose = self._sample_start(rng)
        self._pose = pose
        img = self._image(pose)
        self._frames = deque([img] * cfg.frame_stack, maxlen=cfg.frame_stack)
        self._d, self._theta = self.goal_metrics(pose)
        self._c = self._confidence(img) if cfg.uses_confidence else None
        self._steps_taken = 0
        self._done = False
        self._episode_active = True
        self._scheduler.push(pose)
        return self.observation()

    def _sample_start(self, rng: np.random.Generator) -> Pose:
        cfg = self.cfg
        ox, oy = self._volume.origin[0], self._volume.origin[1]
        width, length = self._volume.extent_mm[0], self._volume.extent_mm[1]
        for _ in range(100):
            x = ox + rng.uniform(*cfg.init_x_frac) * width
            y = oy + rng.uniform(*cfg.init_y_frac) * length
            yaw = rng.uniform(0.0, 360.0)
            try:
                z = surface_lookup(self._surface, x, y)
            except OutsideFootprintError:
                continue
            return Pose(np.array([x, y, z]), yawed_base_orientation(yaw))
        raise ResetSamplingError("no valid surface point found in 100 attempts")

    def step(self, action: Action) -> StepOutcome:
        if not self._episode_active:
            raise EpisodeDoneError("reset() must be called before step()")
        if self._done:
            raise EpisodeDoneError("episode already terminated")
        cfg = self.cfg
        action = Action(action)
        sizes = self._scheduler.current
        prev_d, prev_theta, prev_c = self._d, self._theta, self._c

        candidate = self._candidate(action, sizes)
        beta = tilt_angle(candidate)
        tilt_violation = beta > cfg.tilt_limit_deg
        pose, out_of_volume = self._restrict(candidate, tilt_violation)

        img = self._image(pose)
        if nonzero_fraction(img) < cfg.oov_threshold:
            out_of_volume = True
        self._frames.append(img)

        d, theta = self.goal_metrics(pose)
        delta_d, delta_theta = pose_improvement(prev_d, d, prev_theta, theta, sizes)
        c = self._confidence(img) if cfg.uses_confidence else None
        delta_c = None if c is None else c - prev_c
        goal_reached = check_goal(d, theta, cfg)
        reward = compute_reward(
            out_of_volume,
            tilt_violation,
            goal_reached,
            delta_d,
            delta_theta,
            delta_c if cfg.confidence_in_reward else None,
        )
        goal_case = goal_reached and not out_of_volume and not tilt_violation

        self._pose = pose
        self._d, self._theta, self._c = d, theta, c
        self._scheduler.push(pose)
        self._steps_taken += 1
        done, reason = check_termination(
            self._steps_taken,
            self._scheduler.current,
            out_of_volume,
            goal_case,
            self.eval_mode,
            cfg.max_steps,
        )
        self._done = done
        info = StepInfo(
            d_mm=d,
            theta_deg=theta,
            c_roi=math.nan if c is None else c,
            delta_d=delta_d,
            delta_theta=delta_theta,
            delta_c=math.nan if delta_c is None else delta_c,
            beta_deg=beta,
            reason=reason,
            d_step_mm=self._scheduler.current.d_mm,
            theta_step_deg=self._scheduler.current.theta_deg,
        )
        return StepOutcome(self.observation(), reward, done, info)

    # -- pose update under restrictions -------------------------------------

    def _candidate(self, action: Action, sizes: StepSizes) -> Pose:
        try:
            return apply_action(self._pose, action, sizes)
        except DegenerateProjectionError:
            # Vertical probe axis: the action becomes a no-op.
            return self._pose

    def _restrict(self, candidate: Pose, tilt_violation: bool) -> tuple[Pose, bool]:
        """Surface tracking plus tilt reversion; flags an out-of-footprint
        move as out-of-volume."""
        orientation = self._pose.orientation if tilt_violation else candidate.orientation
        x, y = candidate.position[0], candidate.position[1]
        out = False
        try:
            z = surface_lookup(self._surface, x, y)
        except OutsideFootprintError:
            z = self._pose.position[2]
            out = True
        return Pose(np.array([x, y, z]), orientation), out

    def simulate_action(self, action: Action) -> Pose:
        """Resulting pose of an action under the restrictions, without
        committing anything (used by the demonstration expert)."""
        candidate = self._candidate(Action(action), self._scheduler.current)
        pose, _ = self._restrict(candidate, tilt_angle(candidate) > self.cfg.tilt_limit_deg)
        return pose

    # -- observations & metrics ---------------------------------------------

    def _image(self, pose: Pose) -> np.ndarray:
        return sample_slice(
            self._volume, pose, self.cfg.image_h, self.cfg.image_w, self.cfg.pixel_spacing_mm
        )

    def _confidence(self, img: np.ndarray) -> float:
        conf_map = compute_confidence_map(img, self.cfg.confidence)
        return roi_confidence(conf_map, self.cfg.roi)

    def observation(self) -> np.ndarray:
        """Stack of the most recent frames, oldest first: (m, h, w) uint8."""
        return np.stack(self._frames)

    def goal_metrics(self, pose: Pose) -> tuple[float, float]:
        return (
            pos_distance(pose.position, self._goal.position),
            quat_angle(pose.orientation, self._goal.orientation),
        )

    @property
    def pose(self) -> Pose:
        return self._pose

    @property
    def goal(self) -> Pose:
        return self._goal

    @property
    def done(self) -> bool:
        return self._done

    @property
    def steps_taken(self) -> int:
        return self._steps_taken

    @property
    def step_sizes(self) -> StepSizes:
        return self._scheduler.current

    @property
    def last_frame(self) -> np.ndarray:
        return self._frames[-1]

    @property
    def distance_mm(self) -> float:
        return self._d

    @property
    def angle_deg(self) -> float:
        return self._theta

    @property
    def confidence_value(self) -> float:
        return math.nan if self._c is None else self._c
