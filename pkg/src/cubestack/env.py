"""High-level MDP: one contact-placement decision per goal waypoint window.

The observation packs cube pose, the active goal waypoint, and the three
fingertip positions (19 numbers, fixed order).  The action is the box
[-1, 1]^6: in-face (u, v) coordinates per finger; faces themselves are
assigned geometrically (each finger takes the vertical side face it is
looking at), keeping the learned action space fixed and continuous.

``step`` maps the action to contact specs, runs the controller state
machine through the waypoint's time window inside the simulator, and
accumulates the tracking reward once per control tick.  Contacts are
re-selected at every waypoint and after any drop (regrasp), with the same
action re-mapped at the cube's current pose.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .control import (
    Controller,
    ControllerConfig,
    ControllerState,
    GainSet,
    Primitive,
    Waypoint,
)
from .geom import (
    ContactSpec,
    CubeGeometry,
    FaceId,
    Pose,
    SIDE_FACES,
    quat_from_axis_angle,
    quat_normalize,
    quat_to_matrix,
)
from .kinematics import default_fingers
from .sac import reward
from .simulator import SimConfig, SimulationDivergedError, Simulator

OBS_DIM = 19
ACT_DIM = 6


@dataclass(frozen=True)
class RandomizationConfig:
    """Multiplicative physics ranges (resampled at reset) plus sensor noise."""

    enabled: bool = False
    mass_range: tuple[float, float] = (0.8, 1.25)
    friction_range: tuple[float, float] = (0.7, 1.3)
    tip_stiffness_range: tuple[float, float] = (0.7, 1.4)
    obs_noise_std: float = 0.0

    def __post_init__(self):
        for name in ("mass_range", "friction_range", "tip_stiffness_range"):
            lo, hi = getattr(self, name)
            if not (0.5 <= lo <= hi <= 2.0):
                raise ValueError(f"{name} must lie within [0.5, 2.0]")
        if self.obs_noise_std < 0:
            raise ValueError("obs_noise_std must be >= 0")


@dataclass(frozen=True)
class EnvConfig:
    n_waypoints: int = 4
    waypoint_duration: float = 6.0
    goal_radius_frac: float = 0.7  # of the arena radius
    goal_height_range: tuple[float, float] = (0.04, 0.15)
    max_waypoint_step: float = 0.15
    spawn_radius_frac: float = 0.5
    decimation: int = 10
    # tips rest at radius 0.105, height 0.10: clear of any resting cube
    home_q: tuple[float, float, float] = (0.0, 0.269, 2.505)
    base_radius: float = 0.15
    base_height: float = 0.20
    link_lengths: tuple[float, float, float] = (0.04, 0.16, 0.16)
    link_mass: float = 0.2


def sample_goal_trajectory(rng: np.random.Generator, cfg: EnvConfig,
                           arena_radius: float) -> list[Waypoint]:
    """K waypoints uniform in a cylinder, consecutive spacing capped."""
    radius = cfg.goal_radius_frac * arena_radius
    lo_h, hi_h = cfg.goal_height_range
    waypoints = []
    prev = None
    while len(waypoints) < cfg.n_waypoints:
        r = radius * np.sqrt(rng.uniform())
        phi = rng.uniform(0.0, 2.0 * np.pi)
        p = np.array([r * np.cos(phi), r * np.sin(phi), rng.uniform(lo_h, hi_h)])
        if prev is not None and np.linalg.norm(p - prev) > cfg.max_waypoint_step:
            continue
        waypoints.append(Waypoint(p, cfg.waypoint_duration))
        prev = p
    return waypoints


def save_goal_trajectory(path, waypoints: list[Waypoint]):
    """One waypoint per line: x y z duration."""
    import os

    tmp = str(path) + ".tmp"
    with open(tmp, "w") as fh:
        for w in waypoints:
            fh.write(
                f"{w.position[0]:.9f} {w.position[1]:.9f} {w.position[2]:.9f} "
                f"{w.duration:.6f}\n"
            )
    os.replace(tmp, path)


def load_goal_trajectory(path) -> list[Waypoint]:
    waypoints = []
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 4:
                raise ValueError(f"{path}:{ln}: expected 'x y z duration'")
            x, y, z, dur = (float(v) for v in parts)
            if dur <= 0:
                raise ValueError(f"{path}:{ln}: duration must be > 0")
            waypoints.append(Waypoint(np.array([x, y, z]), dur))
    if not waypoints:
        raise ValueError(f"{path}: empty goal trajectory")
    return waypoints


def assign_faces(cube_pose: Pose, finger_bases) -> tuple[FaceId, FaceId, FaceId]:
    """Give each finger the vertical side face it is looking at.

    Candidate faces are the four whose world normals are most horizontal
    (top/bottom are never assigned).  Each finger scores candidates by the
    dot of the face's outward normal with the horizontal direction from the
    cube center to the finger base, i.e. it grabs the face facing it.
    Conflicts fall back to the next-best free face in fixed finger order.
    """
    R = quat_to_matrix(cube_pose.orientation)
    normals = {f: R @ np.array(_face_normal(f)) for f in FaceId}
    # drop the face pair most aligned with gravity
    verticality = {f: abs(normals[f][2]) for f in FaceId}
    axis_vert = [sum(verticality[f] for f in pair) for pair in
                 ((FaceId.PX, FaceId.NX), (FaceId.PY, FaceId.NY), (FaceId.PZ, FaceId.NZ))]
    top_axis = int(np.argmax(axis_vert))
    candidates = [f for f in FaceId if f.axis != top_axis]

    taken: set[FaceId] = set()
    chosen = []
    for base in finger_bases:
        d = np.asarray(base, dtype=np.float64)[:2] - cube_pose.position[:2]
        norm = np.linalg.norm(d)
        d = d / norm if norm > 1e-9 else np.array([1.0, 0.0])
        scored = sorted(
            candidates,
            key=lambda f: (-(normals[f][0] * d[0] + normals[f][1] * d[1]), int(f)),
        )
        pick = next((f for f in scored if f not in taken), scored[0])
        taken.add(pick)
        chosen.append(pick)
    return tuple(chosen)


def _face_normal(face: FaceId):
    n = [0.0, 0.0, 0.0]
    n[face.axis] = face.sign
    return n


class CubeEnv:
    """Single-caller environment; run several instances for parallel rollout."""

    def __init__(
        self,
        env_cfg: EnvConfig | None = None,
        sim_cfg: SimConfig | None = None,
        geom: CubeGeometry | None = None,
        gains: GainSet | None = None,
        ctrl_cfg: ControllerConfig | None = None,
        rand_cfg: RandomizationConfig | None = None,
    ):
        self.env_cfg = env_cfg or EnvConfig()
        self.base_sim_cfg = sim_cfg or SimConfig()
        self.base_geom = geom or CubeGeometry()
        self.gains = gains or GainSet()
        self.ctrl_cfg = ctrl_cfg or ControllerConfig(
            control_dt=self.base_sim_cfg.dt * self.env_cfg.decimation
        )
        self.rand_cfg = rand_cfg or RandomizationConfig()
        self.fingers = default_fingers(
            base_radius=self.env_cfg.base_radius,
            base_height=self.env_cfg.base_height,
            link_lengths=self.env_cfg.link_lengths,
            link_mass=self.env_cfg.link_mass,
        )
        self._rng = np.random.default_rng(0)
        self.sim: Simulator | None = None
        self.controller: Controller | None = None
        self.state = None
        self.waypoints: list[Waypoint] | None = None
        self.waypoint_index = 0
        self.cstate = ControllerState()
        self._action = None
        self.trace: list | None = None
        self.last_info: dict = {}

    # -- plumbing ---------------------------------------------------------

    @property
    def finger_bases(self):
        return [f.base_pose.position for f in self.fingers]

    def _build_scene(self):
        geom = self.base_geom
        sim_cfg = self.base_sim_cfg
        if self.rand_cfg.enabled:
            rc = self.rand_cfg
            geom = CubeGeometry(
                edge_length=geom.edge_length,
                mass=geom.mass * self._rng.uniform(*rc.mass_range),
                friction_coeff=min(
                    2.0, geom.friction_coeff * self._rng.uniform(*rc.friction_range)
                ),
            )
            sim_cfg = replace(
                sim_cfg,
                tip_stiffness=sim_cfg.tip_stiffness
                * self._rng.uniform(*rc.tip_stiffness_range),
            )
        self.geom = geom
        self.sim = Simulator(sim_cfg, geom, self.fingers)
        self.controller = Controller(self.sim, self.gains, self.ctrl_cfg)

    def _observe(self) -> np.ndarray:
        obs = np.empty(OBS_DIM)
        obs[0:3] = self.state.cube_pose.position
        obs[3:7] = self.state.cube_pose.orientation
        obs[7:10] = self.waypoints[self.waypoint_index].position
        obs[10:19] = self.sim.tip_positions(self.state).reshape(-1)
        if self.rand_cfg.enabled and self.rand_cfg.obs_noise_std > 0:
            obs = obs + self._rng.normal(0.0, self.rand_cfg.obs_noise_std, OBS_DIM)
            obs[3:7] = quat_normalize(obs[3:7])
        return obs

    def _decision(self) -> tuple[ContactSpec, ContactSpec, ContactSpec]:
        """Map the stored window action onto faces at the current cube pose."""
        faces = assign_faces(self.state.cube_pose, self.finger_bases)
        a = self._action
        return tuple(
            ContactSpec(faces[i], (a[2 * i], a[2 * i + 1])) for i in range(3)
        )

    # -- MDP surface --------------------------------------------------------

    def reset(self, seed: int | None = None,
              goal_trajectory: list[Waypoint] | None = None) -> np.ndarray:
        if seed is not None:
            self._rng = np.random.default_rng(seed)
        self._build_scene()
        cfg = self.env_cfg
        arena = self.sim.cfg.arena_radius
        r = cfg.spawn_radius_frac * arena * np.sqrt(self._rng.uniform())
        phi = self._rng.uniform(0.0, 2.0 * np.pi)
        yaw = self._rng.uniform(0.0, 2.0 * np.pi)
        pose = Pose(
            np.array([r * np.cos(phi), r * np.sin(phi), self.geom.half_edge]),
            quat_from_axis_angle([0.0, 0.0, 1.0], yaw),
        )
        if goal_trajectory is not None:
            self.waypoints = list(goal_trajectory)
        else:
            self.waypoints = sample_goal_trajectory(self._rng, cfg, arena)
        self.waypoint_index = 0
        self.state = self.sim.initial_state(pose, np.tile(cfg.home_q, 3))
        self.cstate = ControllerState()
        self._action = None
        self.last_info = {}
        return self._observe()

    def step(self, action) -> tuple[np.ndarray, float, bool, dict]:
        """Execute one waypoint window under the given contact action."""
        if self.state is None:
            raise RuntimeError("call reset() before step()")
        a = np.asarray(action, dtype=np.float64)
        if a.shape != (ACT_DIM,) or not np.all(np.isfinite(a)):
            raise ValueError(f"action must be {ACT_DIM} finite values in [-1, 1]")
        a = np.clip(a, -1.0, 1.0)
        self._action = a

        cfg = self.env_cfg
        waypoint = self.waypoints[self.waypoint_index]
        dt_ctrl = self.sim.cfg.dt * cfg.decimation
        n_ticks = max(1, int(round(waypoint.duration / dt_ctrl)))
        # fresh primitive cycle for every window: contacts are re-selected
        self.cstate = ControllerState()
        total_reward = 0.0
        select_count = 0
        diverged = False

        for k in range(n_ticks):
            decision = None
            if self.cstate.primitive is Primitive.SELECT_CONTACTS:
                decision = self._decision()
                select_count += 1
            time_left = waypoint.duration - k * dt_ctrl
            torques, self.cstate = self.controller.tick(
                self.cstate, self.state, waypoint, decision, time_left=time_left
            )
            try:
                for _ in range(cfg.decimation):
                    self.state = self.sim.step(self.state, torques)
            except SimulationDivergedError:
                diverged = True
                break
            r = reward(waypoint.position, self.state.cube_pose.position)
            total_reward += r
            if self.trace is not None:
                tips = self.sim.tip_positions(self.state).reshape(-1)
                self.trace.append(
                    (
                        self.state.time,
                        np.concatenate(
                            [
                                self.state.cube_pose.position,
                                self.state.cube_pose.orientation,
                            ]
                        ),
                        tips,
                        torques.copy(),
                        self.cstate.primitive.value,
                        r,
                    )
                )

        self.waypoint_index += 1
        done = diverged or self.waypoint_index >= len(self.waypoints)
        info = {
            "waypoint_index": self.waypoint_index - 1,
            "select_count": select_count,
            "regrasps": self.cstate.regrasp_count,
            "failures": self.cstate.failure_count,
            "diverged": diverged,
            "final_distance": float(
                np.linalg.norm(
                    waypoint.position - self.state.cube_pose.position
                )
            ),
        }
        self.last_info = info
        if done:
            obs = self._terminal_observation()
        else:
            obs = self._observe()
        return obs, total_reward, done, info

    def _terminal_observation(self) -> np.ndarray:
        obs = np.empty(OBS_DIM)
        obs[0:3] = self.state.cube_pose.position
        obs[3:7] = self.state.cube_pose.orientation
        obs[7:10] = self.waypoints[-1].position
        obs[10:19] = self.sim.tip_positions(self.state).reshape(-1)
        return obs
