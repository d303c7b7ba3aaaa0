"""Semi-implicit rigid-body simulation of the cube and finger joints.

Contacts use a penalty model: spring-damper normal forces with Coulomb
friction.  Tip-cube friction is an anchored tangential spring (the anchor
point rides on the cube and slides when the Coulomb cap is hit), which
lets a grasp hold the cube statically instead of creeping; cube-floor
friction is tangential damping clamped to the Coulomb cap, which is
sufficient for the flat arena floor.  Contact anchor memory is part of
:class:`WorldState` so stepping stays a pure state-to-state map.

Fingers integrate as three independent 3-DoF chains with a constant
effective inertia per joint, viscous joint damping, link gravity (point
masses at link midpoints), and the reaction of tip contact forces.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .geom import (
    CubeGeometry,
    ContactSpec,
    Pose,
    cross3,
    quat_from_rotvec,
    quat_multiply,
    quat_normalize,
    quat_to_matrix,
    require_finite,
)
from .kinematics import (
    FingerModel,
    JointState,
    fk_frames,
    link_gravity_torques,
    point_jacobian,
)

_CUBE_CORNERS = np.array(
    [[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)],
    dtype=np.float64,
)


class SimulationDivergedError(RuntimeError):
    """Raised when the integrator detects a blown-up state."""


@dataclass(frozen=True)
class SimConfig:
    dt: float = 1e-3
    gravity: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -9.81]))
    # damping coefficients sit inside the explicit-integration stability
    # bounds for the default cube (c*dt/m and c*r^2*dt/I below 2 with margin)
    floor_stiffness: float = 8000.0
    floor_damping: float = 20.0
    floor_tangential_damping: float = 12.0
    # damping fades in over this depth so shallow contacts cannot enter a
    # bounce limit cycle (force flicker at sub-rest penetrations)
    damping_ramp: float = 2e-4
    tip_stiffness: float = 1200.0
    tip_damping: float = 8.0
    tip_tangential_stiffness: float = 1000.0
    tip_tangential_damping: float = 5.0
    tip_radius: float = 0.0175
    arena_radius: float = 0.19
    joint_inertia: float = 0.004
    joint_damping: float = 0.05
    torque_limit: float = 1.0
    speed_cap: float = 20.0
    angvel_cap: float = 200.0

    def __post_init__(self):
        if not (0.0 < self.dt <= 0.01):
            raise ValueError(f"dt must be in (0, 0.01], got {self.dt}")
        for name in ("floor_stiffness", "tip_stiffness", "joint_inertia", "torque_limit"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        object.__setattr__(self, "gravity", require_finite(self.gravity, "gravity"))


@dataclass(frozen=True)
class WorldState:
    cube_pose: Pose
    cube_linvel: np.ndarray
    cube_angvel: np.ndarray
    joints: JointState
    time: float = 0.0
    # cube-local tangential friction anchors per tip; NaN rows = no contact
    tip_anchors: np.ndarray = field(default_factory=lambda: np.full((3, 3), np.nan))

    def __post_init__(self):
        object.__setattr__(
            self, "cube_linvel", require_finite(self.cube_linvel, "cube_linvel")
        )
        object.__setattr__(
            self, "cube_angvel", require_finite(self.cube_angvel, "cube_angvel")
        )
        anchors = np.asarray(self.tip_anchors, dtype=np.float64)
        if anchors.shape != (3, 3):
            raise ValueError("tip_anchors must be (3, 3)")
        object.__setattr__(self, "tip_anchors", anchors)


@dataclass(frozen=True)
class ContactState:
    """Per-tip contact snapshot for the grasp layer and regrasp triggers."""

    in_contact: bool
    point: np.ndarray  # world contact point on the cube surface
    normal: np.ndarray  # world outward cube normal at the contact
    force: np.ndarray  # world force currently applied by the tip on the cube
    penetration: float


def _sphere_cube_contact(center_local, half_edge, radius):
    """Closest-feature test of a sphere center against the cube, cube frame.

    Returns (penetration, outward normal, surface point), penetration <= 0
    meaning no contact.
    """
    clamped = np.clip(center_local, -half_edge, half_edge)
    delta = center_local - clamped
    dist2 = float(delta @ delta)
    if dist2 > 0.0:
        dist = np.sqrt(dist2)
        return radius - dist, delta / dist, clamped
    # center inside the cube: push out through the nearest face
    gaps = half_edge - np.abs(center_local)
    ax = int(np.argmin(gaps))
    normal = np.zeros(3)
    normal[ax] = 1.0 if center_local[ax] >= 0.0 else -1.0
    surface = center_local.copy()
    surface[ax] = half_edge * normal[ax]
    return radius + gaps[ax], normal, surface


class Simulator:
    """Owns the immutable scene (config, cube parameters, finger models).

    ``step`` maps a :class:`WorldState` plus joint torques to the next
    state; it mutates nothing, so independent simulations can run
    concurrently (a single state must not be advanced by two callers at
    once).
    """

    def __init__(self, cfg: SimConfig, geom: CubeGeometry, fingers: list[FingerModel]):
        if len(fingers) != 3:
            raise ValueError("expected exactly three fingers")
        self.cfg = cfg
        self.geom = geom
        self.fingers = list(fingers)
        self._corners_local = geom.half_edge * _CUBE_CORNERS

    # ------------------------------------------------------------------
    # contact forces
    # ------------------------------------------------------------------

    def _tip_contacts(self, state: WorldState, frames, R: np.ndarray):
        """Tip-cube penalty forces.

        Returns (per-tip ContactState, force/torque accumulators on the
        cube, per-finger joint reaction torques, updated anchors).
        """
        cfg, geom = self.cfg, self.geom
        pose = state.cube_pose
        com = pose.position
        reports = []
        cube_force = np.zeros(3)
        cube_torque = np.zeros(3)
        joint_reactions = np.zeros(9)
        new_anchors = np.full((3, 3), np.nan)

        for i, fr in enumerate(frames):
            tip = fr.tip
            local = R.T @ (tip - com)
            pen, n_local, surf_local = _sphere_cube_contact(
                local, geom.half_edge, cfg.tip_radius
            )
            if pen <= 0.0:
                reports.append(
                    ContactState(False, R @ surf_local + com, R @ n_local,
                                 np.zeros(3), 0.0)
                )
                continue

            n = R @ n_local
            point = R @ surf_local + com
            qdot = state.joints.finger_vel(i)
            J = point_jacobian(fr, tip)
            v_tip = J @ qdot
            v_cube_pt = state.cube_linvel + cross3(state.cube_angvel, point - com)
            v_rel = v_tip - v_cube_pt

            ramp = min(pen / cfg.damping_ramp, 1.0)
            fn_mag = cfg.tip_stiffness * pen - cfg.tip_damping * ramp * float(v_rel @ n)
            fn_mag = max(fn_mag, 0.0)

            # anchored tangential spring, anchor stored in cube frame
            anchor_local = state.tip_anchors[i]
            if np.isnan(anchor_local[0]):
                anchor_local = surf_local
            anchor_world = R @ anchor_local + com
            d = tip - anchor_world
            delta_t = d - (d @ n) * n
            cap = geom.friction_coeff * fn_mag
            f_spring = -cfg.tip_tangential_stiffness * delta_t
            spring_mag = np.linalg.norm(f_spring)
            if spring_mag > cap:
                # sliding: relocate the anchor so the residual stretch hits the cap
                delta_t = delta_t * (cap / (cfg.tip_tangential_stiffness * np.linalg.norm(delta_t)))
                anchor_world = tip - (d @ n) * n - delta_t
                anchor_local = R.T @ (anchor_world - com)
                f_spring = -cfg.tip_tangential_stiffness * delta_t
            v_t = v_rel - (v_rel @ n) * n
            f_t = f_spring - cfg.tip_tangential_damping * v_t
            ft_mag = np.linalg.norm(f_t)
            if ft_mag > cap and ft_mag > 0.0:
                f_t *= cap / ft_mag

            f_tip = fn_mag * n + f_t  # force on the tip from the cube
            f_on_cube = -f_tip
            cube_force += f_on_cube
            cube_torque += cross3(point - com, f_on_cube)
            joint_reactions[3 * i : 3 * i + 3] = J.T @ f_tip
            new_anchors[i] = anchor_local
            reports.append(ContactState(True, point, n, f_on_cube, float(pen)))

        return reports, cube_force, cube_torque, joint_reactions, new_anchors

    def _floor_contacts(self, state: WorldState, R: np.ndarray):
        """Corner-sampled cube-floor penalty forces (force, torque on cube)."""
        cfg, geom = self.cfg, self.geom
        corners = self._corners_local @ R.T + state.cube_pose.position
        pen = -corners[:, 2]
        touching = pen > 0.0
        if not np.any(touching):
            return np.zeros(3), np.zeros(3)
        arms = corners[touching] - state.cube_pose.position
        wx, wy, wz = state.cube_angvel
        v = np.empty_like(arms)
        v[:, 0] = state.cube_linvel[0] + wy * arms[:, 2] - wz * arms[:, 1]
        v[:, 1] = state.cube_linvel[1] + wz * arms[:, 0] - wx * arms[:, 2]
        v[:, 2] = state.cube_linvel[2] + wx * arms[:, 1] - wy * arms[:, 0]
        ramp = np.minimum(pen[touching] / cfg.damping_ramp, 1.0)
        fn = cfg.floor_stiffness * pen[touching] - cfg.floor_damping * ramp * v[:, 2]
        fn = np.maximum(fn, 0.0)
        f = np.zeros_like(arms)
        f[:, 2] = fn
        vt_mag = np.hypot(v[:, 0], v[:, 1])
        sliding = vt_mag > 1e-12
        if np.any(sliding):
            ft_mag = np.minimum(
                cfg.floor_tangential_damping * vt_mag[sliding],
                geom.friction_coeff * fn[sliding],
            )
            scale = ft_mag / vt_mag[sliding]
            f[sliding, 0] -= scale * v[sliding, 0]
            f[sliding, 1] -= scale * v[sliding, 1]
        force = f.sum(axis=0)
        torque = np.array(
            [
                np.sum(arms[:, 1] * f[:, 2] - arms[:, 2] * f[:, 1]),
                np.sum(arms[:, 2] * f[:, 0] - arms[:, 0] * f[:, 2]),
                np.sum(arms[:, 0] * f[:, 1] - arms[:, 1] * f[:, 0]),
            ]
        )
        return force, torque

    # ------------------------------------------------------------------
    # public surface
    # ------------------------------------------------------------------

    def step(self, state: WorldState, torques) -> WorldState:
        """Advance dt: fingers under torque, cube under gravity + contacts."""
        cfg, geom = self.cfg, self.geom
        tau_cmd = require_finite(torques, "torques")
        if tau_cmd.shape != (9,):
            raise ValueError("expected 9 joint torques")
        tau_cmd = np.clip(tau_cmd, -cfg.torque_limit, cfg.torque_limit)

        frames = [
            fk_frames(self.fingers[i], state.joints.finger(i)) for i in range(3)
        ]
        R = quat_to_matrix(state.cube_pose.orientation)
        (_, tip_force, tip_torque, joint_reactions, new_anchors) = self._tip_contacts(
            state, frames, R
        )
        floor_force, floor_torque = self._floor_contacts(state, R)

        # fingers: semi-implicit with constant per-joint effective inertia
        q = state.joints.q
        qdot = state.joints.qdot
        tau_total = tau_cmd - cfg.joint_damping * qdot + joint_reactions
        g = cfg.gravity
        for i in range(3):
            tau_total[3 * i : 3 * i + 3] += link_gravity_torques(
                frames[i], self.fingers[i].link_masses, g
            )
        qdot_new = qdot + cfg.dt * tau_total / cfg.joint_inertia
        q_new = q + cfg.dt * qdot_new
        for i in range(3):
            m = self.fingers[i]
            sl = slice(3 * i, 3 * i + 3)
            clamped = np.clip(q_new[sl], m.joint_lower, m.joint_upper)
            qdot_new[sl] = np.where(clamped == q_new[sl], qdot_new[sl], 0.0)
            q_new[sl] = clamped

        # cube: forces about the center of mass
        contact_force = tip_force + floor_force
        torque = tip_torque + floor_torque

        # gravity integrates with the exact constant-acceleration rule (a
        # ballistic drop reproduces the closed form to rounding error);
        # contact forces stay semi-implicit, which keeps the stiff penalty
        # springs symplectic instead of energy-gaining
        a_contact = contact_force / geom.mass
        v_new = state.cube_linvel + cfg.dt * (cfg.gravity + a_contact)
        p_new = (
            state.cube_pose.position
            + cfg.dt * state.cube_linvel
            + cfg.dt * cfg.dt * (0.5 * cfg.gravity + a_contact)
        )

        inertia_w = (R * geom.inertia_diag) @ R.T
        inv_inertia_w = (R / geom.inertia_diag) @ R.T
        gyro = cross3(state.cube_angvel, inertia_w @ state.cube_angvel)
        w_new = state.cube_angvel + cfg.dt * (inv_inertia_w @ (torque - gyro))
        dq = quat_from_rotvec(w_new * cfg.dt)
        quat_new = quat_normalize(quat_multiply(dq, state.cube_pose.orientation))

        if (
            np.linalg.norm(v_new) > cfg.speed_cap
            or np.linalg.norm(w_new) > cfg.angvel_cap
            or not np.all(np.isfinite(p_new))
        ):
            raise SimulationDivergedError(
                f"simulation diverged at t={state.time:.4f}: |v|={np.linalg.norm(v_new):.2f}"
            )

        return WorldState(
            cube_pose=Pose(p_new, quat_new),
            cube_linvel=v_new,
            cube_angvel=w_new,
            joints=JointState(q_new, qdot_new),
            time=state.time + cfg.dt,
            tip_anchors=new_anchors,
        )

    def tip_positions(self, state: WorldState) -> np.ndarray:
        return np.array(
            [fk_frames(self.fingers[i], state.joints.finger(i)).tip for i in range(3)]
        )

    def tip_contact_report(self, state: WorldState) -> list[ContactState]:
        frames = [
            fk_frames(self.fingers[i], state.joints.finger(i)) for i in range(3)
        ]
        R = quat_to_matrix(state.cube_pose.orientation)
        reports, *_ = self._tip_contacts(state, frames, R)
        return reports

    def is_grasp_lost(
        self,
        state: WorldState,
        expected_contacts: list[ContactSpec],
        min_height: float | None = None,
    ) -> bool:
        """True when fewer than 2 expected tips touch the cube, or the cube
        fell below ``min_height`` while it was supposed to be carried."""
        if min_height is not None and state.cube_pose.position[2] < min_height:
            return True
        reports = self.tip_contact_report(state)
        touching = sum(
            1 for idx in range(len(expected_contacts)) if reports[idx].in_contact
        )
        return touching < 2

    def initial_state(self, cube_pose: Pose, q_home) -> WorldState:
        q = np.asarray(q_home, dtype=np.float64)
        return WorldState(
            cube_pose=cube_pose,
            cube_linvel=np.zeros(3),
            cube_angvel=np.zeros(3),
            joints=JointState(q.copy(), np.zeros(9)),
        )
