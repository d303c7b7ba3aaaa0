"""Low-level joint control and the three-primitive manipulation state machine.

Primitives cycle SelectContacts -> Reach -> Lift within one goal window:

* SelectContacts stores the planner's contact choice and plans a
  two-segment approach per finger (standoff point offset along the face
  normal, then a slow closing move onto the contact).
* Reach tracks the approach paths with IK + joint PD until all tips are
  within tolerance of their grasp points.
* Lift plans a cube path to the goal waypoint, turns tracking error into a
  desired body wrench, distributes it over the tips with the contact-force
  QP, and servoes the tips at their grasp points on the moving reference.

Losing the grasp mid-lift falls back to SelectContacts (regrasp).  Joint
torques are PD plus inverse-dynamics feedforward (J^T f and link gravity
compensation), clamped to the actuator limit.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .geom import (
    ContactSpec,
    Pose,
    contact_point_local,
    face_normal_local,
    quat_rotate,
    quat_to_matrix,
)
from .grasp import (
    ContactForces,
    FrictionPyramid,
    WrenchGains,
    desired_wrench,
    grasp_matrix,
    solve_contact_forces,
)
from .kinematics import (
    FingerModel,
    JointState,
    UnreachableTargetError,
    fk_frames,
    gravity_compensation,
    ik_tip,
    point_jacobian,
)
from .simulator import Simulator, WorldState
from .trajectory import TimedPath3, point_to_point


class Primitive(Enum):
    SELECT_CONTACTS = "select_contacts"
    REACH = "reach"
    LIFT = "lift"


@dataclass(frozen=True)
class GainSet:
    kp_joint: np.ndarray = field(default_factory=lambda: np.full(9, 10.0))
    kd_joint: np.ndarray = field(default_factory=lambda: np.full(9, 0.3))
    kp_lin: float = 200.0
    kd_lin: float = 28.0
    kp_ang: float = 20.0
    kd_ang: float = 2.0

    def __post_init__(self):
        kp = np.broadcast_to(np.asarray(self.kp_joint, dtype=np.float64), (9,)).copy()
        kd = np.broadcast_to(np.asarray(self.kd_joint, dtype=np.float64), (9,)).copy()
        if np.any(kp < 0) or np.any(kd < 0):
            raise ValueError("joint gains must be >= 0")
        object.__setattr__(self, "kp_joint", kp)
        object.__setattr__(self, "kd_joint", kd)

    @property
    def wrench_gains(self) -> WrenchGains:
        return WrenchGains(self.kp_lin, self.kd_lin, self.kp_ang, self.kd_ang)


@dataclass(frozen=True)
class ControllerConfig:
    control_dt: float = 0.01  # one tick per simulator decimation window
    retract_duration: float = 0.3  # radial release before a (re)grasp
    reach_duration: float = 0.7  # transit + descend to the standoff
    close_duration: float = 0.6  # closing segment
    reach_timeout: float = 1.0  # extra settle time before a reach counts as stuck
    settle_speed: float = 0.08  # plan grasps only once the cube is this slow
    settle_timeout: float = 1.5  # max seconds to wait for the cube to settle
    replan_drift: float = 0.025  # replan the reach if the cube moved this far
    standoff_distance: float = 0.02
    contact_tolerance: float = 5e-3
    preload_depth: float = 1.0e-3  # commanded tip inset past the surface
    lift_fraction: float = 0.6  # fraction of remaining window for the lift path
    min_lift_duration: float = 0.8
    grasp_grace: float = 0.4  # seconds after lift start before drop checks
    f_max: float = 4.0
    f_ref: float = 0.8
    reg_weight: float = 0.1
    qp_mu_margin: float = 0.85  # solver uses a slightly tighter cone than the sim
    qp_eq_penalty: float = 1e4
    qp_iters: int = 150
    qp_eps: float = 1e-8
    qp_interval: int = 2  # solve every N ticks, hold forces in between
    ik_iters: int = 30
    gravity_comp: bool = True


def joint_pd_id(
    joints: JointState,
    q_des,
    qdot_des,
    tip_forces,
    fingers: list[FingerModel],
    gains: GainSet,
    torque_limit: float,
    gravity=None,
) -> np.ndarray:
    """PD + inverse-dynamics joint torques.

    tau = Kp(q_des - q) + Kd(qdot_des - qdot) + J^T f_tip + g_comp(q)

    ``tip_forces`` is the per-finger force each tip should exert on the
    environment (None for free-space motion); ``gravity`` enables link
    gravity compensation.
    """
    q_des = np.asarray(q_des, dtype=np.float64)
    qdot_des = np.asarray(qdot_des, dtype=np.float64)
    tau = gains.kp_joint * (q_des - joints.q) + gains.kd_joint * (qdot_des - joints.qdot)
    for i, model in enumerate(fingers):
        sl = slice(3 * i, 3 * i + 3)
        needs_ff = tip_forces is not None and np.any(tip_forces[i])
        if needs_ff or gravity is not None:
            frames = fk_frames(model, joints.q[sl])
            if needs_ff:
                J = point_jacobian(frames, frames.tip)
                tau[sl] += J.T @ np.asarray(tip_forces[i], dtype=np.float64)
            if gravity is not None:
                tau[sl] += gravity_compensation(model, joints.q[sl], gravity)
    return np.clip(tau, -torque_limit, torque_limit)


@dataclass(frozen=True)
class ControllerState:
    primitive: Primitive = Primitive.SELECT_CONTACTS
    contacts: tuple[ContactSpec, ...] | None = None
    grasp_locals: np.ndarray | None = None  # cube-frame tip-center grasp targets
    reach_paths: tuple | None = None  # per-finger timed segment chains
    plan_cube_pos: np.ndarray | None = None  # cube position the reach assumed
    cube_path: TimedPath3 | None = None
    lift_ref_quat: np.ndarray | None = None
    phase_time: float = 0.0
    q_des_prev: np.ndarray | None = None
    qp_last: ContactForces | None = None
    ticks: int = 0
    ik_replanned: bool = False
    drift_replans: int = 0
    failure_count: int = 0
    regrasp_count: int = 0


@dataclass(frozen=True)
class Waypoint:
    position: np.ndarray
    duration: float


class Controller:
    """Ties the state machine to one simulator instance's scene."""

    def __init__(self, sim: Simulator, gains: GainSet | None = None,
                 cfg: ControllerConfig | None = None):
        self.sim = sim
        self.gains = gains or GainSet()
        self.cfg = cfg or ControllerConfig()
        self._pyramid = FrictionPyramid(
            self.cfg.qp_mu_margin * sim.geom.friction_coeff
        )

    # -- helpers --------------------------------------------------------

    def _grasp_geometry(self, contacts):
        """Cube-frame grasp targets (tip centers), standoffs, inward normals."""
        geom = self.sim.geom
        cfg = self.cfg
        tip_r = self.sim.cfg.tip_radius
        grasp = np.empty((3, 3))
        standoff = np.empty((3, 3))
        normals_local = np.empty((3, 3))
        for i, spec in enumerate(contacts):
            surface = contact_point_local(geom, spec)
            n = face_normal_local(spec.face)
            grasp[i] = surface + (tip_r - cfg.preload_depth) * n
            standoff[i] = surface + (tip_r + cfg.standoff_distance) * n
            normals_local[i] = -n  # pressing direction
        return grasp, standoff, normals_local

    def _plan_reach(self, world: WorldState, grasp_locals, standoff_locals):
        """Per-finger segment chains: retract, transit overhead, descend, close.

        The retract leg moves a tip radially off the cube first (tips may
        still be squeezing it from the previous window); the transit leg
        stays above the cube's swept height so approaches never plow
        through the object.
        """
        pose = world.cube_pose
        geom = self.sim.geom
        tip_r = self.sim.cfg.tip_radius
        tips = self.sim.tip_positions(world)
        cfg = self.cfg
        circum = geom.half_edge * np.sqrt(3.0)
        clear_radius = circum + tip_r + cfg.standoff_distance
        z_safe_floor = pose.position[2] + circum + tip_r + 0.01
        paths = []
        for i in range(3):
            standoff_w = pose.transform(standoff_locals[i])
            grasp_w = pose.transform(grasp_locals[i])
            d = tips[i] - pose.position
            dist = np.linalg.norm(d)
            if dist < clear_radius:
                retract_pt = pose.position + (clear_radius / max(dist, 1e-9)) * d
            else:
                retract_pt = tips[i]
            overhead = standoff_w.copy()
            overhead[2] = max(standoff_w[2], z_safe_floor)
            segs = (
                point_to_point(tips[i], retract_pt, cfg.retract_duration),
                point_to_point(retract_pt, overhead, 0.6 * cfg.reach_duration),
                point_to_point(overhead, standoff_w, 0.4 * cfg.reach_duration),
                point_to_point(standoff_w, grasp_w, cfg.close_duration),
            )
            paths.append(segs)
        return tuple(paths)

    @staticmethod
    def _sample_segments(segs, t):
        for seg in segs:
            if t <= seg.duration:
                return seg.sample(t)[0]
            t -= seg.duration
        return segs[-1].sample(segs[-1].duration)[0]

    def _hold_torques(self, world: WorldState, q_des):
        return joint_pd_id(
            world.joints,
            q_des,
            np.zeros(9),
            None,
            self.sim.fingers,
            self.gains,
            self.sim.cfg.torque_limit,
            gravity=self.sim.cfg.gravity if self.cfg.gravity_comp else None,
        )

    def _track_tips(self, world: WorldState, targets, cstate, tip_forces=None):
        """IK the three tip targets and return (torques, q_des, ok)."""
        q_des = np.empty(9)
        seed_all = cstate.q_des_prev if cstate.q_des_prev is not None else world.joints.q
        ok = True
        for i, model in enumerate(self.sim.fingers):
            sl = slice(3 * i, 3 * i + 3)
            try:
                res = ik_tip(model, targets[i], seed_all[sl], max_iters=self.cfg.ik_iters)
            except UnreachableTargetError:
                ok = False
                q_des[sl] = seed_all[sl]
                continue
            q_des[sl] = res.q
            # loose in-loop acceptance: PD absorbs small residuals
            if res.tip_error > 25 * self.cfg.contact_tolerance:
                ok = False
        if cstate.q_des_prev is None:
            qdot_des = np.zeros(9)
        else:
            qdot_des = (q_des - cstate.q_des_prev) / self.cfg.control_dt
        torques = joint_pd_id(
            world.joints,
            q_des,
            qdot_des,
            tip_forces,
            self.sim.fingers,
            self.gains,
            self.sim.cfg.torque_limit,
            gravity=self.sim.cfg.gravity if self.cfg.gravity_comp else None,
        )
        return torques, q_des, ok

    # -- the tick -------------------------------------------------------

    def tick(
        self,
        cstate: ControllerState,
        world: WorldState,
        waypoint: Waypoint,
        contact_decision: tuple[ContactSpec, ...] | None = None,
        time_left: float | None = None,
    ) -> tuple[np.ndarray, ControllerState]:
        """One 100 Hz control decision: returns torques and the next state."""
        cfg = self.cfg

        if cstate.primitive is Primitive.SELECT_CONTACTS:
            if contact_decision is None:
                raise ValueError("SelectContacts requires a contact decision")
            contacts = tuple(contact_decision)
            if len(contacts) != 3:
                raise ValueError("need exactly three contact specs")
            # a tumbling cube (e.g. just released) is not graspable: hold
            # position until it settles, then plan against the resting pose
            speed = np.linalg.norm(world.cube_linvel)
            if speed > cfg.settle_speed and cstate.phase_time < cfg.settle_timeout:
                nxt = replace(
                    cstate,
                    phase_time=cstate.phase_time + cfg.control_dt,
                    ticks=cstate.ticks + 1,
                )
                return self._hold_torques(world, world.joints.q), nxt
            grasp_l, standoff_l, _ = self._grasp_geometry(contacts)
            paths = self._plan_reach(world, grasp_l, standoff_l)
            nxt = replace(
                cstate,
                primitive=Primitive.REACH,
                contacts=contacts,
                grasp_locals=grasp_l,
                reach_paths=paths,
                plan_cube_pos=world.cube_pose.position.copy(),
                cube_path=None,
                phase_time=0.0,
                q_des_prev=None,
                qp_last=None,
                ik_replanned=False,
                drift_replans=0,
                ticks=cstate.ticks + 1,
            )
            return self._hold_torques(world, world.joints.q), nxt

        if cstate.primitive is Primitive.REACH:
            t = cstate.phase_time
            # the plan goes stale when the cube moves (it may have been
            # dropped from the previous grasp); replan once it settles
            drift = np.linalg.norm(world.cube_pose.position - cstate.plan_cube_pos)
            if (
                drift > cfg.replan_drift
                and np.linalg.norm(world.cube_linvel) < cfg.settle_speed
                and cstate.drift_replans < 3
            ):
                grasp_l, standoff_l, _ = self._grasp_geometry(cstate.contacts)
                paths = self._plan_reach(world, grasp_l, standoff_l)
                nxt = replace(
                    cstate,
                    reach_paths=paths,
                    plan_cube_pos=world.cube_pose.position.copy(),
                    phase_time=0.0,
                    q_des_prev=None,
                    drift_replans=cstate.drift_replans + 1,
                    ticks=cstate.ticks + 1,
                )
                return self._hold_torques(world, world.joints.q), nxt
            targets = np.empty((3, 3))
            for i in range(3):
                targets[i] = self._sample_segments(cstate.reach_paths[i], t)
            torques, q_des, ok = self._track_tips(world, targets, cstate)
            if not ok:
                if not cstate.ik_replanned:
                    grasp_l, standoff_l, _ = self._grasp_geometry(cstate.contacts)
                    paths = self._plan_reach(world, grasp_l, standoff_l)
                    nxt = replace(
                        cstate,
                        reach_paths=paths,
                        plan_cube_pos=world.cube_pose.position.copy(),
                        phase_time=0.0,
                        q_des_prev=None,
                        ik_replanned=True,
                        ticks=cstate.ticks + 1,
                    )
                    return self._hold_torques(world, world.joints.q), nxt
                # second failure: give up on this grasp attempt
                nxt = replace(
                    cstate,
                    primitive=Primitive.SELECT_CONTACTS,
                    contacts=None,
                    failure_count=cstate.failure_count + 1,
                    phase_time=0.0,
                    ticks=cstate.ticks + 1,
                )
                return self._hold_torques(world, world.joints.q), nxt

            # transition test against the grasp points on the live cube
            pose = world.cube_pose
            tips = self.sim.tip_positions(world)
            goal_pts = np.array(
                [pose.transform(cstate.grasp_locals[i]) for i in range(3)]
            )
            dists = np.linalg.norm(tips - goal_pts, axis=1)
            total_reach = sum(s.duration for s in cstate.reach_paths[0])
            if t > total_reach + cfg.reach_timeout:
                # tips never settled onto the contacts: try one replan, then
                # hand the decision back
                if not cstate.ik_replanned:
                    grasp_l, standoff_l, _ = self._grasp_geometry(cstate.contacts)
                    paths = self._plan_reach(world, grasp_l, standoff_l)
                    nxt = replace(
                        cstate,
                        reach_paths=paths,
                        plan_cube_pos=world.cube_pose.position.copy(),
                        phase_time=0.0,
                        q_des_prev=None,
                        ik_replanned=True,
                        ticks=cstate.ticks + 1,
                    )
                else:
                    nxt = replace(
                        cstate,
                        primitive=Primitive.SELECT_CONTACTS,
                        contacts=None,
                        failure_count=cstate.failure_count + 1,
                        phase_time=0.0,
                        ticks=cstate.ticks + 1,
                    )
                return self._hold_torques(world, world.joints.q), nxt
            # hand over to the force controller as soon as every tip touches:
            # chasing the inset targets with plain PD shoves the cube around
            closing_start = total_reach - cfg.close_duration
            settled = np.all(dists < cfg.contact_tolerance) and t >= total_reach
            if not settled and t > closing_start:
                settled = all(
                    r.in_contact for r in self.sim.tip_contact_report(world)
                )
            if settled:
                horizon = waypoint.duration if time_left is None else time_left
                lift_T = max(cfg.min_lift_duration, cfg.lift_fraction * horizon)
                cube_path = point_to_point(
                    pose.position.copy(), waypoint.position, lift_T
                )
                nxt = replace(
                    cstate,
                    primitive=Primitive.LIFT,
                    cube_path=cube_path,
                    lift_ref_quat=pose.orientation.copy(),
                    phase_time=0.0,
                    q_des_prev=q_des,
                    qp_last=None,
                    ticks=cstate.ticks + 1,
                )
                return torques, nxt
            nxt = replace(
                cstate,
                phase_time=t + cfg.control_dt,
                q_des_prev=q_des,
                ticks=cstate.ticks + 1,
            )
            return torques, nxt

        # Lift
        t = cstate.phase_time
        pose = world.cube_pose
        ref_pos, ref_vel, ref_acc = cstate.cube_path.sample(t)
        ref_pose = Pose(ref_pos, cstate.lift_ref_quat)

        solve_now = cstate.qp_last is None or (
            cstate.ticks % cfg.qp_interval == 0
        )
        if solve_now:
            wrench = desired_wrench(
                pose,
                world.cube_linvel,
                world.cube_angvel,
                ref_pose,
                ref_vel,
                ref_acc,
                self.sim.geom,
                self.gains.wrench_gains,
                gravity=self.sim.cfg.gravity,
            )
            points = np.array(
                [pose.transform(contact_point_local(self.sim.geom, c))
                 for c in cstate.contacts]
            )
            normals = [
                -quat_rotate(pose.orientation, face_normal_local(c.face))
                for c in cstate.contacts
            ]
            G = grasp_matrix(points, pose.position)
            qp = solve_contact_forces(
                G,
                normals,
                wrench,
                self._pyramid,
                cfg.f_max,
                f_ref=cfg.f_ref,
                reg_weight=cfg.reg_weight,
                eq_penalty=cfg.qp_eq_penalty,
                max_iters=cfg.qp_iters,
                eps=cfg.qp_eps,
                warm_start=cstate.qp_last,
            )
        else:
            qp = cstate.qp_last

        # tips ride the reference cube pose
        R_ref = quat_to_matrix(cstate.lift_ref_quat)
        targets = ref_pos + cstate.grasp_locals @ R_ref.T
        torques, q_des, _ = self._track_tips(world, targets, cstate, tip_forces=qp.forces)

        lost = False
        if t > cfg.grasp_grace:
            lost = self.sim.is_grasp_lost(world, list(cstate.contacts))
        if lost:
            nxt = replace(
                cstate,
                primitive=Primitive.SELECT_CONTACTS,
                contacts=None,
                cube_path=None,
                phase_time=0.0,
                q_des_prev=None,
                qp_last=None,
                regrasp_count=cstate.regrasp_count + 1,
                ticks=cstate.ticks + 1,
            )
            return self._hold_torques(world, world.joints.q), nxt

        nxt = replace(
            cstate,
            phase_time=t + cfg.control_dt,
            q_des_prev=q_des,
            qp_last=qp,
            ticks=cstate.ticks + 1,
        )
        return torques, nxt
