"""Forward/inverse kinematics for three identical 3-DoF fingers.

Chain convention, per finger, in the finger base frame (local +x points at
the arena center, +z up):

    yaw about axes[0]  ->  offset link_lengths[0] along local x
    pitch about axes[1] -> upper link link_lengths[1] along local x
    pitch about axes[2] -> lower link link_lengths[2] along local x

Positive pitch tilts the following link downward.  The platform itself is
configuration: bases sit at 120 degree spacing on a circle above the arena,
oriented inward (see :func:`default_fingers`).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geom import (
    Pose,
    cross3,
    quat_from_axis_angle,
    quat_to_matrix,
    require_finite,
)

_STANDARD_AXES = np.array([[0.0, 0.0, 1.0], [0.0, 1.0, 0.0], [0.0, 1.0, 0.0]])


class UnreachableTargetError(ValueError):
    """Raised when an IK target lies outside the finger workspace."""


@dataclass(frozen=True)
class FingerModel:
    base_pose: Pose
    link_lengths: np.ndarray = field(
        default_factory=lambda: np.array([0.04, 0.16, 0.16])
    )
    joint_lower: np.ndarray = field(
        default_factory=lambda: np.array([-2.0, -1.8, -2.6])
    )
    joint_upper: np.ndarray = field(
        default_factory=lambda: np.array([2.0, 1.8, 2.6])
    )
    axes: np.ndarray = field(
        default_factory=lambda: np.array(
            [[0.0, 0.0, 1.0], [0.0, 1.0, 0.0], [0.0, 1.0, 0.0]]
        )
    )
    link_masses: np.ndarray = field(default_factory=lambda: np.full(3, 0.2))

    def __post_init__(self):
        ll = require_finite(self.link_lengths, "link_lengths")
        if ll.shape != (3,) or np.any(ll[1:] <= 0) or ll[0] < 0:
            raise ValueError(f"bad link lengths {ll!r}")
        lo = require_finite(self.joint_lower, "joint_lower")
        hi = require_finite(self.joint_upper, "joint_upper")
        if np.any(lo >= hi):
            raise ValueError("joint_lower must be strictly below joint_upper")
        ax = require_finite(self.axes, "axes")
        if ax.shape != (3, 3):
            raise ValueError("expected 3 joint axes")
        norms = np.linalg.norm(ax, axis=1)
        ax = ax / norms[:, None]
        object.__setattr__(self, "axes", ax)
        object.__setattr__(self, "link_lengths", ll)
        object.__setattr__(self, "joint_lower", lo)
        object.__setattr__(self, "joint_upper", hi)
        # cached base rotation and fast-path flag; fk runs in the simulator
        # inner loop, so the default yaw/pitch/pitch chain gets a closed form
        object.__setattr__(self, "_base_rot", quat_to_matrix(self.base_pose.orientation))
        object.__setattr__(self, "_standard_chain", bool(np.array_equal(ax, _STANDARD_AXES)))

    def clamp(self, q) -> np.ndarray:
        return np.clip(q, self.joint_lower, self.joint_upper)

    @property
    def max_reach(self) -> float:
        return float(np.sum(self.link_lengths))

    def target_reachable(self, target, margin: float = 1e-3) -> bool:
        """Exact workspace membership for the yaw-offset two-link chain.

        The shoulder (end of the offset link) sweeps a circle of radius
        link_lengths[0] around the base yaw axis; from there the two pitch
        links reach an annulus [|l1 - l2|, l1 + l2].
        """
        l0, l1, l2 = self.link_lengths
        local = self.base_pose.inverse_transform(target)
        rho = np.hypot(local[0], local[1])
        d = np.hypot(rho - l0, local[2])
        return (abs(l1 - l2) - margin) <= d <= (l1 + l2 + margin)


@dataclass
class JointState:
    """All nine joints (three fingers concatenated)."""

    q: np.ndarray
    qdot: np.ndarray

    def __post_init__(self):
        self.q = require_finite(self.q, "q").astype(np.float64, copy=True)
        self.qdot = require_finite(self.qdot, "qdot").astype(np.float64, copy=True)
        if self.q.shape != (9,) or self.qdot.shape != (9,):
            raise ValueError("JointState expects 9 joint positions and velocities")

    def finger(self, i: int) -> np.ndarray:
        return self.q[3 * i : 3 * i + 3]

    def finger_vel(self, i: int) -> np.ndarray:
        return self.qdot[3 * i : 3 * i + 3]

    def copy(self) -> "JointState":
        return JointState(self.q.copy(), self.qdot.copy())


def _axis_rotation(axis, angle):
    return quat_to_matrix(quat_from_axis_angle(axis, angle))


@dataclass(frozen=True)
class FingerFrames:
    """World-frame chain snapshot: joint origins/axes, link midpoints, tip."""

    joint_origins: np.ndarray  # (3, 3)
    joint_axes: np.ndarray  # (3, 3) world joint axes
    link_mids: np.ndarray  # (3, 3) link center-of-mass positions
    tip: np.ndarray  # (3,)


def _fk_frames_standard(model: FingerModel, q) -> FingerFrames:
    """Closed-form chain for the yaw(z)/pitch(y)/pitch(y), x-link layout."""
    l0, l1, l2 = model.link_lengths
    c0, s0 = np.cos(q[0]), np.sin(q[0])
    c1, s1 = np.cos(q[1]), np.sin(q[1])
    q12 = q[1] + q[2]
    c12, s12 = np.cos(q12), np.sin(q12)

    # base-frame link directions; positive pitch tilts the link down
    pts = np.empty((7, 3))
    pts[0] = (l0 * c0, l0 * s0, 0.0)  # shoulder
    pts[1] = (pts[0, 0] + l1 * c0 * c1, pts[0, 1] + l1 * s0 * c1, -l1 * s1)  # elbow
    pts[2] = (pts[1, 0] + l2 * c0 * c12, pts[1, 1] + l2 * s0 * c12,
              pts[1, 2] - l2 * s12)  # tip
    pts[3] = 0.5 * pts[0]
    pts[4] = 0.5 * (pts[0] + pts[1])
    pts[5] = 0.5 * (pts[1] + pts[2])
    pts[6] = (-s0, c0, 0.0)  # pitch axis after yaw

    R = model._base_rot
    p = model.base_pose.position
    world = pts @ R.T
    world[:6] += p

    origins = np.empty((3, 3))
    origins[0] = p
    origins[1] = world[0]
    origins[2] = world[1]
    axes_w = np.empty((3, 3))
    axes_w[0] = R[:, 2]
    axes_w[1] = world[6]
    axes_w[2] = world[6]
    return FingerFrames(origins, axes_w, world[3:6], world[2])


def fk_frames(model: FingerModel, q) -> FingerFrames:
    q = np.asarray(q, dtype=np.float64)
    if model._standard_chain:
        return _fk_frames_standard(model, q)
    l0, l1, l2 = model.link_lengths
    R = model._base_rot
    p = model.base_pose.position

    origins = np.empty((3, 3))
    axes_w = np.empty((3, 3))
    mids = np.empty((3, 3))

    # yaw joint at the base origin
    origins[0] = p
    axes_w[0] = R @ model.axes[0]
    R = R @ _axis_rotation(model.axes[0], q[0])
    x_dir = R[:, 0]
    shoulder = p + l0 * x_dir
    mids[0] = p + 0.5 * l0 * x_dir

    origins[1] = shoulder
    axes_w[1] = R @ model.axes[1]
    R = R @ _axis_rotation(model.axes[1], q[1])
    x_dir = R[:, 0]
    elbow = shoulder + l1 * x_dir
    mids[1] = shoulder + 0.5 * l1 * x_dir

    origins[2] = elbow
    axes_w[2] = R @ model.axes[2]
    R = R @ _axis_rotation(model.axes[2], q[2])
    x_dir = R[:, 0]
    tip = elbow + l2 * x_dir
    mids[2] = elbow + 0.5 * l2 * x_dir

    return FingerFrames(origins, axes_w, mids, tip)


def fk_tip(model: FingerModel, q) -> np.ndarray:
    """World fingertip position for one finger's three joint angles."""
    return fk_frames(model, q).tip


def point_jacobian(frames: FingerFrames, point, n_joints: int = 3) -> np.ndarray:
    """Geometric Jacobian of a chain-attached point w.r.t. the first n joints."""
    J = np.zeros((3, 3))
    for i in range(n_joints):
        J[:, i] = cross3(frames.joint_axes[i], point - frames.joint_origins[i])
    return J


def link_gravity_torques(frames: FingerFrames, link_masses, gravity) -> np.ndarray:
    """Generalized gravity force on the three joints from link point masses."""
    g0, g1, g2 = float(gravity[0]), float(gravity[1]), float(gravity[2])
    axes = frames.joint_axes.tolist()
    origins = frames.joint_origins.tolist()
    mids = frames.link_mids.tolist()
    tau = [0.0, 0.0, 0.0]
    for link in range(3):
        m = float(link_masses[link])
        mx, my, mz = mids[link]
        for j in range(link + 1):
            ax, ay, az = axes[j]
            rx = mx - origins[j][0]
            ry = my - origins[j][1]
            rz = mz - origins[j][2]
            # (axis x arm) . (m * g)
            tau[j] += m * (
                (ay * rz - az * ry) * g0
                + (az * rx - ax * rz) * g1
                + (ax * ry - ay * rx) * g2
            )
    return np.array(tau)


def tip_jacobian(model: FingerModel, q) -> np.ndarray:
    frames = fk_frames(model, q)
    return point_jacobian(frames, frames.tip)


def gravity_compensation(model: FingerModel, q, gravity) -> np.ndarray:
    """Joint torques that statically cancel link weight.

    Links are approximated as point masses at their midpoints; link i hangs
    off joints 0..i.
    """
    frames = fk_frames(model, q)
    g = np.asarray(gravity, dtype=np.float64)
    return -link_gravity_torques(frames, model.link_masses, g)


@dataclass(frozen=True)
class IkResult:
    q: np.ndarray
    tip_error: float
    converged: bool
    iterations: int


def ik_tip(
    model: FingerModel,
    target,
    seed,
    tol: float = 1e-4,
    max_iters: int = 200,
    damping: float = 1e-3,
    step_limit: float = 0.2,
) -> IkResult:
    """Damped-least-squares IK for the fingertip.

    Success is defined in tip space (error <= tol); joint limits are
    enforced by clamping every iterate.  Non-convergence is reported via
    the result flag with the best-so-far joints; targets outside the
    workspace raise :class:`UnreachableTargetError`.
    """
    target = require_finite(target, "target")
    if not model.target_reachable(target):
        raise UnreachableTargetError(
            f"target {target} outside finger workspace (reach {model.max_reach:.3f} m)"
        )
    q = model.clamp(np.asarray(seed, dtype=np.float64).copy())
    best_q = q.copy()
    best_err = np.inf
    lam2 = damping * damping
    for it in range(max_iters):
        frames = fk_frames(model, q)
        e = target - frames.tip
        err = np.linalg.norm(e)
        if err < best_err:
            best_err = err
            best_q = q.copy()
        if err <= tol:
            return IkResult(q, float(err), True, it)
        J = point_jacobian(frames, frames.tip)
        dq = J.T @ np.linalg.solve(J @ J.T + lam2 * np.eye(3), e)
        dq = np.clip(dq, -step_limit, step_limit)
        q = model.clamp(q + dq)
    return IkResult(best_q, float(best_err), best_err <= tol, max_iters)


def default_fingers(
    base_radius: float = 0.15,
    base_height: float = 0.20,
    link_lengths=(0.04, 0.16, 0.16),
    link_mass: float = 0.2,
) -> list[FingerModel]:
    """Three identical fingers at 120 degree spacing, local +x facing inward."""
    fingers = []
    ll = np.asarray(link_lengths, dtype=np.float64)
    for i in range(3):
        phi = 2.0 * np.pi * i / 3.0
        pos = np.array(
            [base_radius * np.cos(phi), base_radius * np.sin(phi), base_height]
        )
        orient = quat_from_axis_angle([0.0, 0.0, 1.0], phi + np.pi)
        fingers.append(
            FingerModel(
                base_pose=Pose(pos, orient),
                link_lengths=ll.copy(),
                link_masses=np.full(3, link_mass),
            )
        )
    return fingers
