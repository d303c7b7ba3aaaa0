"""Contact-force distribution for the grasped cube.

The cube under grasp is treated as a rigid body supported by fingertip
"legs": a grasp matrix maps stacked per-tip contact forces to the net body
wrench, a pose/twist PD law produces the wrench target (gravity
compensation included), and a small dense QP distributes that wrench over
the tips subject to linearized friction cones and normal-force bounds.

The QP is solved by operator splitting (ADMM with a cached factorization)
followed by an active-set polish step; problems here have at most 12
variables, so no external solver is warranted.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geom import CubeGeometry, Pose, quat_multiply, quat_conjugate, quat_to_matrix, rotation_log, require_finite


def skew(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def grasp_matrix(contacts, com) -> np.ndarray:
    """6 x 3k map from stacked contact forces to the wrench about com.

    Row blocks: net force (identity blocks), then net torque
    (cross-product matrices of the contact moment arms).
    """
    contacts = np.atleast_2d(np.asarray(contacts, dtype=np.float64))
    com = require_finite(com, "com")
    k = contacts.shape[0]
    if k < 1:
        raise ValueError("need at least one contact")
    G = np.zeros((6, 3 * k))
    for i in range(k):
        G[0:3, 3 * i : 3 * i + 3] = np.eye(3)
        G[3:6, 3 * i : 3 * i + 3] = skew(contacts[i] - com)
    return G


@dataclass(frozen=True)
class WrenchTarget:
    force: np.ndarray
    torque: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "force", require_finite(self.force, "force"))
        object.__setattr__(self, "torque", require_finite(self.torque, "torque"))

    @property
    def stacked(self) -> np.ndarray:
        return np.concatenate([self.force, self.torque])


@dataclass(frozen=True)
class WrenchGains:
    """Mass/inertia-normalized pose PD gains (units 1/s^2 and 1/s)."""

    kp_lin: float = 200.0
    kd_lin: float = 28.0
    kp_ang: float = 20.0
    kd_ang: float = 2.0


def desired_wrench(
    cube_pose: Pose,
    cube_linvel,
    cube_angvel,
    ref_pose: Pose,
    ref_vel,
    ref_acc,
    geom: CubeGeometry,
    gains: WrenchGains,
    gravity=(0.0, 0.0, -9.81),
) -> WrenchTarget:
    """Wrench the tips must apply so the cube tracks the reference pose.

    force  = m * (a_ref + kp*(p_ref - p) + kd*(v_ref - v)) - m*g
    torque = I_w * (kp_ang * e_rot + kd_ang * (0 - w))

    with e_rot the rotation-log of the orientation error.  At rest with
    zero error the target is exactly gravity compensation.  Angular gains
    are inertia-normalized, mirroring the mass-normalized linear loop.
    """
    g = np.asarray(gravity, dtype=np.float64)
    e_pos = ref_pose.position - cube_pose.position
    e_vel = np.asarray(ref_vel, dtype=np.float64) - np.asarray(cube_linvel)
    force = geom.mass * (
        np.asarray(ref_acc, dtype=np.float64)
        + gains.kp_lin * e_pos
        + gains.kd_lin * e_vel
    ) - geom.mass * g

    q_err = quat_multiply(ref_pose.orientation, quat_conjugate(cube_pose.orientation))
    e_rot = rotation_log(q_err)
    R = quat_to_matrix(cube_pose.orientation)
    inertia_w = R @ np.diag(geom.inertia_diag) @ R.T
    torque = inertia_w @ (
        gains.kp_ang * e_rot - gains.kd_ang * np.asarray(cube_angvel)
    )
    return WrenchTarget(force, torque)


@dataclass(frozen=True)
class FrictionPyramid:
    """Linearized friction cone.

    When inscribed, each tangential axis is bounded by mu * f_n / sqrt(2)
    so every admissible force also lies inside the true circular cone.
    """

    mu: float
    inscribed: bool = True

    def __post_init__(self):
        if not (np.isfinite(self.mu) and self.mu > 0):
            raise ValueError(f"mu must be > 0, got {self.mu}")

    @property
    def tangent_bound_ratio(self) -> float:
        return self.mu / np.sqrt(2.0) if self.inscribed else self.mu


@dataclass(frozen=True)
class ContactForces:
    """QP solution: per-tip world-frame forces applied to the cube."""

    forces: np.ndarray  # (k, 3)
    feasible: bool
    eq_residual: float
    objective: float
    iterations: int
    max_cone_violation: float
    duals: np.ndarray | None = None  # warm-start state for the next solve

    def stacked(self) -> np.ndarray:
        return self.forces.reshape(-1)


def contact_tangent_basis(normal) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic orthonormal tangents for a unit contact normal."""
    n = np.asarray(normal, dtype=np.float64)
    helper = np.array([0.0, 0.0, 1.0]) if abs(n[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    t1 = np.cross(helper, n)
    t1 /= np.linalg.norm(t1)
    t2 = np.cross(n, t1)
    return t1, t2


def _build_constraints(normals, pyr: FrictionPyramid, f_max: float):
    """Linear rows l <= A x <= u for the pyramid/box set over stacked forces."""
    k = len(normals)
    mu_t = pyr.tangent_bound_ratio
    rows, lo, hi = [], [], []
    for i, n in enumerate(normals):
        t1, t2 = contact_tangent_basis(n)
        base = np.zeros((6, 3 * k))
        sl = slice(3 * i, 3 * i + 3)
        base[0, sl] = n
        base[1, sl] = t1 - mu_t * n
        base[2, sl] = -t1 - mu_t * n
        base[3, sl] = t2 - mu_t * n
        base[4, sl] = -t2 - mu_t * n
        rows.append(base[:5])
        lo.extend([0.0, -np.inf, -np.inf, -np.inf, -np.inf])
        hi.extend([f_max, 0.0, 0.0, 0.0, 0.0])
    return np.vstack(rows), np.array(lo), np.array(hi)


def _admm(P, q, A, lo, hi, max_iters, rho=10.0, sigma=1e-6, eps=1e-9, x0=None, y0=None):
    n = P.shape[0]
    # equality rows (lo == hi) get a much stiffer penalty weight
    rho_vec = np.where(np.isclose(lo, hi), 1e3 * rho, rho)
    K = P + sigma * np.eye(n) + A.T @ (rho_vec[:, None] * A)
    K_inv = np.linalg.inv(K)
    x = np.zeros(n) if x0 is None else np.asarray(x0, dtype=np.float64).copy()
    y = np.zeros(A.shape[0]) if y0 is None else np.asarray(y0, dtype=np.float64).copy()
    z = np.clip(A @ x, lo, hi)
    it = 0
    for it in range(1, max_iters + 1):
        x = K_inv @ (sigma * x - q + A.T @ (rho_vec * z - y))
        Ax = A @ x
        z = np.clip(Ax + y / rho_vec, lo, hi)
        y = y + rho_vec * (Ax - z)
        r_prim = np.max(np.abs(Ax - z)) if Ax.size else 0.0
        r_dual = np.max(np.abs(P @ x + q + A.T @ y))
        if r_prim < eps and r_dual < eps:
            break
    return x, y, it


def _polish(P, q, A, lo, hi, x, active_tol=1e-7):
    """Solve the KKT system restricted to the active set of the ADMM point."""
    Ax = A @ x
    act_lo = np.isfinite(lo) & (Ax - lo <= active_tol * (1.0 + np.abs(lo)))
    act_hi = np.isfinite(hi) & (hi - Ax <= active_tol * (1.0 + np.abs(hi)))
    fixed = np.isclose(lo, hi)
    active = act_lo | act_hi | fixed
    b = np.where(act_hi & ~fixed, hi, lo)
    A_act = A[active]
    b_act = b[active]
    n = P.shape[0]
    m = A_act.shape[0]
    KKT = np.zeros((n + m, n + m))
    KKT[:n, :n] = P
    KKT[:n, n:] = A_act.T
    KKT[n:, :n] = A_act
    rhs = np.concatenate([-q, b_act])
    sol, *_ = np.linalg.lstsq(KKT, rhs, rcond=None)
    return sol[:n]


def solve_contact_forces(
    G: np.ndarray,
    normals,
    wrench: WrenchTarget,
    pyramid: FrictionPyramid,
    f_max: float,
    f_ref: float = 0.3,
    reg_weight: float = 1e-2,
    eq_penalty: float | None = None,
    max_iters: int = 2000,
    eps: float = 1e-9,
    warm_start: ContactForces | None = None,
) -> ContactForces:
    """Distribute a body wrench over k fingertip contacts.

    Minimizes ||f||^2 + reg_weight * ||f_n - f_ref||^2 subject to G f = w,
    per-contact friction pyramids, and 0 <= f_n <= f_max.  ``normals`` are
    the pressing directions (into the object).  With ``eq_penalty`` set,
    the wrench equality is replaced by a heavily weighted quadratic penalty
    so a usable best-effort force is always returned.

    Infeasible instances (e.g. a wrench requiring pull on a face) come back
    with ``feasible=False`` and the best-effort forces found.
    """
    G = np.asarray(G, dtype=np.float64)
    w = wrench.stacked
    require_finite(w, "wrench")
    k = G.shape[1] // 3
    if k not in (2, 3, 4):
        raise ValueError(f"supported contact counts are 2..4, got {k}")
    normals = [np.asarray(n, dtype=np.float64) for n in normals]
    if len(normals) != k:
        raise ValueError("one unit normal per contact required")
    for n in normals:
        if abs(np.linalg.norm(n) - 1.0) > 1e-6:
            raise ValueError(f"normal {n} is not unit length")
    if not (np.isfinite(f_max) and f_max > 0):
        raise ValueError(f"f_max must be > 0, got {f_max}")

    nvar = 3 * k
    N = np.zeros((k, nvar))
    for i, n in enumerate(normals):
        N[i, 3 * i : 3 * i + 3] = n
    P = 2.0 * (np.eye(nvar) + reg_weight * (N.T @ N))
    q = -2.0 * reg_weight * f_ref * (N.T @ np.ones(k))

    A_ineq, lo_ineq, hi_ineq = _build_constraints(normals, pyramid, f_max)
    if eq_penalty is not None:
        P = P + 2.0 * eq_penalty * (G.T @ G)
        q = q - 2.0 * eq_penalty * (G.T @ w)
        A, lo, hi = A_ineq, lo_ineq, hi_ineq
    else:
        A = np.vstack([G, A_ineq])
        lo = np.concatenate([w, lo_ineq])
        hi = np.concatenate([w, hi_ineq])

    x0 = y0 = None
    if warm_start is not None and warm_start.forces.size == nvar:
        x0 = warm_start.forces.reshape(-1)
        if warm_start.duals is not None and warm_start.duals.size == A.shape[0]:
            y0 = warm_start.duals
    x, y, iters = _admm(P, q, A, lo, hi, max_iters, eps=eps, x0=x0, y0=y0)

    def diagnostics(xc):
        eq_res = float(np.max(np.abs(G @ xc - w)))
        r = A_ineq @ xc
        viol_hi = np.maximum(r - hi_ineq, 0.0)
        viol_lo = np.maximum(lo_ineq - r, 0.0)
        viol = float(max(viol_hi.max(), viol_lo.max()))
        obj = float(xc @ xc + reg_weight * np.sum((N @ xc - f_ref) ** 2))
        quad = float(0.5 * xc @ (P @ xc) + q @ xc)
        return eq_res, viol, obj, quad

    eq_res, viol, obj, quad = diagnostics(x)
    x_pol = _polish(P, q, A, lo, hi, x)
    if np.all(np.isfinite(x_pol)):
        eq_p, viol_p, obj_p, quad_p = diagnostics(x_pol)
        # accept the polish only if it degrades neither feasibility nor cost
        if (
            viol_p <= max(viol, 1e-10)
            and quad_p <= quad + 1e-9 * (1.0 + abs(quad))
            and (eq_penalty is not None or eq_p <= max(eq_res, 1e-9))
        ):
            x, eq_res, viol, obj = x_pol, eq_p, viol_p, obj_p

    eq_tol = 1e-6 * (1.0 + np.linalg.norm(w))
    feasible = bool(eq_res <= eq_tol and viol <= 1e-8) if eq_penalty is None else bool(viol <= 1e-8)
    return ContactForces(
        forces=x.reshape(k, 3),
        feasible=feasible,
        eq_residual=eq_res,
        objective=obj,
        iterations=iters,
        max_cone_violation=viol,
        duals=y,
    )
