"""3D math primitives (vectors, quaternions, poses) and cube face geometry.

Conventions used throughout the package:

* vectors are ``np.ndarray`` of shape (3,), float64, meters
* quaternions are ``np.ndarray`` of shape (4,) stored ``(w, x, y, z)``,
  kept unit norm; renormalize after composition chains to control drift
* poses transform local coordinates into world: ``world = R(q) @ local + p``

Cube faces are addressed by :class:`FaceId`.  A contact on a face is a
:class:`ContactSpec`: normalized in-face coordinates ``(u, v)`` in [-1, 1]
that map onto the central 60% of the face, so the planner's action space is
a fixed box regardless of cube size.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

_QUAT_NORM_TOL = 1e-9

# fraction of the full face half-extent reachable by contacts: uv = +-1 maps
# to +-0.3 * edge from the face center, i.e. the central 60% of the face
CONTACT_REGION_HALF_FRACTION = 0.3


def vec3(x, y, z) -> np.ndarray:
    return np.array([x, y, z], dtype=np.float64)


def cross3(a, b) -> np.ndarray:
    """Cross product of two 3-vectors without np.cross dispatch overhead."""
    return np.array(
        [
            a[1] * b[2] - a[2] * b[1],
            a[2] * b[0] - a[0] * b[2],
            a[0] * b[1] - a[1] * b[0],
        ]
    )


def require_finite(arr, name: str):
    a = np.asarray(arr, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite values: {a!r}")
    return a


# ---------------------------------------------------------------------------
# quaternions (w, x, y, z)
# ---------------------------------------------------------------------------

def quat_identity() -> np.ndarray:
    return np.array([1.0, 0.0, 0.0, 0.0])


def quat_normalize(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if not np.isfinite(n) or n < 1e-12:
        raise ValueError(f"cannot normalize quaternion {q!r}")
    return q / n


def quat_multiply(a, b) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_conjugate(q) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_rotate(q, v) -> np.ndarray:
    """Rotate vector v by unit quaternion q (q v q*)."""
    w = q[0]
    u = np.asarray(q[1:], dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    # Rodrigues-style expansion, cheaper than building the matrix
    uv = cross3(u, v)
    return v + 2.0 * (w * uv + cross3(u, uv))


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def quat_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(axis)
    if n < 1e-12:
        raise ValueError("axis must be nonzero")
    half = 0.5 * angle
    q = np.empty(4)
    q[0] = np.cos(half)
    q[1:] = (np.sin(half) / n) * axis
    return q


def quat_from_rotvec(rv) -> np.ndarray:
    """Exponential map: rotation vector (axis * angle) to quaternion."""
    rv = np.asarray(rv, dtype=np.float64)
    angle = np.linalg.norm(rv)
    if angle < 1e-12:
        # second-order small-angle expansion keeps the update smooth at 0
        q = np.empty(4)
        q[0] = 1.0 - angle * angle / 8.0
        q[1:] = 0.5 * rv
        return quat_normalize(q)
    return quat_from_axis_angle(rv, angle)


def rotation_log(q) -> np.ndarray:
    """Rotation vector (axis * angle, in [0, pi]) of a unit quaternion."""
    q = np.asarray(q, dtype=np.float64)
    if q[0] < 0.0:
        q = -q
    w = min(q[0], 1.0)
    s = np.linalg.norm(q[1:])
    if s < 1e-12:
        return 2.0 * q[1:]
    angle = 2.0 * np.arctan2(s, w)
    return (angle / s) * q[1:]


# ---------------------------------------------------------------------------
# pose
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Pose:
    """Rigid transform: position (m) plus unit-quaternion orientation."""

    position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    orientation: np.ndarray = field(default_factory=quat_identity)

    def __post_init__(self):
        p = require_finite(self.position, "position")
        q = require_finite(self.orientation, "orientation")
        if p.shape != (3,) or q.shape != (4,):
            raise ValueError("Pose expects position (3,) and quaternion (4,)")
        n = np.linalg.norm(q)
        if abs(n - 1.0) > _QUAT_NORM_TOL:
            q = q / n
        object.__setattr__(self, "position", p)
        object.__setattr__(self, "orientation", q)

    def transform(self, local) -> np.ndarray:
        return quat_rotate(self.orientation, local) + self.position

    def inverse_transform(self, world) -> np.ndarray:
        return quat_rotate(
            quat_conjugate(self.orientation), np.asarray(world) - self.position
        )

    def compose(self, other: "Pose") -> "Pose":
        """self applied after other's frame: world <- self <- other."""
        return Pose(
            self.transform(other.position),
            quat_normalize(quat_multiply(self.orientation, other.orientation)),
        )


def transform_point(pose: Pose, local) -> np.ndarray:
    return pose.transform(require_finite(local, "local point"))


# ---------------------------------------------------------------------------
# cube geometry
# ---------------------------------------------------------------------------

class FaceId(IntEnum):
    PX = 0
    NX = 1
    PY = 2
    NY = 3
    PZ = 4
    NZ = 5

    @property
    def axis(self) -> int:
        return int(self) // 2

    @property
    def sign(self) -> float:
        return 1.0 if int(self) % 2 == 0 else -1.0

    @property
    def opposite(self) -> "FaceId":
        return FaceId(int(self) ^ 1)


SIDE_FACES = (FaceId.PX, FaceId.NX, FaceId.PY, FaceId.NY)

_FACE_NORMALS = np.array(
    [
        [1.0, 0.0, 0.0],
        [-1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
        [0.0, -1.0, 0.0],
        [0.0, 0.0, 1.0],
        [0.0, 0.0, -1.0],
    ]
)

# (u, v) tangent directions per face, fixed so the action parameterization
# is unambiguous: x-ish axis first, then the next axis in x, y, z order
_FACE_TANGENTS = np.array(
    [
        [[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],  # +X
        [[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],  # -X
        [[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]],  # +Y
        [[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]],  # -Y
        [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],  # +Z
        [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],  # -Z
    ]
)


def face_normal_local(face: FaceId) -> np.ndarray:
    return _FACE_NORMALS[int(face)].copy()


def face_tangents_local(face: FaceId):
    t = _FACE_TANGENTS[int(face)]
    return t[0].copy(), t[1].copy()


def face_normal_world(pose: Pose, face: FaceId) -> np.ndarray:
    return quat_rotate(pose.orientation, _FACE_NORMALS[int(face)])


@dataclass(frozen=True)
class CubeGeometry:
    """Rigid cube parameters; inertia defaults to the solid-cube diagonal."""

    edge_length: float = 0.065
    mass: float = 0.094
    friction_coeff: float = 0.8
    inertia_diag: np.ndarray | None = None

    def __post_init__(self):
        if not (np.isfinite(self.edge_length) and self.edge_length > 0):
            raise ValueError(f"edge_length must be > 0, got {self.edge_length}")
        if not (np.isfinite(self.mass) and self.mass > 0):
            raise ValueError(f"mass must be > 0, got {self.mass}")
        if not (np.isfinite(self.friction_coeff) and 0 < self.friction_coeff <= 2):
            raise ValueError(
                f"friction_coeff must be in (0, 2], got {self.friction_coeff}"
            )
        if self.inertia_diag is None:
            i = self.mass * self.edge_length**2 / 6.0
            object.__setattr__(self, "inertia_diag", np.array([i, i, i]))
        else:
            inert = require_finite(self.inertia_diag, "inertia_diag")
            if inert.shape != (3,) or np.any(inert <= 0):
                raise ValueError(f"inertia_diag must be 3 positive values: {inert!r}")
            object.__setattr__(self, "inertia_diag", inert)

    @property
    def half_edge(self) -> float:
        return 0.5 * self.edge_length


@dataclass(frozen=True)
class ContactSpec:
    """A fingertip contact: face id plus normalized in-face coordinates.

    ``uv`` lives in [-1, 1]^2 and spans the central 60% of the face.
    """

    face: FaceId
    uv: tuple[float, float]

    def __post_init__(self):
        u, v = float(self.uv[0]), float(self.uv[1])
        if not (np.isfinite(u) and np.isfinite(v)):
            raise ValueError(f"uv must be finite, got {self.uv!r}")
        if abs(u) > 1.0 or abs(v) > 1.0:
            raise ValueError(f"uv must lie in [-1, 1]^2, got {self.uv!r}")
        object.__setattr__(self, "face", FaceId(self.face))
        object.__setattr__(self, "uv", (u, v))


def contact_point_local(geom: CubeGeometry, spec: ContactSpec) -> np.ndarray:
    """Cube-frame contact point for a face/(u,v) spec.

    The point sits on the face plane, offset from the face center by
    ``uv * 0.3 * edge`` along the face tangent axes.
    """
    u, v = spec.uv
    scale = CONTACT_REGION_HALF_FRACTION * geom.edge_length
    t1, t2 = _FACE_TANGENTS[int(spec.face)]
    return (
        geom.half_edge * _FACE_NORMALS[int(spec.face)]
        + scale * (u * t1 + v * t2)
    )


def contact_point_world(geom: CubeGeometry, pose: Pose, spec: ContactSpec) -> np.ndarray:
    return pose.transform(contact_point_local(geom, spec))
