"""Rest-to-rest quintic time scaling and straight-line Cartesian segments.

The scalar profile s(t) is a degree-5 polynomial satisfying
s(0)=s'(0)=s''(0)=0, s(T)=n, s'(T)=s''(T)=0, which keeps acceleration
continuous at both endpoints.  Queries outside [0, T] clamp to the endpoint
states; extrapolated quintics diverge and controllers routinely poll past
the nominal end time.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geom import require_finite


@dataclass(frozen=True)
class QuinticCoeffs:
    """Coefficients a0..a5 of s(t) plus the duration they were built for."""

    a: np.ndarray
    duration: float

    def __post_init__(self):
        a = require_finite(self.a, "coefficients")
        if a.shape != (6,):
            raise ValueError("expected 6 coefficients")
        if not (np.isfinite(self.duration) and self.duration > 0):
            raise ValueError(f"duration must be > 0, got {self.duration}")
        object.__setattr__(self, "a", a)


def quintic_coeffs(n: float, T: float) -> QuinticCoeffs:
    """Rest-to-rest coefficients for displacement n over duration T."""
    if not np.isfinite(n):
        raise ValueError(f"displacement must be finite, got {n}")
    if not (np.isfinite(T) and T > 0):
        raise ValueError(f"duration must be > 0, got {T}")
    a = np.zeros(6)
    a[3] = 10.0 * n / T**3
    a[4] = -15.0 * n / T**4
    a[5] = 6.0 * n / T**5
    return QuinticCoeffs(a, T)


def eval_quintic(c: QuinticCoeffs, t: float):
    """(s, sdot, sddot) at time t, clamped to [0, duration]."""
    t = min(max(float(t), 0.0), c.duration)
    a = c.a
    s = a[0] + t * (a[1] + t * (a[2] + t * (a[3] + t * (a[4] + t * a[5]))))
    sdot = a[1] + t * (2 * a[2] + t * (3 * a[3] + t * (4 * a[4] + t * 5 * a[5])))
    sddot = 2 * a[2] + t * (6 * a[3] + t * (12 * a[4] + t * 20 * a[5]))
    return s, sdot, sddot


@dataclass(frozen=True)
class TimedPath3:
    """Straight segment start -> end with quintic time scaling.

    Built in normalized form (s runs 0..1) unless ``metric`` was requested,
    in which case s runs 0..|end - start| along the unit direction.
    """

    start: np.ndarray
    end: np.ndarray
    duration: float
    coeffs: QuinticCoeffs
    metric: bool = False
    _direction: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        p0 = require_finite(self.start, "start")
        p1 = require_finite(self.end, "end")
        if p0.shape != (3,) or p1.shape != (3,):
            raise ValueError("start/end must be 3-vectors")
        object.__setattr__(self, "start", p0)
        object.__setattr__(self, "end", p1)
        if self.metric:
            d = p1 - p0
            length = np.linalg.norm(d)
            direction = d / length if length > 0 else np.zeros(3)
        else:
            direction = p1 - p0
        object.__setattr__(self, "_direction", direction)

    def sample(self, t: float):
        """(position, velocity, acceleration) at time t (endpoint-clamped)."""
        s, sdot, sddot = eval_quintic(self.coeffs, t)
        d = self._direction
        return self.start + s * d, sdot * d, sddot * d


def point_to_point(p0, p1, T: float, metric: bool = False) -> TimedPath3:
    """Plan a straight quintic-scaled segment from p0 to p1 over T seconds.

    A zero-length segment is valid and yields a stationary path.
    """
    p0 = require_finite(p0, "p0")
    p1 = require_finite(p1, "p1")
    if metric:
        n = float(np.linalg.norm(p1 - p0))
        c = quintic_coeffs(n, T)
    else:
        c = quintic_coeffs(1.0, T)
    return TimedPath3(p0, p1, T, c, metric=metric)
