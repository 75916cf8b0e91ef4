"""Primitive models, point-to-surface queries, minimal-sample fits and refinement.

Every query accepts a single point ``(3,)`` or a batch ``(N, 3)`` and returns
a matching shape. Models are immutable; fitting functions raise
:class:`DegenerateSample` / :class:`InconsistentSample` when a sample cannot
define a model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from . import kernels
from .classes import PrimitiveClass

_EX = np.array([1.0, 0.0, 0.0])
_EY = np.array([0.0, 1.0, 0.0])
_UNIT_TOL = 1e-9


class DegenerateSample(ValueError):
    """The sample does not determine a unique model."""


class InconsistentSample(ValueError):
    """The sample determines a model that disagrees with its own points."""


class DegenerateNormalQuery(ValueError):
    """Surface normal requested where it is undefined (apex, axis, center)."""


def _cross(a, b) -> np.ndarray:
    """Cross product of two 3-vectors (np.cross is slow for single vectors)."""
    return np.array(
        [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
    )


def _norm(v) -> float:
    return math.sqrt(float(np.dot(v, v)))


def _vec(v) -> np.ndarray:
    a = np.array(v, dtype=float).reshape(3)
    a.setflags(write=False)
    return a


def _unit(v) -> np.ndarray:
    a = np.asarray(v, dtype=float).reshape(3)
    n = _norm(a)
    if not np.isfinite(n) or n == 0.0:
        raise ValueError("zero-length direction")
    return _vec(a / n)


def _renormalize(u):
    n = _norm(u)
    return u if n == 1.0 else u / n


def _points(p):
    a = np.asarray(p, dtype=float)
    single = a.ndim == 1
    return np.atleast_2d(a), single


def _ret(a, single):
    return a[0] if single else a


def _fallback_radial(axis: np.ndarray) -> np.ndarray:
    """Deterministic unit direction perpendicular to ``axis`` (+x, then +y)."""
    for e in (_EX, _EY):
        r = e - np.dot(e, axis) * axis
        n = _norm(r)
        if n > 1e-6:
            return r / n
    raise AssertionError("unreachable: +x and +y both parallel to axis")


def _radial_dirs(radial: np.ndarray, rho: np.ndarray, axis: np.ndarray) -> np.ndarray:
    out = np.empty_like(radial)
    ok = rho > 1e-15
    out[ok] = radial[ok] / rho[ok, None]
    if not ok.all():
        out[~ok] = _fallback_radial(axis)
    return out


def tangent_basis(u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Two unit vectors completing ``u`` to a right-handed orthonormal frame."""
    u = np.asarray(u, dtype=float)
    helper = _EX if abs(u[0]) < 0.9 else _EY
    e1 = _cross(u, helper)
    e1 /= _norm(e1)
    e2 = _cross(u, e1)
    return e1, e2


def canonical_direction(u) -> np.ndarray:
    """Flip ``u`` so its first nonzero component among (z, y, x) is positive."""
    u = np.asarray(u, dtype=float)
    for i in (2, 1, 0):
        if abs(u[i]) > 1e-12:
            return u if u[i] > 0 else -u
    return u


# ---------------------------------------------------------------------------
# Models


@dataclass(frozen=True, eq=False)
class Plane:
    """Infinite plane ``{x : normal . x = offset}``."""

    normal: np.ndarray
    offset: float

    cls = PrimitiveClass.PLANE
    min_sample = 3
    n_params = 3

    def __post_init__(self):
        object.__setattr__(self, "normal", _vec(self.normal))
        object.__setattr__(self, "offset", float(self.offset))
        if abs(_norm(self.normal) - 1.0) > _UNIT_TOL:
            raise ValueError("plane normal must be unit length")

    def signed_distance(self, p):
        P, single = _points(p)
        return _ret(P @ self.normal - self.offset, single)

    def distance(self, p):
        return np.abs(self.signed_distance(p))

    def project(self, p):
        P, single = _points(p)
        s = P @ self.normal - self.offset
        return _ret(P - s[:, None] * self.normal, single)

    def normals_at_projection(self, p):
        P, single = _points(p)
        return _ret(np.broadcast_to(self.normal, P.shape).copy(), single)

    def perturb(self, delta) -> "Plane":
        e1, e2 = tangent_basis(self.normal)
        n = self.normal + delta[0] * e1 + delta[1] * e2
        return Plane(n / _norm(n), self.offset + delta[2])

    def as_array(self) -> np.ndarray:
        return np.array([*self.normal, self.offset, 0, 0, 0, 0])


@dataclass(frozen=True, eq=False)
class Sphere:
    center: np.ndarray
    radius: float

    cls = PrimitiveClass.SPHERE
    min_sample = 2
    n_params = 4

    def __post_init__(self):
        object.__setattr__(self, "center", _vec(self.center))
        object.__setattr__(self, "radius", float(self.radius))
        if not self.radius > 0:
            raise ValueError("sphere radius must be positive")

    def _dirs(self, P):
        v = P - self.center
        r = np.linalg.norm(v, axis=1)
        d = np.empty_like(v)
        ok = r > 1e-15
        d[ok] = v[ok] / r[ok, None]
        d[~ok] = _EX
        return d, r

    def signed_distance(self, p):
        P, single = _points(p)
        return _ret(np.linalg.norm(P - self.center, axis=1) - self.radius, single)

    def distance(self, p):
        return np.abs(self.signed_distance(p))

    def project(self, p):
        P, single = _points(p)
        d, _ = self._dirs(P)
        return _ret(self.center + self.radius * d, single)

    def normals_at_projection(self, p):
        P, single = _points(p)
        return _ret(self._dirs(P)[0], single)

    def perturb(self, delta) -> "Sphere":
        return Sphere(self.center + delta[:3], self.radius + delta[3])

    def as_array(self) -> np.ndarray:
        return np.array([*self.center, self.radius, 0, 0, 0, 0])


@dataclass(frozen=True, eq=False)
class Cylinder:
    """Infinite circular cylinder, stored canonically.

    ``axis_point`` is the axis point closest to the origin and ``axis_dir``
    has a positive leading component in (z, y, x) order.
    """

    axis_point: np.ndarray
    axis_dir: np.ndarray
    radius: float

    cls = PrimitiveClass.CYLINDER
    min_sample = 2
    n_params = 5

    def __post_init__(self):
        u = np.asarray(self.axis_dir, dtype=float)
        if abs(_norm(u) - 1.0) > _UNIT_TOL:
            raise ValueError("cylinder axis must be unit length")
        u = canonical_direction(_renormalize(u))
        a = np.asarray(self.axis_point, dtype=float)
        a = a - np.dot(a, u) * u
        object.__setattr__(self, "axis_dir", _vec(u))
        object.__setattr__(self, "axis_point", _vec(a))
        object.__setattr__(self, "radius", float(self.radius))
        if not self.radius > 0:
            raise ValueError("cylinder radius must be positive")

    @classmethod
    def from_canonical(cls, axis_point, axis_dir, radius) -> "Cylinder":
        """Rebuild from stored canonical values without re-canonicalising (bit-exact)."""
        obj = object.__new__(cls)
        object.__setattr__(obj, "axis_point", _vec(axis_point))
        object.__setattr__(obj, "axis_dir", _vec(axis_dir))
        object.__setattr__(obj, "radius", float(radius))
        return obj

    def _decompose(self, P):
        v = P - self.axis_point
        h = v @ self.axis_dir
        radial = v - h[:, None] * self.axis_dir
        rho = np.linalg.norm(radial, axis=1)
        return h, radial, rho

    def signed_distance(self, p):
        P, single = _points(p)
        _, _, rho = self._decompose(P)
        return _ret(rho - self.radius, single)

    def distance(self, p):
        return np.abs(self.signed_distance(p))

    def project(self, p):
        P, single = _points(p)
        h, radial, rho = self._decompose(P)
        e = _radial_dirs(radial, rho, self.axis_dir)
        q = self.axis_point + h[:, None] * self.axis_dir + self.radius * e
        return _ret(q, single)

    def normals_at_projection(self, p):
        P, single = _points(p)
        _, radial, rho = self._decompose(P)
        return _ret(_radial_dirs(radial, rho, self.axis_dir), single)

    def perturb(self, delta) -> "Cylinder":
        e1, e2 = tangent_basis(self.axis_dir)
        u = self.axis_dir + delta[0] * e1 + delta[1] * e2
        a = self.axis_point + delta[2] * e1 + delta[3] * e2
        return Cylinder(a, u / _norm(u), self.radius + delta[4])

    def as_array(self) -> np.ndarray:
        return np.array([*self.axis_point, *self.axis_dir, self.radius, 0])


@dataclass(frozen=True, eq=False)
class Cone:
    """Single-nappe cone; ``axis_dir`` points from the apex into the opening."""

    apex: np.ndarray
    axis_dir: np.ndarray
    half_angle: float

    cls = PrimitiveClass.CONE
    min_sample = 3
    n_params = 6

    def __post_init__(self):
        u = np.asarray(self.axis_dir, dtype=float)
        if abs(_norm(u) - 1.0) > _UNIT_TOL:
            raise ValueError("cone axis must be unit length")
        object.__setattr__(self, "apex", _vec(self.apex))
        object.__setattr__(self, "axis_dir", _vec(_renormalize(u)))
        object.__setattr__(self, "half_angle", float(self.half_angle))
        if not 0.0 < self.half_angle < np.pi / 2:
            raise ValueError("cone half angle must lie in (0, pi/2)")

    @classmethod
    def from_canonical(cls, apex, axis_dir, half_angle) -> "Cone":
        """Rebuild from stored values without renormalising (bit-exact)."""
        obj = object.__new__(cls)
        object.__setattr__(obj, "apex", _vec(apex))
        object.__setattr__(obj, "axis_dir", _vec(axis_dir))
        object.__setattr__(obj, "half_angle", float(half_angle))
        return obj

    def _decompose(self, P):
        v = P - self.apex
        h = v @ self.axis_dir
        radial = v - h[:, None] * self.axis_dir
        rho = np.linalg.norm(radial, axis=1)
        return v, h, radial, rho

    def signed_distance(self, p):
        """Distance with sign (+ outside); points clamped to the apex are +."""
        P, single = _points(p)
        v, h, _, rho = self._decompose(P)
        c, s = np.cos(self.half_angle), np.sin(self.half_angle)
        t = h * c + rho * s
        d = np.where(t > 0, rho * c - h * s, np.linalg.norm(v, axis=1))
        return _ret(d, single)

    def distance(self, p):
        return np.abs(self.signed_distance(p))

    def project(self, p):
        P, single = _points(p)
        _, h, radial, rho = self._decompose(P)
        c, s = np.cos(self.half_angle), np.sin(self.half_angle)
        t = np.maximum(h * c + rho * s, 0.0)
        e = _radial_dirs(radial, rho, self.axis_dir)
        q = self.apex + (t * c)[:, None] * self.axis_dir + (t * s)[:, None] * e
        return _ret(q, single)

    def normals_at_projection(self, p):
        P, single = _points(p)
        _, _, radial, rho = self._decompose(P)
        e = _radial_dirs(radial, rho, self.axis_dir)
        n = np.cos(self.half_angle) * e - np.sin(self.half_angle) * self.axis_dir
        return _ret(n, single)

    def perturb(self, delta) -> "Cone":
        e1, e2 = tangent_basis(self.axis_dir)
        u = self.axis_dir + delta[3] * e1 + delta[4] * e2
        return Cone(self.apex + delta[:3], u / _norm(u), self.half_angle + delta[5])

    def as_array(self) -> np.ndarray:
        return np.array([*self.apex, *self.axis_dir, self.half_angle, 0])


PrimitiveModel = Union[Plane, Sphere, Cylinder, Cone]

MODEL_TYPES = {m.cls: m for m in (Plane, Sphere, Cylinder, Cone)}


@dataclass(frozen=True, eq=False)
class OrientedPoint:
    position: np.ndarray
    normal: np.ndarray = field()

    def __post_init__(self):
        object.__setattr__(self, "position", _vec(self.position))
        n = _vec(self.normal)
        if abs(_norm(n) - 1.0) > _UNIT_TOL:
            raise ValueError("oriented point normal must be unit length")
        object.__setattr__(self, "normal", n)


def model_from_array(cls: PrimitiveClass, a) -> PrimitiveModel:
    """Inverse of ``model.as_array()``; the packed form used by kernels and files."""
    a = np.asarray(a, dtype=float)
    cls = PrimitiveClass(cls)
    if cls == PrimitiveClass.PLANE:
        return Plane(a[:3], a[3])
    if cls == PrimitiveClass.SPHERE:
        return Sphere(a[:3], a[3])
    if cls == PrimitiveClass.CYLINDER:
        return Cylinder(a[:3], a[3:6], a[6])
    if cls == PrimitiveClass.CONE:
        return Cone(a[:3], a[3:6], a[6])
    raise ValueError(f"not a primitive class: {cls!r}")


# ---------------------------------------------------------------------------
# Queries


def distance(model: PrimitiveModel, p):
    """Euclidean distance from ``p`` to the model surface."""
    return model.distance(p)


def project(model: PrimitiveModel, p):
    """Closest surface point; ties on a center/axis resolve along +x, then +y."""
    return model.project(p)


def surface_normal_at(model: PrimitiveModel, q, toward=None, tol: float = 1e-6) -> np.ndarray:
    """Outward unit normal at a surface point ``q``.

    Planes have no outward side; the returned normal points to the side of
    ``toward`` (default the origin).

    Raises:
        ValueError: ``q`` is farther than ``tol`` from the surface.
        DegenerateNormalQuery: ``q`` is a cone apex, or lies on an axis or center.
    """
    q = np.asarray(q, dtype=float).reshape(3)
    if model.distance(q) > tol:
        raise ValueError("query point is not on the surface")
    if isinstance(model, Plane):
        ref = np.zeros(3) if toward is None else np.asarray(toward, dtype=float)
        n = model.normal
        return n.copy() if np.dot(n, ref - q) >= 0 else -n
    if isinstance(model, Sphere):
        if _norm(q - model.center) < 1e-12:
            raise DegenerateNormalQuery("degenerate normal query")
    else:
        origin = model.axis_point if isinstance(model, Cylinder) else model.apex
        v = q - origin
        radial = v - np.dot(v, model.axis_dir) * model.axis_dir
        if _norm(radial) < 1e-12:
            raise DegenerateNormalQuery("degenerate normal query")
    return model.normals_at_projection(q)


# ---------------------------------------------------------------------------
# Minimal-sample fits


def fit_plane_min(p1, p2, p3) -> Plane:
    p1, p2, p3 = (np.asarray(p, dtype=float) for p in (p1, p2, p3))
    n = _cross(p2 - p1, p3 - p1)
    area2 = _norm(n)
    if area2 <= 2e-12:
        raise DegenerateSample("degenerate sample: collinear points")
    n = n / area2
    return Plane(n, float(np.dot(n, p1)))


def _closest_line_params(p1, d1, p2, d2):
    # Minimise |p1 + t d1 - (p2 + s d2)| for the two line parameters.
    w = p1 - p2
    a, b, c = d1 @ d1, d1 @ d2, d2 @ d2
    d, e = d1 @ w, d2 @ w
    den = a * c - b * b
    return (b * e - c * d) / den, (a * e - b * d) / den


def fit_sphere_min(s1: OrientedPoint, s2: OrientedPoint, rel_tol: float = 0.1) -> Sphere:
    p1, n1, p2, n2 = s1.position, s1.normal, s2.position, s2.normal
    if _norm(_cross(n1, n2)) < 1e-6:
        raise DegenerateSample("degenerate sample: parallel normals")
    t, s = _closest_line_params(p1, n1, p2, n2)
    center = 0.5 * ((p1 + t * n1) + (p2 + s * n2))
    r1 = _norm(center - p1)
    r2 = _norm(center - p2)
    r = 0.5 * (r1 + r2)
    if r <= 0 or abs(r1 - r2) > rel_tol * r:
        raise InconsistentSample("inconsistent sample: radii disagree")
    return Sphere(center, r)


def fit_cylinder_min(s1: OrientedPoint, s2: OrientedPoint) -> Cylinder:
    p1, n1, p2, n2 = s1.position, s1.normal, s2.position, s2.normal
    axis = _cross(n1, n2)
    na = _norm(axis)
    if na <= 1e-9:
        raise DegenerateSample("degenerate sample: parallel normals")
    axis = axis / na
    e1, e2 = tangent_basis(axis)
    B = np.stack([e1, e2])
    q1, q2 = B @ p1, B @ p2
    m1, m2 = B @ n1, B @ n2
    A = np.column_stack([m1, -m2])
    if abs(np.linalg.det(A)) < 1e-9 * _norm(m1) * _norm(m2):
        raise DegenerateSample("degenerate sample: projected normals parallel")
    t, _ = np.linalg.solve(A, q2 - q1)
    c2d = q1 + t * m1
    axis_point = c2d[0] * e1 + c2d[1] * e2
    radius = float(_norm(c2d - q1))
    if radius <= 0:
        raise DegenerateSample("degenerate sample: zero radius")
    return Cylinder(axis_point, axis, radius)


def fit_cone_min(
    s1: OrientedPoint,
    s2: OrientedPoint,
    s3: OrientedPoint,
    angle_tol: float = np.deg2rad(1.0),
    max_cond: float = 1e8,
) -> Cone:
    P = np.stack([s1.position, s2.position, s3.position])
    N = np.stack([s1.normal, s2.normal, s3.normal])
    if np.linalg.cond(N) > max_cond:
        raise DegenerateSample("degenerate sample: tangent planes do not meet in a point")
    apex = np.linalg.solve(N, np.einsum("ij,ij->i", N, P))
    V = P - apex
    lens = np.linalg.norm(V, axis=1)
    scale = max(1.0, float(np.abs(P).max()))
    if lens.min() < 1e-9 * scale:
        raise DegenerateSample("degenerate sample: point at apex")
    W = V / lens[:, None]
    axis = _cross(W[1] - W[0], W[2] - W[0])
    na = _norm(axis)
    if na < 1e-12:
        raise DegenerateSample("degenerate sample: generatrix directions coplanar with apex")
    axis /= na
    cosines = W @ axis
    if np.all(cosines < 0):
        axis, cosines = -axis, -cosines
    if not np.all(cosines > 0):
        raise InconsistentSample("inconsistent sample: points on both nappes")
    angles = np.arccos(np.clip(cosines, -1.0, 1.0))
    if angles.max() - angles.min() > angle_tol:
        raise InconsistentSample("inconsistent sample: opening angles disagree")
    theta = float(angles.mean())
    if not 0.0 < theta < np.pi / 2:
        raise InconsistentSample("inconsistent sample: invalid opening angle")
    return Cone(apex, axis, theta)


def fit_min(cls: PrimitiveClass, samples: Sequence[OrientedPoint]) -> PrimitiveModel:
    """Dispatch to the minimal fit of ``cls`` using its first ``min_sample`` samples."""
    if cls == PrimitiveClass.PLANE:
        return fit_plane_min(*(s.position for s in samples[:3]))
    if cls == PrimitiveClass.SPHERE:
        return fit_sphere_min(*samples[:2])
    if cls == PrimitiveClass.CYLINDER:
        return fit_cylinder_min(*samples[:2])
    if cls == PrimitiveClass.CONE:
        return fit_cone_min(*samples[:3])
    raise ValueError(f"not a primitive class: {cls!r}")


# ---------------------------------------------------------------------------
# Least-squares refinement


@dataclass(frozen=True, eq=False)
class RefitResult:
    model: PrimitiveModel
    converged: bool
    failed: bool = False
    iterations: int = 0
    # Final iterate; differs from ``model`` only when the budget ran out.
    last: Optional[PrimitiveModel] = None


def _residuals(model, P):
    r = kernels.signed_distances(int(model.cls), model.as_array()[None], P)[0]
    return r, float(r @ r)


def refit_least_squares(
    model: PrimitiveModel,
    points,
    max_iter: int = 20,
    step_tol: float = 1e-8,
    fd_step: float = 1e-7,
) -> RefitResult:
    """Gauss-Newton on the sum of squared point-to-surface distances.

    Each iteration linearises a minimal local parameterisation around the
    current model (tangent-plane angles for directions), so no gauge
    freedom enters the normal equations. Steps are halved until the cost
    decreases, which makes the cost monotone. The seed is returned
    unchanged (``converged=False``) when the iteration budget runs out, and
    with ``failed=True`` when the Jacobian is rank deficient.

    ``points`` may be an ``(N, 3)`` array or a list of :class:`OrientedPoint`.
    """
    if len(points) and isinstance(points[0], OrientedPoint):
        P = np.stack([s.position for s in points])
    else:
        P = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(P) < model.min_sample:
        raise ValueError("not enough points for refit")

    k = model.n_params
    current = model
    r0, cost = _residuals(current, P)
    for it in range(1, max_iter + 1):
        # All +/- perturbations are evaluated in one batched kernel call.
        D = fd_step * np.eye(k)
        try:
            shifted = np.array([current.perturb(s * d).as_array() for d in D for s in (1.0, -1.0)])
        except ValueError:
            return RefitResult(model, converged=False, failed=True, iterations=it)
        R = kernels.signed_distances(int(current.cls), shifted, P)
        J = ((R[0::2] - R[1::2]) / (2 * fd_step)).T
        sv = np.linalg.svd(J, compute_uv=False)
        if len(sv) < k or sv[-1] <= sv[0] * 1e-10:
            return RefitResult(model, converged=False, failed=True, iterations=it)
        step = np.linalg.lstsq(J, -r0, rcond=None)[0]
        if _norm(step) < step_tol:
            return RefitResult(current, converged=True, iterations=it)
        accepted = False
        for _ in range(30):
            try:
                trial = current.perturb(step)
            except ValueError:
                step = step * 0.5
                continue
            tr, tcost = _residuals(trial, P)
            if tcost <= cost:
                accepted = True
                break
            step = step * 0.5
        if not accepted or _norm(step) < step_tol:
            # No descent along the Gauss-Newton direction: stationary point.
            if accepted:
                current = trial
            return RefitResult(current, converged=True, iterations=it)
        current, cost, r0 = trial, tcost, tr
    return RefitResult(model, converged=False, iterations=max_iter, last=current)
