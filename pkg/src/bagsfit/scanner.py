"""Virtual depth scanner: exact ray casting of bounded primitives and patches."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .classes import PrimitiveClass
from .geometry import Cone, Cylinder, Plane, Sphere
from .rangeimage import Intrinsics, LabelMap, RangeImage
from .scene import AxialExtent, BezierPatch, DiskExtent, Instance, RectExtent, ScanPose, SceneDescription

_T_EPS = 1e-6


@dataclass
class ScannerConfig:
    width: int = 640
    height: int = 480
    intrinsics: Intrinsics = field(default_factory=Intrinsics)
    noise_sigma: float = 0.005
    # "constant" or "quadratic" (sigma * (z / 2 m)^2)
    noise_model: str = "constant"
    min_range: float = 0.4
    max_range: float = 8.0
    patch_steps: int = 48

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.noise_model not in ("constant", "quadratic"):
            raise ValueError(f"unknown noise model {self.noise_model!r}")


def camera_rays(cfg: ScannerConfig) -> np.ndarray:
    """Per-pixel camera-frame directions scaled to unit z, shape ``(H*W, 3)``."""
    k = cfg.intrinsics
    v, u = np.mgrid[0 : cfg.height, 0 : cfg.width].astype(float)
    return np.stack([(u - k.cx) / k.fx, (v - k.cy) / k.fy, np.ones_like(u)], axis=-1).reshape(-1, 3)


def _smallest_valid(roots, valid):
    t = np.where(valid, roots, np.inf)
    return t.min(axis=0)


def _quadratic_roots(a, b, c):
    """Both real roots of ``a t^2 + b t + c``; NaN where none. Handles a ~ 0."""
    disc = b * b - 4 * a * c
    ok = disc >= 0
    sq = np.sqrt(np.where(ok, disc, 0.0))
    # Numerically stable form.
    q = -0.5 * (b + np.copysign(sq, b))
    with np.errstate(divide="ignore", invalid="ignore"):
        r1 = np.where(np.abs(a) > 1e-14, q / a, -c / b)
        r2 = np.where(np.abs(q) > 0, c / q, r1)
    r1 = np.where(ok, r1, np.nan)
    r2 = np.where(ok, r2, np.nan)
    return np.stack([r1, r2])


def intersect(surface, origin: np.ndarray, D: np.ndarray) -> np.ndarray:
    """Ray parameter of the nearest hit of ``origin + t * D`` (inf for a miss)."""
    if isinstance(surface, BezierPatch):
        return _intersect_patch(surface, origin, D)
    m, e = surface.model, surface.extent
    if isinstance(m, Plane):
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (m.offset - m.normal @ origin) / (D @ m.normal)
        X = origin + t[:, None] * D
        rel = X - e.center
        if isinstance(e, RectExtent):
            v = np.cross(m.normal, e.u)
            inside = (np.abs(rel @ e.u) <= e.half_u) & (np.abs(rel @ v) <= e.half_v)
        else:
            inside = np.einsum("ij,ij->i", rel, rel) <= e.radius**2
        ok = np.isfinite(t) & (t > _T_EPS) & inside
        return np.where(ok, t, np.inf)
    if isinstance(m, Sphere):
        w = origin - m.center
        roots = _quadratic_roots(np.einsum("ij,ij->i", D, D), 2 * D @ w, np.full(len(D), w @ w - m.radius**2))
        return _smallest_valid(roots, roots > _T_EPS)
    if isinstance(m, Cylinder):
        u = m.axis_dir
        w = origin - m.axis_point
        Dp = D - np.outer(D @ u, u)
        wp = w - (w @ u) * u
        roots = _quadratic_roots(np.einsum("ij,ij->i", Dp, Dp), 2 * Dp @ wp, np.full(len(D), wp @ wp - m.radius**2))
        h = (w @ u) + roots * (D @ u)
        return _smallest_valid(roots, (roots > _T_EPS) & (h >= e.t_min) & (h <= e.t_max))
    if isinstance(m, Cone):
        u = m.axis_dir
        w = origin - m.apex
        c2 = np.cos(m.half_angle) ** 2
        du = D @ u
        wu = w @ u
        a = du * du - c2 * np.einsum("ij,ij->i", D, D)
        b = 2 * (du * wu - c2 * (D @ w))
        c = np.full(len(D), wu * wu - c2 * (w @ w))
        roots = _quadratic_roots(a, b, c)
        h = wu + roots * du
        return _smallest_valid(roots, (roots > _T_EPS) & (h >= e.t_min) & (h <= e.t_max))
    raise TypeError(f"cannot intersect {surface!r}")


def _intersect_patch(p: BezierPatch, origin, D, steps: int = 48, iters: int = 50) -> np.ndarray:
    u, v, w = p.frame
    o = origin - p.origin
    # Local ray: a(t) = (oa + t da) / size_u, b(t) likewise, height coordinate z(t).
    oa, ob, oz = (o @ u) / p.size_u, (o @ v) / p.size_v, o @ w
    da, db, dz = (D @ u) / p.size_u, (D @ v) / p.size_v, D @ w
    lo_h, hi_h = float(p.heights.min()), float(p.heights.max())
    t0 = np.full(len(D), _T_EPS)
    t1 = np.full(len(D), np.inf)
    for oc, dc, lo, hi in ((oa, da, 0.0, 1.0), (ob, db, 0.0, 1.0), (oz, dz, lo_h, hi_h)):
        with np.errstate(divide="ignore", invalid="ignore"):
            ta = (lo - oc) / dc
            tb = (hi - oc) / dc
        par = np.abs(dc) < 1e-15
        near = np.where(par, np.where((oc >= lo) & (oc <= hi), -np.inf, np.inf), np.minimum(ta, tb))
        far = np.where(par, np.where((oc >= lo) & (oc <= hi), np.inf, -np.inf), np.maximum(ta, tb))
        t0 = np.maximum(t0, near)
        t1 = np.minimum(t1, far)
    out = np.full(len(D), np.inf)
    idx = np.flatnonzero(t0 < t1)
    if idx.size == 0:
        return out
    t0, t1 = t0[idx], t1[idx]
    da, db, dz = da[idx], db[idx], dz[idx]

    def f(t):
        a = np.clip(oa + t * da, 0.0, 1.0)
        b = np.clip(ob + t * db, 0.0, 1.0)
        return (oz + t * dz) - p.height(a, b)

    ts = t0[:, None] + (t1 - t0)[:, None] * np.linspace(0.0, 1.0, steps)[None, :]
    vals = f(ts.T).T
    sign_change = np.signbit(vals[:, :-1]) != np.signbit(vals[:, 1:])
    has = sign_change.any(axis=1)
    k = np.argmax(sign_change, axis=1)
    rows = np.flatnonzero(has)
    lo_t = ts[rows, k[rows]]
    hi_t = ts[rows, k[rows] + 1]
    f_lo = vals[rows, k[rows]]
    da, db, dz = da[rows], db[rows], dz[rows]
    for _ in range(iters):
        mid = 0.5 * (lo_t + hi_t)
        a = np.clip(oa + mid * da, 0.0, 1.0)
        b = np.clip(ob + mid * db, 0.0, 1.0)
        fm = (oz + mid * dz) - p.height(a, b)
        same = np.signbit(fm) == np.signbit(f_lo)
        lo_t = np.where(same, mid, lo_t)
        f_lo = np.where(same, fm, f_lo)
        hi_t = np.where(same, hi_t, mid)
    out[idx[rows]] = 0.5 * (lo_t + hi_t)
    return out


def cast(scene: SceneDescription, origin: np.ndarray, D: np.ndarray):
    """Nearest hit parameter and surface id for each ray (id 0 for a miss)."""
    best = np.full(len(D), np.inf)
    ids = np.zeros(len(D), dtype=np.uint32)
    for s in scene.surfaces():
        t = intersect(s, origin, D)
        closer = t < best
        best[closer] = t[closer]
        ids[closer] = s.instance_id
    return best, ids


def render_scan(
    scene: SceneDescription,
    pose: ScanPose,
    config: Optional[ScannerConfig] = None,
    seed: int = 0,
) -> tuple[RangeImage, LabelMap]:
    """Ray-cast one range image and its pre-noise ground-truth labels.

    Rays are scaled so the hit parameter equals camera-frame depth. Noise is
    added to depth, which moves the point along its pixel ray. Misses,
    out-of-range hits and non-positive noisy depths become invalid pixels.
    """
    cfg = config or ScannerConfig()
    T = np.asarray(pose.camera_pose if isinstance(pose, ScanPose) else pose, dtype=float)
    D = camera_rays(cfg) @ T[:3, :3].T
    z, ids = cast(scene, T[:3, 3], D)
    valid = np.isfinite(z) & (z >= cfg.min_range) & (z <= cfg.max_range)
    if cfg.noise_sigma > 0:
        rng = np.random.default_rng(seed)
        noise = rng.normal(0.0, 1.0, z.shape)
        sigma = cfg.noise_sigma
        if cfg.noise_model == "quadratic":
            sigma = cfg.noise_sigma * (np.where(valid, z, 0.0) / 2.0) ** 2
        z = np.where(valid, z + sigma * noise, 0.0)
    depth = np.where(valid, z, 0.0).astype(np.float32)
    valid &= depth > 0
    depth[~valid] = 0.0
    ids = np.where(valid, ids, 0).astype(np.uint32)
    cls_of = np.zeros(max(s.instance_id for s in scene.surfaces()) + 1, dtype=np.uint8)
    for s in scene.surfaces():
        cls_of[s.instance_id] = int(s.cls)
    cls = cls_of[ids]
    shape = (cfg.height, cfg.width)
    img = RangeImage(depth.reshape(shape), cfg.intrinsics, T)
    return img, LabelMap(cls.reshape(shape), ids.reshape(shape))
