"""Random room scenes with bounded primitives, and the scan-pose protocol.

Scenes are plain data; :mod:`bagsfit.scanner` ray-casts them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .classes import PrimitiveClass
from .geometry import Cone, Cylinder, Plane, PrimitiveModel, Sphere, tangent_basis

AXES = np.eye(3)


class PlacementError(RuntimeError):
    """Raised when objects cannot be placed; ``partial`` holds what was placed."""

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial


# ---------------------------------------------------------------------------
# Extents


@dataclass(frozen=True, eq=False)
class RectExtent:
    """Rectangle on a plane: ``center + a*u + b*v`` with |a| <= half_u, |b| <= half_v."""

    center: np.ndarray
    u: np.ndarray
    half_u: float
    half_v: float


@dataclass(frozen=True, eq=False)
class DiskExtent:
    center: np.ndarray
    radius: float


@dataclass(frozen=True)
class AxialExtent:
    """Axial range: cylinder offsets from ``axis_point`` or cone heights from the apex."""

    t_min: float
    t_max: float


@dataclass(frozen=True)
class FullExtent:
    pass


Extent = Union[RectExtent, DiskExtent, AxialExtent, FullExtent]


@dataclass(frozen=True, eq=False)
class Instance:
    instance_id: int
    model: PrimitiveModel
    extent: Extent

    @property
    def cls(self) -> PrimitiveClass:
        return self.model.cls

    def bounding_sphere(self) -> tuple[np.ndarray, float]:
        m, e = self.model, self.extent
        if isinstance(m, Sphere):
            return m.center, m.radius
        if isinstance(e, RectExtent):
            return e.center, math.hypot(e.half_u, e.half_v)
        if isinstance(e, DiskExtent):
            return e.center, e.radius
        if isinstance(m, Cylinder):
            mid = m.axis_point + 0.5 * (e.t_min + e.t_max) * m.axis_dir
            return mid, math.hypot(0.5 * (e.t_max - e.t_min), m.radius)
        # Cone frustum: enclose both rims.
        h0, h1 = e.t_min, e.t_max
        mid = m.apex + 0.5 * (h0 + h1) * m.axis_dir
        r1 = h1 * math.tan(m.half_angle)
        return mid, math.hypot(0.5 * (h1 - h0), r1)


@dataclass(frozen=True, eq=False)
class BezierPatch:
    """Bicubic height-field patch standing in for a freeform surface.

    Surface point for ``(a, b)`` in the unit square::

        origin + a*size_u*u + b*size_v*v + h(a, b)*w

    where ``h`` is the Bernstein blend of the 4x4 control ``heights``.
    """

    instance_id: int
    origin: np.ndarray
    frame: np.ndarray  # rows u, v, w
    size_u: float
    size_v: float
    heights: np.ndarray  # (4, 4)

    cls = PrimitiveClass.OTHER

    def height(self, a, b):
        return np.einsum("...i,ij,...j->...", _bernstein(a), self.heights, _bernstein(b))

    def point(self, a, b):
        u, v, w = self.frame
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        h = self.height(a, b)
        return (
            self.origin
            + (a * self.size_u)[..., None] * u
            + (b * self.size_v)[..., None] * v
            + h[..., None] * w
        )

    def bounding_sphere(self) -> tuple[np.ndarray, float]:
        c = self.point(0.5, 0.5)
        hspan = float(np.ptp(self.heights))
        return c, 0.5 * math.sqrt(self.size_u**2 + self.size_v**2 + hspan**2) + hspan


def _bernstein(t):
    t = np.asarray(t, dtype=float)
    s = 1.0 - t
    return np.stack([s**3, 3 * s**2 * t, 3 * s * t**2, t**3], axis=-1)


@dataclass(frozen=True, eq=False)
class SceneDescription:
    room_min: np.ndarray
    room_max: np.ndarray
    instances: tuple[Instance, ...]
    other_surfaces: tuple[BezierPatch, ...]
    table_id: int

    @property
    def table(self) -> Instance:
        return next(i for i in self.instances if i.instance_id == self.table_id)

    @property
    def table_center(self) -> np.ndarray:
        return self.table.extent.center

    def surfaces(self):
        return list(self.instances) + list(self.other_surfaces)

    def by_id(self) -> dict:
        return {s.instance_id: s for s in self.surfaces()}


# ---------------------------------------------------------------------------
# Generation


@dataclass
class SceneConfig:
    room_extent: float = 10.0
    room_height: float = 3.5
    n_spheres: int = 2
    n_cylinders: int = 3
    n_cones: int = 3
    n_boxes: int = 1
    n_disks: int = 2
    n_other: int = 2
    axis_aligned_fraction: float = 0.5
    placement_radius: float = 2.0
    overlap_factor: float = 0.5
    max_retries: int = 200


def _random_unit(rng) -> np.ndarray:
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def _biased_direction(rng, cfg: SceneConfig) -> tuple[np.ndarray, bool]:
    if rng.random() < cfg.axis_aligned_fraction:
        return AXES[rng.integers(3)] * rng.choice([-1.0, 1.0]), True
    return _random_unit(rng), False


def _room_planes(lo, hi):
    out = []
    c = 0.5 * (lo + hi)
    half = 0.5 * (hi - lo)
    for axis in range(3):
        for side, sign in ((lo, 1.0), (hi, -1.0)):
            n = AXES[axis] * sign
            center = c.copy()
            center[axis] = side[axis]
            others = [i for i in range(3) if i != axis]
            u = AXES[others[0]]
            out.append(Instance(0, Plane(n, float(n @ center)), RectExtent(center, u, half[others[0]], half[others[1]])))
    return out


def _plane_instance(center, normal, kind, a, b=None, u=None) -> Instance:
    normal = normal / np.linalg.norm(normal)
    plane = Plane(normal, float(normal @ center))
    center = np.asarray(center, dtype=float)
    if kind == "disk":
        return Instance(0, plane, DiskExtent(center, float(a)))
    if u is None:
        u = tangent_basis(normal)[0]
    return Instance(0, plane, RectExtent(center, np.asarray(u, dtype=float), float(a), float(b)))


def _make_cylinder(rng, cfg, center) -> Instance:
    axis, _ = _biased_direction(rng, cfg)
    r = rng.uniform(0.05, 0.4)
    half_len = 0.5 * rng.uniform(0.3, 1.5)
    cyl = Cylinder(center, axis, r)
    t0 = float((np.asarray(center) - cyl.axis_point) @ cyl.axis_dir)
    return Instance(0, cyl, AxialExtent(t0 - half_len, t0 + half_len))


def _make_cone(rng, cfg, center) -> Instance:
    axis, _ = _biased_direction(rng, cfg)
    theta = rng.uniform(np.deg2rad(10), np.deg2rad(50))
    h1 = min(rng.uniform(0.4, 1.4), 0.8 / math.tan(theta))
    h0 = rng.uniform(0.05, 0.3) * h1
    apex = np.asarray(center) - 0.5 * (h0 + h1) * axis
    return Instance(0, Cone(apex, axis, theta), AxialExtent(h0, h1))


def _make_box(rng, cfg, center) -> list[Instance]:
    """Six rectangular faces of a box, each its own plane instance."""
    dims = rng.uniform(0.2, 0.8, 3)
    if rng.random() < cfg.axis_aligned_fraction:
        R = np.eye(3)
    else:
        yaw = rng.uniform(0, 2 * math.pi)
        R = np.array([[math.cos(yaw), -math.sin(yaw), 0], [math.sin(yaw), math.cos(yaw), 0], [0, 0, 1]])
    ex, ey, ez = R.T
    hx, hy, hz = 0.5 * dims
    c = np.asarray(center, dtype=float)
    faces = [
        (c + hz * ez, ez, ex, hx, hy),
        (c - hz * ez, -ez, ex, hx, hy),
        (c + hx * ex, ex, ey, hy, hz),
        (c - hx * ex, -ex, ey, hy, hz),
        (c + hy * ey, ey, ex, hx, hz),
        (c - hy * ey, -ey, ex, hx, hz),
    ]
    return [_plane_instance(fc, n, "rect", a, b, u=u) for fc, n, u, a, b in faces]


def _make_patch(rng, center) -> BezierPatch:
    su, sv = rng.uniform(0.4, 1.2, 2)
    w = _random_unit(rng)
    u, v = tangent_basis(w)
    heights = rng.normal(0.0, 0.12 * max(su, sv), (4, 4))
    origin = np.asarray(center) - 0.5 * su * u - 0.5 * sv * v - float(heights.mean()) * w
    return BezierPatch(0, origin, np.stack([u, v, w]), float(su), float(sv), heights)


def _enclosing(objs) -> tuple[np.ndarray, float]:
    spheres = [o.bounding_sphere() for o in objs]
    c = np.mean([s[0] for s in spheres], axis=0)
    return c, max(float(np.linalg.norm(sc - c)) + sr for sc, sr in spheres)


def generate_scene(seed: int, config: Optional[SceneConfig] = None) -> SceneDescription:
    """Build a deterministic random room scene for ``seed``.

    The room has six walls, a table top near its center, then disks,
    freeform patches, spheres, cylinders, cones and boxes placed around the
    table. A ``axis_aligned_fraction`` share of axes/normals is snapped to
    the room axes. Instance ids are contiguous from 1.

    Raises:
        PlacementError: an object could not be placed within ``max_retries``
            attempts; ``partial`` carries the objects placed so far.
    """
    cfg = config or SceneConfig()
    rng = np.random.default_rng(seed)
    lo = np.zeros(3)
    hi = np.array([cfg.room_extent, cfg.room_extent, cfg.room_height])
    surfaces: list = _room_planes(lo, hi)

    tc = np.array([*(0.5 * cfg.room_extent + rng.uniform(-1.0, 1.0, 2)), rng.uniform(0.95, 1.2)])
    yaw = rng.uniform(0, math.pi)
    table = _plane_instance(
        tc, np.array([0.0, 0.0, 1.0]), "rect", rng.uniform(0.4, 0.9), rng.uniform(0.3, 0.7),
        u=np.array([math.cos(yaw), math.sin(yaw), 0.0]),
    )
    surfaces.append(table)
    table_index = len(surfaces) - 1
    placed = [(tc, table.bounding_sphere()[1])]

    def place(make, what):
        for _ in range(cfg.max_retries):
            center = tc + np.array([*rng.uniform(-cfg.placement_radius, cfg.placement_radius, 2), 0.0])
            center[2] = rng.uniform(0.2, 2.2)
            made = make(center)
            objs = made if isinstance(made, list) else [made]
            inside = True
            for o in objs:
                c, r = o.bounding_sphere()
                if np.any(c - r < lo + 0.05) or np.any(c + r > hi - 0.05):
                    inside = False
                    break
            if not inside:
                continue
            c, r = _enclosing(objs)
            if all(np.linalg.norm(c - pc) >= cfg.overlap_factor * (r + pr) for pc, pr in placed):
                placed.append((c, r))
                surfaces.extend(objs)
                return
        raise PlacementError(
            f"placement failed for {what} after {cfg.max_retries} attempts "
            f"({len(surfaces)} surfaces placed)",
            partial=list(surfaces),
        )

    for _ in range(cfg.n_disks):
        place(lambda c: _plane_instance(c, _biased_direction(rng, cfg)[0], "disk", rng.uniform(0.15, 0.5)), "disk")
    for _ in range(cfg.n_other):
        place(lambda c: _make_patch(rng, c), "freeform patch")
    for _ in range(cfg.n_spheres):
        place(lambda c: Instance(0, Sphere(c, rng.uniform(0.1, 0.5)), FullExtent()), "sphere")
    for _ in range(cfg.n_cylinders):
        place(lambda c: _make_cylinder(rng, cfg, c), "cylinder")
    for _ in range(cfg.n_cones):
        place(lambda c: _make_cone(rng, cfg, c), "cone")
    for _ in range(cfg.n_boxes):
        place(lambda c: _make_box(rng, cfg, c), "box")

    numbered = [replace(s, instance_id=k) for k, s in enumerate(surfaces, start=1)]
    return SceneDescription(
        lo,
        hi,
        tuple(s for s in numbered if isinstance(s, Instance)),
        tuple(s for s in numbered if isinstance(s, BezierPatch)),
        table_id=table_index + 1,
    )


# ---------------------------------------------------------------------------
# Scan poses


@dataclass(frozen=True, eq=False)
class ScanPose:
    camera_pose: np.ndarray  # 4x4 camera-to-world, camera x right, y down, z forward
    target: np.ndarray
    distance: float
    longitude: float
    latitude: float


@dataclass
class PoseConfig:
    lon_step: float = math.pi / 6
    lat_step: float = math.pi / 12
    lat_min: float = -math.pi / 6
    lat_max: float = math.pi / 2
    distances_per_direction: int = 2
    min_distance: float = 1.5
    max_distance: float = 4.0
    jitter: float = math.pi / 24
    wall_margin: float = 0.02
    seed: int = 0


def look_at(position, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world transform for a camera at ``position`` facing ``target``."""
    position = np.asarray(position, dtype=float)
    fwd = np.asarray(target, dtype=float) - position
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, up)
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(fwd, (1.0, 0.0, 0.0))
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    T = np.eye(4)
    T[:3, 0], T[:3, 1], T[:3, 2], T[:3, 3] = right, down, fwd, position
    return T


def grid_directions(cfg: PoseConfig) -> list[tuple[float, float]]:
    """(longitude, latitude) pairs on the half-open viewing grid."""
    n_lon = int(round(2 * math.pi / cfg.lon_step))
    n_lat = int(round((cfg.lat_max - cfg.lat_min) / cfg.lat_step))
    return [
        (-math.pi + i * cfg.lon_step, cfg.lat_min + j * cfg.lat_step)
        for j in range(n_lat)
        for i in range(n_lon)
    ]


def _max_inside(origin, direction, lo, hi) -> float:
    t = math.inf
    for k in range(3):
        if direction[k] > 1e-12:
            t = min(t, (hi[k] - origin[k]) / direction[k])
        elif direction[k] < -1e-12:
            t = min(t, (lo[k] - origin[k]) / direction[k])
    return t


def sample_scan_poses(scene: SceneDescription, config: Optional[PoseConfig] = None) -> list[ScanPose]:
    """Cameras around the table center on a longitude/latitude grid.

    Each grid direction gets ``distances_per_direction`` uniform distances
    and a uniform angular jitter in both angles; every camera looks at the
    table center. Distances are capped so the camera stays inside the room
    (with ``wall_margin``), and redrawn if the camera would sit inside an
    object's bounding sphere.
    """
    cfg = config or PoseConfig()
    rng = np.random.default_rng(cfg.seed)
    target = np.asarray(scene.table_center, dtype=float)
    lo = scene.room_min + cfg.wall_margin
    hi = scene.room_max - cfg.wall_margin
    blockers = [s.bounding_sphere() for s in scene.surfaces() if s.instance_id != scene.table_id]
    blockers = [(c, r) for c, r in blockers if r < 0.5 * float(np.min(scene.room_max - scene.room_min))]
    poses = []
    for lon0, lat0 in grid_directions(cfg):
        for _ in range(cfg.distances_per_direction):
            lon = lon0 + rng.uniform(-cfg.jitter, cfg.jitter) if cfg.jitter else lon0
            lat = lat0 + rng.uniform(-cfg.jitter, cfg.jitter) if cfg.jitter else lat0
            d_vec = np.array([math.cos(lat) * math.cos(lon), math.cos(lat) * math.sin(lon), math.sin(lat)])
            d_hi = min(cfg.max_distance, _max_inside(target, d_vec, lo, hi))
            d_hi = max(d_hi, cfg.min_distance)
            for _ in range(50):
                dist = rng.uniform(cfg.min_distance, d_hi)
                pos = target + dist * d_vec
                if all(np.linalg.norm(pos - c) > r for c, r in blockers):
                    break
            poses.append(ScanPose(look_at(pos, target), target.copy(), float(dist), float(lon), float(lat)))
    return poses


# ---------------------------------------------------------------------------
# Text format
#
#   bagsfit-scene 1
#   room <xmin> <ymin> <zmin> <xmax> <ymax> <zmax>
#   table <id>
#   <id> plane n=<x,y,z> d=<v> rect c=<x,y,z> u=<x,y,z> a=<half_u> b=<half_v>
#   <id> plane n=<x,y,z> d=<v> disk c=<x,y,z> r=<radius>
#   <id> sphere c=<x,y,z> r=<radius> full
#   <id> cylinder p=<x,y,z> u=<x,y,z> r=<radius> axial t=<t_min,t_max>
#   <id> cone apex=<x,y,z> u=<x,y,z> theta=<rad> axial t=<h_min,h_max>
#   <id> other o=<x,y,z> u=<x,y,z> v=<x,y,z> w=<x,y,z> size=<su,sv> h=<16 values, row-major>
#
# Floats use Python's shortest round-trip repr, so read(write(s)) is exact.


def _f(x) -> str:
    return repr(float(x))


def _v(a) -> str:
    return ",".join(_f(x) for x in np.ravel(a))


def _instance_line(inst: Instance) -> str:
    m, e = inst.model, inst.extent
    if isinstance(m, Plane):
        head = f"plane n={_v(m.normal)} d={_f(m.offset)}"
    elif isinstance(m, Sphere):
        head = f"sphere c={_v(m.center)} r={_f(m.radius)}"
    elif isinstance(m, Cylinder):
        head = f"cylinder p={_v(m.axis_point)} u={_v(m.axis_dir)} r={_f(m.radius)}"
    else:
        head = f"cone apex={_v(m.apex)} u={_v(m.axis_dir)} theta={_f(m.half_angle)}"
    if isinstance(e, RectExtent):
        tail = f"rect c={_v(e.center)} u={_v(e.u)} a={_f(e.half_u)} b={_f(e.half_v)}"
    elif isinstance(e, DiskExtent):
        tail = f"disk c={_v(e.center)} r={_f(e.radius)}"
    elif isinstance(e, AxialExtent):
        tail = f"axial t={_f(e.t_min)},{_f(e.t_max)}"
    else:
        tail = "full"
    return f"{inst.instance_id} {head} {tail}"


def scene_to_text(scene: SceneDescription) -> str:
    lines = ["bagsfit-scene 1", "room " + " ".join(_f(x) for x in (*scene.room_min, *scene.room_max))]
    lines.append(f"table {scene.table_id}")
    for s in sorted(scene.surfaces(), key=lambda s: s.instance_id):
        if isinstance(s, BezierPatch):
            u, v, w = s.frame
            lines.append(
                f"{s.instance_id} other o={_v(s.origin)} u={_v(u)} v={_v(v)} w={_v(w)} "
                f"size={_f(s.size_u)},{_f(s.size_v)} h={_v(s.heights)}"
            )
        else:
            lines.append(_instance_line(s))
    return "\n".join(lines) + "\n"


class SceneFormatError(ValueError):
    pass


def _parse_line(lineno: int, line: str):
    toks = line.split()
    iid, kind = int(toks[0]), toks[1]
    kv = {}
    words = []
    for t in toks[2:]:
        if "=" in t:
            k, v = t.split("=", 1)
            kv[k] = np.array([float(x) for x in v.split(",")])
        else:
            words.append(t)
    try:
        if kind == "other":
            return BezierPatch(
                iid, kv["o"], np.stack([kv["u"], kv["v"], kv["w"]]), float(kv["size"][0]), float(kv["size"][1]),
                kv["h"].reshape(4, 4),
            )
        # Extent keys come after the model keys; the extent word splits them.
        ext_word = words[0]
        split = toks.index(ext_word)
        mkv = {}
        ekv = {}
        for t in toks[2:split]:
            k, v = t.split("=", 1)
            mkv[k] = np.array([float(x) for x in v.split(",")])
        for t in toks[split + 1 :]:
            k, v = t.split("=", 1)
            ekv[k] = np.array([float(x) for x in v.split(",")])
        if kind == "plane":
            model = Plane(mkv["n"], float(mkv["d"][0]))
        elif kind == "sphere":
            model = Sphere(mkv["c"], float(mkv["r"][0]))
        elif kind == "cylinder":
            model = Cylinder.from_canonical(mkv["p"], mkv["u"], float(mkv["r"][0]))
        elif kind == "cone":
            model = Cone.from_canonical(mkv["apex"], mkv["u"], float(mkv["theta"][0]))
        else:
            raise SceneFormatError(f"line {lineno}: unknown surface kind {kind!r}")
        if ext_word == "rect":
            ext = RectExtent(ekv["c"], ekv["u"], float(ekv["a"][0]), float(ekv["b"][0]))
        elif ext_word == "disk":
            ext = DiskExtent(ekv["c"], float(ekv["r"][0]))
        elif ext_word == "axial":
            ext = AxialExtent(float(ekv["t"][0]), float(ekv["t"][1]))
        elif ext_word == "full":
            ext = FullExtent()
        else:
            raise SceneFormatError(f"line {lineno}: unknown extent {ext_word!r}")
        return Instance(iid, model, ext)
    except (KeyError, IndexError) as exc:
        raise SceneFormatError(f"line {lineno}: missing field {exc}") from None


def scene_from_text(text: str) -> SceneDescription:
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
    if not lines or lines[0].split() != ["bagsfit-scene", "1"]:
        raise SceneFormatError("line 1: expected header 'bagsfit-scene 1'")
    room = [float(x) for x in lines[1].split()[1:]]
    table_id = int(lines[2].split()[1])
    surfaces = [_parse_line(k + 4, ln) for k, ln in enumerate(lines[3:])]
    return SceneDescription(
        np.array(room[:3]),
        np.array(room[3:]),
        tuple(s for s in surfaces if isinstance(s, Instance)),
        tuple(s for s in surfaces if isinstance(s, BezierPatch)),
        table_id,
    )


def write_scene(path, scene: SceneDescription) -> None:
    Path(path).write_text(scene_to_text(scene))


def read_scene(path) -> SceneDescription:
    return scene_from_text(Path(path).read_text())
