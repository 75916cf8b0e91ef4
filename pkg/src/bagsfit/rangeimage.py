"""Range images, ground-truth label maps, normals, boundaries and BAGS labels."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import kernels
from .classes import PrimitiveClass


@dataclass(frozen=True)
class Intrinsics:
    fx: float = 575.0
    fy: float = 575.0
    cx: float = 319.5
    cy: float = 239.5

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")

    def as_array(self) -> np.ndarray:
        return np.array([self.fx, self.fy, self.cx, self.cy])


@dataclass(frozen=True, eq=False)
class RangeImage:
    """Depth in meters (float32), 0 = invalid; ``camera_pose`` maps camera to world.

    The camera frame is x right, y down, z forward.
    """

    depth: np.ndarray
    intrinsics: Intrinsics = field(default_factory=Intrinsics)
    camera_pose: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        d = np.ascontiguousarray(self.depth, dtype=np.float32)
        if d.ndim != 2:
            raise ValueError("depth must be a 2-D array")
        if not np.all(np.isfinite(d)) or (d < 0).any():
            raise ValueError("depth must be finite and non-negative")
        d.setflags(write=False)
        pose = np.array(self.camera_pose, dtype=float).reshape(4, 4)
        pose.setflags(write=False)
        object.__setattr__(self, "depth", d)
        object.__setattr__(self, "camera_pose", pose)

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def width(self) -> int:
        return self.depth.shape[1]

    @property
    def valid(self) -> np.ndarray:
        return self.depth > 0


@dataclass(frozen=True, eq=False)
class LabelMap:
    """Per-pixel ground-truth class (:class:`PrimitiveClass`) and instance id."""

    class_id: np.ndarray
    instance_id: np.ndarray

    def __post_init__(self):
        c = np.ascontiguousarray(self.class_id, dtype=np.uint8)
        i = np.ascontiguousarray(self.instance_id, dtype=np.uint32)
        if c.shape != i.shape:
            raise ValueError("class and instance maps differ in shape")
        if ((c == PrimitiveClass.INVALID) != (i == 0)).any():
            raise ValueError("instance id must be 0 exactly at invalid pixels")
        c.setflags(write=False)
        i.setflags(write=False)
        object.__setattr__(self, "class_id", c)
        object.__setattr__(self, "instance_id", i)

    @property
    def valid(self) -> np.ndarray:
        return self.class_id != PrimitiveClass.INVALID

    def instance_classes(self) -> dict[int, PrimitiveClass]:
        ids, first = np.unique(self.instance_id.ravel(), return_index=True)
        cls = self.class_id.ravel()[first]
        return {int(k): PrimitiveClass(int(c)) for k, c in zip(ids, cls) if k > 0}


class BagsScheme(Enum):
    """Label alphabets: the four primitives, optionally Boundary and/or Other."""

    K4 = "k4"
    K5_BOUNDARY = "k5b"
    K5_OTHER = "k5o"
    K6 = "k6"

    @property
    def has_boundary(self) -> bool:
        return self in (BagsScheme.K5_BOUNDARY, BagsScheme.K6)

    @property
    def has_other(self) -> bool:
        return self in (BagsScheme.K5_OTHER, BagsScheme.K6)

    @property
    def names(self) -> tuple[str, ...]:
        names = ["Plane", "Sphere", "Cylinder", "Cone"]
        if self.has_boundary:
            names.append("Boundary")
        if self.has_other:
            names.append("Other")
        return tuple(names)

    @property
    def K(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        return self.names.index(name)

    @property
    def primitive_labels(self) -> tuple[int, ...]:
        """Labels that feed primitive fitting (index k maps to class k + 1)."""
        return (0, 1, 2, 3)


IGNORE = 255
VOID = 254


@dataclass(frozen=True, eq=False)
class BagsLabelMap:
    """Labels index ``scheme.names``; ``IGNORE`` marks observed pixels outside
    the alphabet and ``VOID`` marks invalid (zero-depth) pixels."""

    labels: np.ndarray
    scheme: BagsScheme

    def __post_init__(self):
        a = np.ascontiguousarray(self.labels, dtype=np.uint8)
        ok = (a < self.scheme.K) | (a == IGNORE) | (a == VOID)
        if not ok.all():
            raise ValueError("label outside the scheme alphabet")
        a.setflags(write=False)
        object.__setattr__(self, "labels", a)

    @property
    def valid(self) -> np.ndarray:
        return self.labels != VOID

    @property
    def scored(self) -> np.ndarray:
        return self.labels < self.scheme.K

    def histogram(self) -> dict[str, int]:
        counts = np.bincount(self.labels.ravel(), minlength=256)
        out = {name: int(counts[k]) for k, name in enumerate(self.scheme.names)}
        out["ignore"] = int(counts[IGNORE])
        return out


@dataclass(frozen=True, eq=False)
class NormalMap:
    normals: np.ndarray
    valid: np.ndarray


def unproject(img: RangeImage) -> tuple[np.ndarray, np.ndarray]:
    """Camera-frame points ``(H, W, 3)`` and their validity mask."""
    k = img.intrinsics
    v, u = np.mgrid[0 : img.height, 0 : img.width].astype(float)
    z = img.depth.astype(float)
    pts = np.stack([z * (u - k.cx) / k.fx, z * (v - k.cy) / k.fy, z], axis=-1)
    valid = img.valid
    pts[~valid] = 0.0
    return pts, valid


def project_to_pixels(points, intr: Intrinsics) -> np.ndarray:
    """Pixel coordinates ``(u, v)`` of camera-frame points."""
    p = np.asarray(points, dtype=float)
    return np.stack([intr.fx * p[..., 0] / p[..., 2] + intr.cx, intr.fy * p[..., 1] / p[..., 2] + intr.cy], axis=-1)


def to_world(points, pose) -> np.ndarray:
    pose = np.asarray(pose, dtype=float)
    return np.asarray(points) @ pose[:3, :3].T + pose[:3, 3]


def estimate_normals(points: np.ndarray, valid: np.ndarray, window: int = 5) -> NormalMap:
    """PCA normals over a ``window x window`` neighbourhood, oriented to the camera.

    Windows are truncated at the image border. Pixels with fewer than three
    valid neighbours, or a neighbourhood of rank < 2, are left invalid.
    """
    if window < 3 or window % 2 == 0:
        raise ValueError("window must be odd and >= 3")
    pts = np.ascontiguousarray(points, dtype=float)
    ok = np.ascontiguousarray(valid, dtype=bool)
    n, v = kernels.pca_normals(pts, ok, window // 2)
    return NormalMap(n, v)


def compute_boundaries(labels: LabelMap, window: int = 5) -> np.ndarray:
    """Instance-aware boundary mask.

    True where the pixel's window holds two instance ids or any invalid
    pixel; always false on invalid pixels.
    """
    return kernels.boundary_mask(
        np.ascontiguousarray(labels.instance_id, dtype=np.int64),
        np.ascontiguousarray(labels.valid),
        window // 2,
    )


def make_bags_labels(labels: LabelMap, boundary: np.ndarray, scheme: BagsScheme) -> BagsLabelMap:
    scheme = BagsScheme(scheme)
    cls = labels.class_id
    out = np.full(cls.shape, IGNORE, dtype=np.uint8)
    for k, c in enumerate((PrimitiveClass.PLANE, PrimitiveClass.SPHERE, PrimitiveClass.CYLINDER, PrimitiveClass.CONE)):
        out[cls == c] = k
    if scheme.has_other:
        out[cls == PrimitiveClass.OTHER] = scheme.index("Other")
    if scheme.has_boundary:
        out[boundary & labels.valid] = scheme.index("Boundary")
    out[~labels.valid] = VOID
    return BagsLabelMap(out, scheme)
