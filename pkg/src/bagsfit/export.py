"""ASCII PLY export of labelled point clouds and fitted primitive meshes."""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np

from .geometry import Cone, Cylinder, Plane, Sphere, tangent_basis
from .rangeimage import IGNORE, BagsScheme

# Legend order: Boundary, Plane, Sphere, Cylinder, Cone, Other.
CLASS_COLORS = {
    "Boundary": (30, 30, 30),
    "Plane": (31, 119, 180),
    "Sphere": (214, 39, 40),
    "Cylinder": (44, 160, 44),
    "Cone": (255, 127, 14),
    "Other": (148, 103, 189),
}
UNLABELLED_COLOR = (190, 190, 190)


def label_colors(labels: np.ndarray, scheme: BagsScheme) -> np.ndarray:
    """RGB per label value; ignored or unknown values get the unlabelled grey."""
    lut = np.tile(np.array(UNLABELLED_COLOR, dtype=np.uint8), (256, 1))
    for k, name in enumerate(BagsScheme(scheme).names):
        lut[k] = CLASS_COLORS[name]
    lut[IGNORE] = UNLABELLED_COLOR
    return lut[np.asarray(labels, dtype=np.uint8)]


def write_ply(path, vertices, colors, faces: Optional[np.ndarray] = None) -> None:
    V = np.asarray(vertices, dtype=float).reshape(-1, 3)
    C = np.asarray(colors, dtype=np.uint8).reshape(-1, 3)
    if len(C) != len(V):
        raise ValueError("one color per vertex required")
    F = np.zeros((0, 3), dtype=np.int64) if faces is None else np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    head = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(V)}",
        "property float x",
        "property float y",
        "property float z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
    ]
    if len(F):
        head += [f"element face {len(F)}", "property list uchar int vertex_indices"]
    head.append("end_header")
    with open(path, "w") as fh:
        fh.write("\n".join(head) + "\n")
        for (x, y, z), (r, g, b) in zip(V, C):
            fh.write(f"{x:.6f} {y:.6f} {z:.6f} {r} {g} {b}\n")
        for a, b, c in F:
            fh.write(f"3 {a} {b} {c}\n")


def _grid_faces(rows: int, cols: int, wrap: bool) -> np.ndarray:
    faces = []
    ncol = cols if wrap else cols - 1
    for i in range(rows - 1):
        for j in range(ncol):
            a = i * cols + j
            b = i * cols + (j + 1) % cols
            faces += [(a, a + cols, b), (b, a + cols, b + cols)]
    return np.array(faces, dtype=np.int64).reshape(-1, 3)


def primitive_mesh(model, support: np.ndarray, segments: int = 32) -> tuple[np.ndarray, np.ndarray]:
    """Triangle mesh of ``model`` trimmed to the extent of its ``support`` points."""
    P = np.asarray(support, dtype=float).reshape(-1, 3)
    if isinstance(model, Plane):
        a, b = tangent_basis(model.normal)
        base = model.project(P)
        ua, ub = base @ a, base @ b
        origin = model.offset * model.normal
        corners = [(ua.min(), ub.min()), (ua.max(), ub.min()), (ua.max(), ub.max()), (ua.min(), ub.max())]
        V = np.array([origin + x * a + y * b for x, y in corners])
        return V, np.array([(0, 1, 2), (0, 2, 3)])
    if isinstance(model, Sphere):
        rows = segments // 2 + 1
        th = np.linspace(0.0, math.pi, rows)
        ph = np.linspace(0.0, 2 * math.pi, segments, endpoint=False)
        T, F = np.meshgrid(th, ph, indexing="ij")
        dirs = np.stack([np.sin(T) * np.cos(F), np.sin(T) * np.sin(F), np.cos(T)], axis=-1).reshape(-1, 3)
        return model.center + model.radius * dirs, _grid_faces(rows, segments, True)
    if isinstance(model, (Cylinder, Cone)):
        u = model.axis_dir
        a, b = tangent_basis(u)
        anchor = model.axis_point if isinstance(model, Cylinder) else model.apex
        h = (P - anchor) @ u
        lo, hi = (float(h.min()), float(h.max())) if len(h) else (0.0, 1.0)
        if isinstance(model, Cone):
            lo = max(lo, 0.0)
        ph = np.linspace(0.0, 2 * math.pi, segments, endpoint=False)
        ring = np.cos(ph)[:, None] * a + np.sin(ph)[:, None] * b
        rings = []
        for t in (lo, hi):
            r = model.radius if isinstance(model, Cylinder) else t * math.tan(model.half_angle)
            rings.append(anchor + t * u + r * ring)
        return np.concatenate(rings), _grid_faces(2, segments, True)
    raise TypeError(f"cannot mesh {model!r}")


def primitives_to_ply(path, models: Sequence, supports: Sequence[np.ndarray], seed: int = 0) -> None:
    """All meshes in one file, one random color per primitive (seeded)."""
    rng = np.random.default_rng(seed)
    verts, cols, faces = [], [], []
    offset = 0
    for model, support in zip(models, supports):
        V, F = primitive_mesh(model, support)
        color = rng.integers(40, 256, size=3)
        verts.append(V)
        cols.append(np.tile(color, (len(V), 1)))
        faces.append(F + offset)
        offset += len(V)
    if verts:
        write_ply(path, np.concatenate(verts), np.concatenate(cols), np.concatenate(faces))
    else:
        write_ply(path, np.zeros((0, 3)), np.zeros((0, 3)))
