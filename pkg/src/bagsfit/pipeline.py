"""End-to-end fitting: argmax-split geometric verification and the plain RANSAC baseline."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .classes import PRIMITIVE_CLASSES, PrimitiveClass
from .evaluation import ScanCounts, match_detections
from .rangeimage import (
    BagsScheme,
    LabelMap,
    RangeImage,
    compute_boundaries,
    estimate_normals,
    make_bags_labels,
    unproject,
)
from .ransac import Candidate, RansacParams, detect_primitives
from .segmentation import CorruptionConfig, ProbabilityMaps, argmax_segmentation, oracle_probability_maps


@dataclass(frozen=True, eq=False)
class ScanPoints:
    """Flat camera-frame points and normals of one range image.

    ``usable`` marks pixels with a valid depth and a valid normal; only those
    ever enter RANSAC.
    """

    points: np.ndarray
    normals: np.ndarray
    usable: np.ndarray
    shape: tuple[int, int]

    @property
    def diameter(self) -> float:
        """Bounding-box diagonal of all usable points."""
        P = self.points[self.usable]
        return float(np.linalg.norm(np.ptp(P, axis=0))) if len(P) else 0.0


def scan_points(img: RangeImage, window: int = 5) -> ScanPoints:
    pts, valid = unproject(img)
    nm = estimate_normals(pts, valid, window)
    usable = (valid & nm.valid).ravel()
    return ScanPoints(pts.reshape(-1, 3), nm.normals.reshape(-1, 3), usable, img.depth.shape)


def _detect(sp: ScanPoints, pixels: np.ndarray, classes, params: RansacParams) -> list[Candidate]:
    # Class subsets sample with the same ball as the whole scan.
    if params.scene_diameter is None:
        params = replace(params, scene_diameter=sp.diameter)
    pixels = pixels[sp.usable[pixels]]
    return detect_primitives(
        sp.points[pixels], sp.normals[pixels], classes, params, pixels=pixels, image_shape=sp.shape
    )


def primitive_fitting(
    img: RangeImage,
    maps: ProbabilityMaps,
    params: Optional[RansacParams] = None,
    points: Optional[ScanPoints] = None,
) -> list[Candidate]:
    """Split pixels by the most probable label and fit each primitive class
    only on its own pixels. Boundary and Other pixels are never sampled."""
    params = params or RansacParams()
    sp = points or scan_points(img)
    if maps.maps.shape[1:] != sp.shape:
        raise ValueError("probability maps do not cover the image")
    _, sets = argmax_segmentation(maps)
    out: list[Candidate] = []
    for k, cls in enumerate(PRIMITIVE_CLASSES):
        # Distinct stream per class so subsets do not share samples.
        out += _detect(sp, sets[k], (cls,), replace(params, seed=params.seed + 7919 * k))
    return out


def eransac_baseline(
    img: RangeImage, params: Optional[RansacParams] = None, points: Optional[ScanPoints] = None
) -> list[Candidate]:
    """All four classes over every usable pixel."""
    params = params or RansacParams()
    sp = points or scan_points(img)
    return _detect(sp, np.flatnonzero(sp.usable), PRIMITIVE_CLASSES, params)


def oracle_maps(
    labels: LabelMap,
    scheme: BagsScheme = BagsScheme.K6,
    corruption: Optional[CorruptionConfig] = None,
    boundary_window: int = 5,
) -> ProbabilityMaps:
    """Oracle segmentation of a scan from its ground-truth labels."""
    scheme = BagsScheme(scheme)
    boundary = compute_boundaries(labels, boundary_window)
    gt = make_bags_labels(labels, boundary, scheme)
    base = None
    if corruption is not None and corruption.boundary_erode_dilate < 0:
        plain = BagsScheme.K5_OTHER if scheme.has_other else BagsScheme.K4
        base = make_bags_labels(labels, np.zeros_like(boundary), plain)
    return oracle_probability_maps(gt, corruption, base)


def evaluate_scan(preds, labels: LabelMap, img: RangeImage, min_instance_pixels: int = 1) -> ScanCounts:
    """Match detections of one scan against its labels using observed points."""
    pts, _ = unproject(img)
    return match_detections(preds, labels, pts, min_instance_pixels)[1]


def noise_free_points(scene, img: RangeImage, labels: LabelMap) -> np.ndarray:
    """Camera-frame points of every labelled pixel re-intersected with its
    true surface, i.e. the observed points with depth noise removed."""
    from .scanner import intersect

    k = img.intrinsics
    H, W = img.depth.shape
    v, u = np.mgrid[0:H, 0:W].astype(float)
    rays = np.stack([(u - k.cx) / k.fx, (v - k.cy) / k.fy, np.ones_like(u)], axis=-1).reshape(-1, 3)
    T = img.camera_pose
    out = np.zeros((H * W, 3))
    ids = labels.instance_id.ravel()
    by_id = {s.instance_id: s for s in scene.surfaces()}
    for iid in np.unique(ids):
        if iid == 0:
            continue
        pix = np.flatnonzero(ids == iid)
        t = intersect(by_id[int(iid)], T[:3, 3], rays[pix] @ T[:3, :3].T)
        t = np.where(np.isfinite(t), t, img.depth.ravel()[pix])
        out[pix] = rays[pix] * t[:, None]
    return out
