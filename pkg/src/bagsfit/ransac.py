"""Greedy multi-instance RANSAC for planes, spheres, cylinders and cones.

The detector follows the efficient-RANSAC recipe: localized minimal samples,
consensus scored with a distance and a normal-angle threshold, and a
candidate is extracted once the probability of having overlooked a larger
one drops below ``p_outlook``. Extraction widens the angle threshold, keeps
the largest image-connected inlier component, refits, and removes those
points before the next round.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np
from scipy import ndimage

from . import kernels
from .classes import PRIMITIVE_CLASSES, PrimitiveClass
from .geometry import (
    DegenerateSample,
    InconsistentSample,
    PrimitiveModel,
    fit_cone_min,
    fit_cylinder_min,
    fit_plane_min,
    fit_sphere_min,
    model_from_array,
    refit_least_squares,
)

log = logging.getLogger(__name__)

_MIN_SAMPLE = {
    PrimitiveClass.PLANE: 3,
    PrimitiveClass.SPHERE: 2,
    PrimitiveClass.CYLINDER: 2,
    PrimitiveClass.CONE: 3,
}


@dataclass
class RansacParams:
    min_support: int = 1000
    inlier_dist: float = 0.03
    angle_score: float = math.radians(30.0)
    angle_expand: float = math.radians(45.0)
    p_outlook: float = 1e-4
    # Cap on samples drawn between two extractions.
    max_candidates_per_round: int = 20000
    seed: int = 0
    refine: bool = True
    # Refit / recollect passes during extraction.
    refit_rounds: int = 3
    batch_size: int = 32
    subset_size: int = 4096
    # Sampling ball radius as a fraction of the scene diameter. The diameter
    # defaults to the bounding-box diagonal of the input points.
    local_radius: float = 0.02
    scene_diameter: Optional[float] = None
    local_retries: int = 10
    # Candidates whose estimated score falls below this share of
    # min_support are dropped from the pool.
    prune_fraction: float = 0.3
    # Sampling scales; level l uses a ball of local_radius * 2^l. Localized
    # samples hit a shape with probability n / (N * levels * 2^(k-1)).
    locality_levels: int = 4

    def __post_init__(self):
        if not self.inlier_dist > 0:
            raise ValueError("inlier_dist must be positive")
        if not 0 < self.angle_score <= self.angle_expand < math.pi / 2:
            raise ValueError("need 0 < angle_score <= angle_expand < pi/2")
        if not 0 < self.p_outlook < 1:
            raise ValueError("p_outlook must lie in (0, 1)")
        if self.min_support < 1:
            raise ValueError("min_support must be >= 1")
        if self.refit_rounds < 1:
            raise ValueError("refit_rounds must be >= 1")
        if self.locality_levels < 1:
            raise ValueError("locality_levels must be >= 1")


@dataclass(eq=False)
class Candidate:
    """A detected primitive. ``inliers`` index the detector's input points;
    ``pixels`` holds the matching flat pixel ids when the input had them."""

    model: PrimitiveModel
    score: int
    inliers: np.ndarray
    pixels: Optional[np.ndarray] = None
    refit_converged: bool = True

    @property
    def cls(self) -> PrimitiveClass:
        return self.model.cls


def score_candidate(model: PrimitiveModel, points, normals, inlier_dist: float, angle: float) -> Candidate:
    """Inliers within ``inlier_dist`` whose normal deviates at most ``angle``
    (up to sign) from the surface normal at their projection."""
    P = np.ascontiguousarray(points, dtype=float)
    N = np.ascontiguousarray(normals, dtype=float)
    mask = kernels.inlier_mask(int(model.cls), model.as_array(), P, N, inlier_dist, math.cos(angle))
    idx = np.flatnonzero(mask)
    return Candidate(model, len(idx), idx)


def overlooking_probability(n: float, N: float, s: float, k: float) -> float:
    """Probability that ``s`` independent minimal samples of size ``k`` all
    missed a shape of ``n`` out of ``N`` points: ``(1 - (n/N)^k)^s``."""
    if not 0 < n <= N:
        raise ValueError("need 0 < n <= N")
    if s < 0:
        raise ValueError("need s >= 0")
    p = (n / N) ** k
    if p >= 1.0:
        return 0.0 if s > 0 else 1.0
    return math.exp(s * math.log1p(-p))


class _OP(NamedTuple):
    position: np.ndarray
    normal: np.ndarray


def _fit(cls, ops):
    if cls == PrimitiveClass.PLANE:
        return fit_plane_min(ops[0].position, ops[1].position, ops[2].position)
    if cls == PrimitiveClass.SPHERE:
        return fit_sphere_min(ops[0], ops[1])
    if cls == PrimitiveClass.CYLINDER:
        return fit_cylinder_min(ops[0], ops[1])
    return fit_cone_min(ops[0], ops[1], ops[2])


@dataclass
class _Pool:
    kinds: list = field(default_factory=list)
    params: list = field(default_factory=list)
    triplet: list = field(default_factory=list)
    est: np.ndarray = field(default_factory=lambda: np.zeros(0))
    exact: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self):
        return len(self.kinds)

    def keep(self, mask):
        idx = np.flatnonzero(mask)
        self.kinds = [self.kinds[i] for i in idx]
        self.params = [self.params[i] for i in idx]
        self.triplet = [self.triplet[i] for i in idx]
        self.est = self.est[idx]
        self.exact = self.exact[idx]


class _Grid:
    """Points bucketed in cubic cells of side ``cell``; draws are uniform over
    the points of the 3x3x3 block around a query, so rejection by distance
    yields uniform samples from the ball of radius ``cell``."""

    def __init__(self, P: np.ndarray, cell: float):
        self.cell = max(cell, 1e-12)
        self.lo = P.min(axis=0) if len(P) else np.zeros(3)
        ijk = np.floor((P - self.lo) / self.cell).astype(np.int64) + 1
        self.dims = ijk.max(axis=0) + 2 if len(P) else np.ones(3, dtype=np.int64)
        keys = (ijk[:, 0] * self.dims[1] + ijk[:, 1]) * self.dims[2] + ijk[:, 2]
        self.order = np.argsort(keys, kind="stable")
        self.keys, self.starts, self.counts = np.unique(keys[self.order], return_index=True, return_counts=True)
        steps = (-1, 0, 1)
        self.offsets = np.array([(a * self.dims[1] + b) * self.dims[2] + c for a in steps for b in steps for c in steps])

    def draw(self, q: np.ndarray, m: int, rng) -> np.ndarray:
        ijk = np.floor((q - self.lo) / self.cell).astype(np.int64) + 1
        key = (ijk[0] * self.dims[1] + ijk[1]) * self.dims[2] + ijk[2]
        near = key + self.offsets
        pos = np.minimum(np.searchsorted(self.keys, near), len(self.keys) - 1)
        pos = pos[self.keys[pos] == near]
        counts = self.counts[pos]
        total = int(counts.sum())
        if total == 0:
            return np.zeros(0, dtype=np.int64)
        r = rng.integers(total, size=m)
        cum = np.cumsum(counts)
        cell = np.searchsorted(cum, r, side="right")
        return self.order[self.starts[pos[cell]] + r - (cum[cell] - counts[cell])]


class _Detector:
    def __init__(self, points, normals, classes, params: RansacParams, pixels, image_shape):
        self.P = np.ascontiguousarray(points, dtype=float)
        self.N = np.ascontiguousarray(normals, dtype=float)
        self.classes = sorted(PrimitiveClass(c) for c in classes)
        self.prm = params
        self.pixels = None if pixels is None else np.asarray(pixels, dtype=np.int64)
        self.image_shape = image_shape
        self.rng = np.random.default_rng(params.seed)
        self.alive = np.ones(len(self.P), dtype=bool)
        self._set_alive(np.arange(len(self.P)))
        self.cos_score = math.cos(params.angle_score)
        self.cos_expand = math.cos(params.angle_expand)
        self.k_sample = max(_MIN_SAMPLE[c] for c in self.classes)
        diameter = params.scene_diameter
        if diameter is None:
            diameter = float(np.linalg.norm(np.ptp(self.P, axis=0))) if len(self.P) else 0.0
        self.radius = params.local_radius * diameter
        self._grids: dict[int, _Grid] = {}
        self.triplets = np.zeros((0, self.k_sample), dtype=np.int64)
        self.triplet_ok = np.zeros(0, dtype=bool)
        self.n_triplets = 0
        self.n_valid_triplets = 0
        self.sample_factor = params.locality_levels * 2 ** (self.k_sample - 1)
        self.pool = _Pool()
        self._new_subset()

    # -- sampling ---------------------------------------------------------

    def _new_subset(self):
        n = len(self.alive_idx)
        m = min(n, self.prm.subset_size)
        self.subset = np.sort(self.rng.choice(self.alive_idx, size=m, replace=False)) if m else self.alive_idx
        self.scale = n / max(m, 1)

    def _neighbours(self, first: int, level: int, probes: int = 32) -> np.ndarray:
        """Uniform draws among alive points within the level's ball around ``first``."""
        grid = self._grids.get(level)
        if grid is None:
            grid = self._grids[level] = _Grid(self.P, self.radius * 2.0**level)
        cand = grid.draw(self.P[first], probes, self.rng)
        if len(cand) == 0:
            return cand
        d2 = ((self.P[cand] - self.P[first]) ** 2).sum(axis=1)
        return cand[(d2 <= grid.cell * grid.cell) & self.alive[cand]]

    def _draw_triplet(self) -> np.ndarray:
        first = self.alive_idx[self.rng.integers(len(self.alive_idx))]
        # Ball radius doubles per level, like cells of successive octree levels.
        level = int(self.rng.integers(self.prm.locality_levels))
        chosen = [first]
        near = None
        failures = 0
        while len(chosen) < self.k_sample:
            if failures < self.prm.local_retries:
                if near is None:
                    near = self._neighbours(first, level)
                j = near[self.rng.integers(len(near))] if len(near) else first
                if j in chosen:
                    failures += 1
                    continue
            else:
                j = self.alive_idx[self.rng.integers(len(self.alive_idx))]
                if j in chosen:
                    continue
            chosen.append(int(j))
        return np.array(chosen)

    def _sample_batch(self, count: int) -> int:
        kinds, params, trip = [], [], []
        need = self.n_triplets + count
        if need > len(self.triplets):
            grow = max(need, 2 * len(self.triplets))
            self.triplets = np.resize(self.triplets, (grow, self.k_sample))
            self.triplet_ok = np.concatenate([self.triplet_ok, np.zeros(grow - len(self.triplet_ok), dtype=bool)])
        for _ in range(count):
            t = self._draw_triplet()
            tid = self.n_triplets
            self.triplets[tid] = t
            self.triplet_ok[tid] = True
            self.n_triplets += 1
            self.n_valid_triplets += 1
            ops = [_OP(self.P[i], self.N[i]) for i in t]
            for cls in self.classes:
                try:
                    model = _fit(cls, ops)
                except (DegenerateSample, InconsistentSample, ValueError, np.linalg.LinAlgError):
                    continue
                a = model.as_array()
                # The sample must support its own model.
                own = kernels.inlier_mask(int(cls), a, self.P[t], self.N[t], self.prm.inlier_dist, self.cos_score)
                if not own[: _MIN_SAMPLE[cls]].all():
                    continue
                kinds.append(int(cls))
                params.append(a)
                trip.append(tid)
        if kinds:
            est = self._estimate(np.array(kinds, dtype=np.int64), np.array(params))
            self.pool.kinds += kinds
            self.pool.params += params
            self.pool.triplet += trip
            self.pool.est = np.concatenate([self.pool.est, est])
            self.pool.exact = np.concatenate([self.pool.exact, np.full(len(kinds), -1, dtype=np.int64)])
        return count

    def _estimate(self, kinds, params) -> np.ndarray:
        cnt = kernels.count_inliers(
            kinds, np.ascontiguousarray(params), self.P[self.subset], self.N[self.subset],
            self.prm.inlier_dist, self.cos_score,
        )
        return cnt * self.scale

    def _set_alive(self, idx):
        # Contiguous copies of the remaining points, reused by every full scan.
        self.alive_idx = idx
        self.P_alive, self.N_alive = self.P[idx], self.N[idx]

    def _exact_mask(self, i, cos_thr) -> np.ndarray:
        return kernels.inlier_mask(
            self.pool.kinds[i], self.pool.params[i], self.P_alive, self.N_alive, self.prm.inlier_dist, cos_thr,
        )

    def _best(self) -> int:
        """Index of the best candidate, with exact scores for the leaders."""
        pool = self.pool
        while True:
            value = np.where(pool.exact >= 0, pool.exact, pool.est)
            order = np.lexsort((np.array(pool.kinds), -value))
            top = order[0]
            if pool.exact[top] >= 0:
                return top
            pool.exact[top] = int(self._exact_mask(top, self.cos_score).sum())

    # -- extraction -------------------------------------------------------

    def _largest_component(self, idx: np.ndarray) -> np.ndarray:
        if self.pixels is None or self.image_shape is None or len(idx) == 0:
            return idx
        mask = np.zeros(self.image_shape, dtype=bool)
        pix = self.pixels[idx]
        mask.ravel()[pix] = True
        lab, n = ndimage.label(mask, structure=np.ones((3, 3), dtype=bool))
        if n <= 1:
            return idx
        comp = lab.ravel()[pix]
        sizes = np.bincount(comp, minlength=n + 1)
        sizes[0] = 0
        return idx[comp == np.argmax(sizes)]

    def _extract(self, i) -> Optional[Candidate]:
        cls = PrimitiveClass(self.pool.kinds[i])
        model = model_from_array(cls, self.pool.params[i])
        expanded = self.alive_idx[self._exact_mask(i, self.cos_expand)]
        final = self._largest_component(expanded)
        if len(final) < self.prm.min_support:
            return None
        converged = True
        if self.prm.refine:
            for _ in range(self.prm.refit_rounds):
                res = refit_least_squares(model, self.P[final])
                converged = res.converged and not res.failed
                # An unfinished refit resumes from its last iterate next round.
                model = res.model if converged or res.last is None else res.last
                # Recollect with the refined model until the set stops growing
                # and the refit has converged.
                mask = kernels.inlier_mask(
                    int(cls), model.as_array(), self.P_alive, self.N_alive, self.prm.inlier_dist, self.cos_expand,
                )
                grown = self._largest_component(self.alive_idx[mask])
                if len(grown) > len(final):
                    final = grown
                elif converged:
                    break
            if not converged:
                # Refinement that keeps wandering marks a poor hypothesis.
                return None
        pixels = None if self.pixels is None else self.pixels[final]
        return Candidate(model, len(final), final, pixels, converged)

    def _remove(self, idx: np.ndarray):
        self.alive[idx] = False
        self._set_alive(np.flatnonzero(self.alive))
        n = self.n_triplets
        self.triplet_ok[:n] &= self.alive[self.triplets[:n]].all(axis=1)
        self.n_valid_triplets = int(self.triplet_ok[:n].sum())
        self.pool.keep(self.triplet_ok[np.array(self.pool.triplet, dtype=np.int64)])
        self._new_subset()
        if len(self.pool):
            self.pool.est = self._estimate(np.array(self.pool.kinds, dtype=np.int64), np.array(self.pool.params))
            self.pool.exact[:] = -1
            self.pool.keep(self.pool.est >= self.prm.prune_fraction * self.prm.min_support)

    # -- main loop --------------------------------------------------------

    def _p_miss(self, n: float, n_alive: int) -> float:
        return overlooking_probability(n / self.sample_factor, n_alive, self.n_valid_triplets, 1)

    def run(self) -> list[Candidate]:
        prm = self.prm
        found: list[Candidate] = []
        drawn_this_round = 0
        while len(self.alive_idx) >= prm.min_support:
            n_alive = len(self.alive_idx)
            capped = drawn_this_round >= prm.max_candidates_per_round
            if len(self.pool) == 0:
                if capped or (
                    self.n_valid_triplets
                    and self._p_miss(prm.min_support, n_alive) <= prm.p_outlook
                ):
                    break
                drawn_this_round += self._sample_batch(prm.batch_size)
                continue
            i = self._best()
            score = int(self.pool.exact[i])
            if score < prm.min_support:
                p_miss = self._p_miss(prm.min_support, n_alive)
                if p_miss <= prm.p_outlook or capped:
                    break
                drawn_this_round += self._sample_batch(prm.batch_size)
                continue
            p_miss = self._p_miss(score, n_alive)
            if p_miss > prm.p_outlook and not capped:
                drawn_this_round += self._sample_batch(prm.batch_size)
                continue
            cand = self._extract(i)
            if cand is None:
                self.pool.keep(np.arange(len(self.pool)) != i)
                continue
            log.debug("extracted %s with %d inliers (%d alive)", cand.cls.name, cand.score, n_alive)
            found.append(cand)
            self._remove(cand.inliers)
            drawn_this_round = 0
        return found


def detect_primitives(
    points,
    normals,
    allowed_classes: Sequence[PrimitiveClass] = PRIMITIVE_CLASSES,
    params: Optional[RansacParams] = None,
    pixels=None,
    image_shape: Optional[tuple[int, int]] = None,
) -> list[Candidate]:
    """Greedily extract primitives of ``allowed_classes`` from oriented points.

    ``pixels`` (flat pixel ids) and ``image_shape`` enable the image
    connectivity filter; without them every expanded inlier is kept.
    Returned candidates are disjoint and each has at least
    ``params.min_support`` inliers. Deterministic for a fixed ``params.seed``.
    """
    params = params or RansacParams()
    if len(points) < params.min_support or not allowed_classes:
        return []
    return _Detector(points, normals, allowed_classes, params, pixels, image_shape).run()
