"""Segmentation surrogate: probability maps from ground truth, metrics and loss.

The oracle replaces a trained segmentation network. It produces one-hot
maps from BAGS labels and degrades them with seeded label flips, boundary
dilation/erosion, Gaussian smoothing and softmax temperature, so fitting can
be tested from perfect to heavily corrupted segmentations. Maps produced by
any external model load through :func:`read_probability_maps`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import ndimage

from .bagsio import read_container, write_container
from .rangeimage import IGNORE, VOID, BagsLabelMap, BagsScheme

_SCHEMES = list(BagsScheme)


@dataclass(frozen=True, eq=False)
class ProbabilityMaps:
    """``maps[k]`` is the probability image of label ``k`` in ``scheme.names``.

    In multinomial mode the K values of every valid pixel sum to one.
    Invalid pixels hold zeros.
    """

    maps: np.ndarray
    scheme: BagsScheme
    valid: np.ndarray
    multinomial: bool = True

    def __post_init__(self):
        m = np.asarray(self.maps, dtype=np.float64)
        if m.ndim != 3 or m.shape[0] != self.scheme.K:
            raise ValueError(f"expected {self.scheme.K} probability planes")
        if m.min() < 0 or m.max() > 1:
            raise ValueError("probabilities must lie in [0, 1]")
        object.__setattr__(self, "maps", m)
        object.__setattr__(self, "valid", np.asarray(self.valid, dtype=bool))

    @property
    def K(self) -> int:
        return self.scheme.K


@dataclass
class CorruptionConfig:
    flip_rate: float = 0.0
    blur_radius: float = 0.0
    # > 0 dilates the Boundary label by that many pixels, < 0 erodes it.
    boundary_erode_dilate: int = 0
    # None keeps hard probabilities; otherwise softmax(Y / temperature).
    temperature: Optional[float] = None
    multinomial: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.flip_rate <= 1.0:
            raise ValueError("flip_rate must lie in [0, 1]")
        if self.temperature is not None and not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if self.blur_radius < 0:
            raise ValueError("blur_radius must be >= 0")


def _adjust_boundary(gt: BagsLabelMap, base: Optional[BagsLabelMap], amount: int) -> np.ndarray:
    lab = gt.labels.copy()
    b = gt.scheme.index("Boundary")
    mask = lab == b
    structure = np.ones((3, 3), dtype=bool)
    if amount > 0:
        grown = ndimage.binary_dilation(mask, structure, iterations=amount) & gt.valid
        lab[grown] = b
        return lab
    if base is None:
        raise ValueError("eroding boundaries needs the boundary-free base labels")
    shrunk = ndimage.binary_erosion(mask, structure, iterations=-amount, border_value=1)
    freed = mask & ~shrunk
    under = base.labels[freed]
    # Base labels use the base scheme; translate by name.
    names = base.scheme.names
    lut = np.full(256, IGNORE, dtype=np.uint8)
    for k, name in enumerate(names):
        if name in gt.scheme.names:
            lut[k] = gt.scheme.index(name)
    lab[freed] = lut[under]
    return lab


def oracle_probability_maps(
    gt: BagsLabelMap,
    corruption: Optional[CorruptionConfig] = None,
    base: Optional[BagsLabelMap] = None,
) -> ProbabilityMaps:
    """One-hot maps of ``gt`` passed through the configured corruption.

    Ignored pixels (observed but outside the label alphabet) get a uniform
    distribution; invalid pixels get zeros. ``base`` supplies labels without
    boundaries and is needed only for negative ``boundary_erode_dilate``.
    """
    cfg = corruption or CorruptionConfig()
    K = gt.scheme.K
    rng = np.random.default_rng(cfg.seed)
    lab = gt.labels
    if cfg.boundary_erode_dilate and gt.scheme.has_boundary:
        lab = _adjust_boundary(gt, base, cfg.boundary_erode_dilate)
    valid = gt.valid
    scored = lab < K
    lab = lab.astype(np.int64)
    if cfg.flip_rate > 0:
        flip = scored & (rng.random(lab.shape) < cfg.flip_rate)
        shift = rng.integers(1, K, size=lab.shape)
        lab = np.where(flip, (lab + shift) % K, lab)
    maps = np.zeros((K,) + lab.shape)
    for k in range(K):
        maps[k][scored & (lab == k)] = 1.0
    maps[:, valid & ~scored] = 1.0 / K
    if cfg.blur_radius > 0:
        for k in range(K):
            maps[k] = ndimage.gaussian_filter(maps[k], cfg.blur_radius, mode="nearest")
    if cfg.temperature is not None:
        z = maps / cfg.temperature
        z -= z.max(axis=0, keepdims=True)
        maps = np.exp(z)
        if not cfg.multinomial:
            maps /= maps.max(axis=0, keepdims=True)
    if cfg.multinomial:
        s = maps.sum(axis=0)
        maps = np.where(s > 0, maps / np.where(s > 0, s, 1.0), 1.0 / K)
    maps = np.clip(maps, 0.0, 1.0)
    maps[:, ~valid] = 0.0
    return ProbabilityMaps(maps, gt.scheme, valid, cfg.multinomial)


def argmax_segmentation(maps: ProbabilityMaps) -> tuple[BagsLabelMap, list[np.ndarray]]:
    """Assign every valid pixel its most probable label (ties: lowest index).

    Returns the label map and, per label, the flat pixel indices assigned to it.
    """
    best = np.argmax(maps.maps, axis=0).astype(np.uint8)
    best[~maps.valid] = VOID
    flat = best.ravel()
    sets = [np.flatnonzero(flat == k) for k in range(maps.K)]
    return BagsLabelMap(best, maps.scheme), sets


@dataclass
class SegmentationMetrics:
    names: tuple[str, ...]
    precision: np.ndarray
    recall: np.ndarray
    iou: np.ndarray
    f1: np.ndarray
    accuracy: float
    confusion: np.ndarray

    def average(self) -> dict[str, float]:
        """Unweighted mean over classes, skipping undefined entries."""
        return {
            name: float(np.nanmean(getattr(self, name))) if np.isfinite(getattr(self, name)).any() else float("nan")
            for name in ("precision", "recall", "iou", "f1")
        }

    def table(self) -> str:
        rows = [f"{'':10s}{'Precision':>10s}{'Recall':>10s}{'IoU':>10s}{'F1':>10s}"]
        for k, n in enumerate(self.names):
            rows.append(f"{n:10s}{self.precision[k]:10.3f}{self.recall[k]:10.3f}{self.iou[k]:10.3f}{self.f1[k]:10.3f}")
        a = self.average()
        rows.append(f"{'AVE':10s}{a['precision']:10.3f}{a['recall']:10.3f}{a['iou']:10.3f}{a['f1']:10.3f}")
        rows.append(f"Accuracy  {self.accuracy:.3f}")
        return "\n".join(rows)


def _ratio(num, den):
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(den > 0, num / np.where(den > 0, den, 1), np.nan)


def segmentation_metrics(pred, gt: BagsLabelMap) -> SegmentationMetrics:
    """Per-class precision/recall/IoU/F1 and pixel accuracy over scored pixels.

    ``pred`` is a :class:`BagsLabelMap` (its scheme must match) or a plain
    integer label array in ``gt``'s scheme.
    """
    if isinstance(pred, BagsLabelMap):
        if pred.scheme != gt.scheme:
            raise ValueError(f"scheme mismatch: {pred.scheme.value} vs {gt.scheme.value}")
        pred = pred.labels
    pred = np.asarray(pred)
    if pred.shape != gt.labels.shape:
        raise ValueError("prediction and ground truth differ in shape")
    K = gt.scheme.K
    sel = gt.scored
    g = gt.labels[sel].astype(np.int64)
    p = pred[sel].astype(np.int64)
    # Predictions outside the alphabet count as wrong for every class.
    p = np.where(p < K, p, K)
    conf = np.bincount(g * (K + 1) + p, minlength=K * (K + 1)).reshape(K, K + 1)
    tp = np.diag(conf[:, :K]).astype(float)
    fp = conf[:, :K].sum(axis=0) - tp
    fn = conf.sum(axis=1) - tp
    precision = _ratio(tp, tp + fp)
    recall = _ratio(tp, tp + fn)
    iou = _ratio(tp, tp + fp + fn)
    f1 = _ratio(2 * tp, 2 * tp + fp + fn)
    accuracy = float(tp.sum() / max(sel.sum(), 1))
    return SegmentationMetrics(gt.scheme.names, precision, recall, iou, f1, accuracy, conf)


@dataclass(frozen=True)
class LossWeights:
    beta: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.beta, dtype=float)
        if (b <= 0).any():
            raise ValueError("loss weights must be positive")
        object.__setattr__(self, "beta", b)

    @classmethod
    def from_counts(cls, counts) -> "LossWeights":
        """Inverse class frequency, normalised to sum to K. Empty classes count as one pixel."""
        inv = 1.0 / np.maximum(np.asarray(counts, dtype=float), 1.0)
        return cls(len(inv) * inv / inv.sum())

    @classmethod
    def uniform(cls, K: int) -> "LossWeights":
        return cls(np.ones(K))


def multi_binomial_loss(
    maps: ProbabilityMaps, gt: BagsLabelMap, weights: LossWeights, eps: float = 1e-7
) -> tuple[float, np.ndarray]:
    """Class-weighted sum of per-class binary cross-entropies.

    Sums over valid, non-ignored pixels with probabilities clamped to
    ``[eps, 1 - eps]``. Returns ``(total, per_class_losses)``.
    """
    if maps.scheme != gt.scheme:
        raise ValueError("scheme mismatch")
    sel = gt.scored
    Y = np.clip(maps.maps[:, sel], eps, 1.0 - eps)
    lab = gt.labels[sel]
    target = lab[None, :] == np.arange(maps.K)[:, None]
    per_class = -np.where(target, np.log(Y), np.log1p(-Y)).sum(axis=1)
    return float(weights.beta @ per_class), per_class


def write_probability_maps(path, maps: ProbabilityMaps) -> None:
    channels = [(f"Y{k:03d}", maps.maps[k].astype(np.float32)) for k in range(maps.K)]
    write_container(path, "PROB", channels, [_SCHEMES.index(maps.scheme), float(maps.multinomial)])


def read_probability_maps(path, valid: Optional[np.ndarray] = None) -> ProbabilityMaps:
    """Load maps; without ``valid``, pixels whose planes are all zero are invalid."""
    _, ch, meta = read_container(path, "PROB")
    scheme = _SCHEMES[int(meta[0])]
    maps = np.stack(list(ch.values())).astype(np.float64)
    if valid is None:
        valid = maps.sum(axis=0) > 0
    return ProbabilityMaps(maps, scheme, valid, bool(meta[1]))
