"""Detection matching and scoring: IoT, fitting error, PAP/PAR and reports.

A prediction matches a true instance when its intersection-over-true (the
share of the instance's pixels among the prediction's inliers) exceeds 0.3
and the classes agree. Each prediction matches at most one instance (the
largest IoT); each matched instance keeps the prediction with the smallest
fitting error as its best match.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .classes import PRIMITIVE_CLASSES, SHORT_NAMES, PrimitiveClass
from .geometry import PrimitiveModel
from .rangeimage import LabelMap

IOT_THRESHOLD = 0.3


def iot(prediction_pixels, instance_pixels) -> float:
    """|prediction ∩ instance| / |instance| over pixel ids."""
    inst = np.unique(np.asarray(instance_pixels))
    if inst.size == 0:
        raise ValueError("empty instance")
    hit = np.intersect1d(np.asarray(prediction_pixels), inst, assume_unique=False)
    return hit.size / inst.size


def fitting_error(points, model: PrimitiveModel) -> float:
    """Mean point-to-surface distance of all instance points (meters)."""
    P = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(P) == 0:
        raise ValueError("empty instance")
    return float(np.mean(model.distance(P)))


@dataclass(frozen=True)
class Match:
    prediction: int
    instance: int
    iot: float
    fit_error: float


def _zeros():
    return np.zeros(len(PRIMITIVE_CLASSES), dtype=np.int64)


def _fzeros():
    return np.zeros(len(PRIMITIVE_CLASSES))


@dataclass
class ScanCounts:
    """Per-class tallies (columns PLN, SPH, CYL, CON); summable across scans."""

    n_p: np.ndarray = field(default_factory=_zeros)
    n_t: np.ndarray = field(default_factory=_zeros)
    n_p2t: np.ndarray = field(default_factory=_zeros)
    n_t2p: np.ndarray = field(default_factory=_zeros)
    best_err_sum: np.ndarray = field(default_factory=_fzeros)
    matched_err_sum: np.ndarray = field(default_factory=_fzeros)

    def __add__(self, other: "ScanCounts") -> "ScanCounts":
        return ScanCounts(*(getattr(self, f) + getattr(other, f) for f in self.__dataclass_fields__))

    @property
    def unmatched_predictions(self) -> int:
        return int((self.n_p - self.n_p2t).sum())


def _col(cls) -> int:
    return int(cls) - 1


def true_instances(labels: LabelMap, min_pixels: int = 1) -> dict[int, PrimitiveClass]:
    """Visible primitive instances (``Other`` excluded) with at least ``min_pixels`` pixels."""
    counts = np.bincount(labels.instance_id.ravel())
    return {
        iid: c
        for iid, c in labels.instance_classes().items()
        if c in PRIMITIVE_CLASSES and counts[iid] >= min_pixels
    }


def match_detections(
    preds: Sequence,
    labels: LabelMap,
    points: np.ndarray,
    min_instance_pixels: int = 1,
) -> tuple[list[Match], ScanCounts]:
    """Match predictions of one scan to its ground-truth instances.

    ``preds`` are detections carrying ``model``, ``cls`` and flat ``pixels``.
    ``points`` is an ``(H*W, 3)`` (or ``(H, W, 3)``) point map in the same
    frame as the fitted models; fitting errors average over every pixel of
    the true instance.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    inst_map = labels.instance_id.ravel()
    truth = true_instances(labels, min_instance_pixels)
    sizes = np.bincount(inst_map, minlength=int(inst_map.max()) + 1)
    members: dict[int, np.ndarray] = {}

    def pixels_of(iid):
        if iid not in members:
            members[iid] = np.flatnonzero(inst_map == iid)
        return members[iid]

    counts = ScanCounts()
    for c in truth.values():
        counts.n_t[_col(c)] += 1
    matches: list[Match] = []
    for k, pred in enumerate(preds):
        counts.n_p[_col(pred.cls)] += 1
        hits = np.bincount(inst_map[np.asarray(pred.pixels)], minlength=len(sizes))
        options = []
        for iid in np.flatnonzero(hits):
            if iid == 0 or truth.get(int(iid)) != pred.cls:
                continue
            ratio = hits[iid] / sizes[iid]
            if ratio > IOT_THRESHOLD:
                options.append((int(iid), float(ratio)))
        if not options:
            continue
        scored = [(iid, r, fitting_error(pts[pixels_of(iid)], pred.model)) for iid, r in options]
        iid, r, err = min(scored, key=lambda x: (-x[1], x[2]))
        matches.append(Match(k, iid, r, err))
        counts.n_p2t[_col(pred.cls)] += 1
        counts.matched_err_sum[_col(pred.cls)] += err
    best: dict[int, Match] = {}
    for m in matches:
        if m.instance not in best or m.fit_error < best[m.instance].fit_error:
            best[m.instance] = m
    for iid, m in best.items():
        col = _col(truth[iid])
        counts.n_t2p[col] += 1
        counts.best_err_sum[col] += m.fit_error
    return matches, counts


def best_matches(matches: Iterable[Match]) -> dict[int, Match]:
    best: dict[int, Match] = {}
    for m in matches:
        if m.instance not in best or m.fit_error < best[m.instance].fit_error:
            best[m.instance] = m
    return best


def _safe(num, den):
    num = np.asarray(num, dtype=float)
    den = np.asarray(den, dtype=float)
    return np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)


@dataclass
class DetectionReport:
    """Aggregated detection quality over a scan set (Table II layout).

    Ratios with a zero denominator are reported as 0 and listed in ``empty``.
    Fitting errors are in centimeters: ``fit_error_cm`` averages best
    matches, ``fit_error_matched_cm`` averages every matched prediction.
    """

    counts: ScanCounts
    label: str = ""

    @property
    def n_p(self):
        return np.append(self.counts.n_p, self.counts.n_p.sum())

    @property
    def n_t(self):
        return np.append(self.counts.n_t, self.counts.n_t.sum())

    @property
    def n_p2t(self):
        return np.append(self.counts.n_p2t, self.counts.n_p2t.sum())

    @property
    def n_t2p(self):
        return np.append(self.counts.n_t2p, self.counts.n_t2p.sum())

    @property
    def pap(self):
        return _safe(self.n_p2t, self.n_p)

    @property
    def par(self):
        return _safe(self.n_t2p, self.n_t)

    @property
    def ratio(self) -> float:
        return float(_safe(self.n_t2p[-1], self.n_p[-1]))

    @property
    def fit_error_cm(self):
        s = np.append(self.counts.best_err_sum, self.counts.best_err_sum.sum())
        return 100.0 * _safe(s, self.n_t2p)

    @property
    def fit_error_matched_cm(self):
        s = np.append(self.counts.matched_err_sum, self.counts.matched_err_sum.sum())
        return 100.0 * _safe(s, self.n_p2t)

    @property
    def empty(self) -> list[str]:
        out = []
        cols = [SHORT_NAMES[c] for c in PRIMITIVE_CLASSES] + ["ALL"]
        for name, den in (("PAP", self.n_p), ("PAR", self.n_t), ("ERR", self.n_t2p)):
            out += [f"{name}:{c}" for c, d in zip(cols, den) if d == 0]
        return out

    def columns(self) -> list[tuple[str, float]]:
        cols = [SHORT_NAMES[c] for c in PRIMITIVE_CLASSES] + ["ALL"]
        row: list[tuple[str, float]] = []
        row += [(f"Np_{c}", int(v)) for c, v in zip(cols, self.n_p)]
        row += [(f"Nt2p_{c}", int(v)) for c, v in zip(cols, self.n_t2p)]
        row.append(("Nt2p/Np", self.ratio))
        row += [(f"PAP_{c}", float(v)) for c, v in zip(cols, self.pap)]
        row += [(f"PAR_{c}", float(v)) for c, v in zip(cols, self.par)]
        row += [(f"Err_{c}", float(v)) for c, v in zip(cols, self.fit_error_cm)]
        row += [(f"Nt_{c}", int(v)) for c, v in zip(cols, self.n_t)]
        row += [(f"Np2t_{c}", int(v)) for c, v in zip(cols, self.n_p2t)]
        row += [(f"ErrMatched_{c}", float(v)) for c, v in zip(cols, self.fit_error_matched_cm)]
        return row

    def to_table(self) -> str:
        """Aligned text table in Table II column order."""
        cols = [SHORT_NAMES[c] for c in PRIMITIVE_CLASSES] + ["ALL"]
        groups = [
            ("No. Primitives Fitted (Np)", self.n_p, "{:d}"),
            ("No. Matched Instance (Nt2p)", self.n_t2p, "{:d}"),
            ("Primitive Average Precision (PAP)", self.pap, "{:.3f}"),
            ("Primitive Average Recall (PAR)", self.par, "{:.3f}"),
            ("Fitting Error (cm)", self.fit_error_cm, "{:.3f}"),
            ("Fitting Error, all matches (cm)", self.fit_error_matched_cm, "{:.3f}"),
            ("No. True Instances (Nt)", self.n_t, "{:d}"),
        ]
        name = self.label or "method"
        lines = [f"{name}   Nt2p/Np = {self.ratio:.3f}"]
        for title, values, fmt in groups:
            lines.append(f"  {title}")
            lines.append("    " + "".join(f"{c:>9s}" for c in cols))
            lines.append(
                "    " + "".join(f"{fmt.format(int(v) if fmt == '{:d}' else float(v)):>9s}" for v in values)
            )
        if self.empty:
            lines.append("  undefined (reported as 0): " + ", ".join(self.empty))
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        cols = self.columns()
        w.writerow(["method"] + [k for k, _ in cols])
        w.writerow([self.label] + [v if isinstance(v, int) else f"{v:.6f}" for _, v in cols])
        return buf.getvalue()


def aggregate_report(scans: Iterable[ScanCounts], label: str = "") -> DetectionReport:
    total = ScanCounts()
    for c in scans:
        total = total + c
    return DetectionReport(total, label)


def comparison_table(reports: Sequence[DetectionReport]) -> str:
    """One row per method, Table II column order."""
    cols = [SHORT_NAMES[c] for c in PRIMITIVE_CLASSES] + ["ALL"]
    head = (
        f"{'':14s}|{'Np':^40s}|{'Nt2p':^40s}|{'Nt2p/Np':^9s}|{'PAP':^40s}|{'PAR':^40s}|{'Fitting Error (cm)':^40s}\n"
        f"{'':14s}|" + "|".join(["".join(f"{c:>8s}" for c in cols)] * 2) + f"|{'':9s}|"
        + "|".join(["".join(f"{c:>8s}" for c in cols)] * 3) + "\n"
    )
    rows = []
    for r in reports:
        rows.append(
            f"{r.label[:14]:14s}|"
            + "".join(f"{int(v):8d}" for v in r.n_p) + "|"
            + "".join(f"{int(v):8d}" for v in r.n_t2p) + "|"
            + f"{r.ratio:9.3f}|"
            + "".join(f"{v:8.3f}" for v in r.pap) + "|"
            + "".join(f"{v:8.3f}" for v in r.par) + "|"
            + "".join(f"{v:8.3f}" for v in r.fit_error_cm)
        )
    return head + "\n".join(rows) + "\n"
