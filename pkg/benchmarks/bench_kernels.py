"""Time the numba and numpy paths of every kernel on scan-sized inputs.

    python benchmarks/bench_kernels.py [--repeat 5] [--width 640 --height 480]

Both paths are imported directly, so BAGSFIT_NUMBA does not matter here.
The first numba call (compilation or cache load) is timed separately.
Outputs of the two paths are compared before timing.
"""

import argparse
import math
import time
import timeit

import numpy as np

from bagsfit import kernels
from bagsfit.pipeline import scan_points
from bagsfit.ransac import RansacParams, detect_primitives
from bagsfit.rangeimage import unproject
from bagsfit.scanner import ScannerConfig, render_scan
from bagsfit.scene import generate_scene, sample_scan_poses


def scan_inputs(width, height):
    scene = generate_scene(0)
    cfg = ScannerConfig(width=width, height=height)
    img, labels = render_scan(scene, sample_scan_poses(scene)[17], cfg, seed=1)
    pts, valid = unproject(img)
    sp = scan_points(img)
    P, N = sp.points[sp.usable], sp.normals[sp.usable]
    # Candidate models of every class, as the detector would score them.
    rng = np.random.default_rng(0)
    cands = detect_primitives(P, N, params=RansacParams(seed=0))
    models = np.array([c.model.as_array() for c in cands])
    kinds = np.array([int(c.cls) for c in cands], dtype=np.int64)
    reps = max(1, 64 // max(1, len(models)))
    models, kinds = np.tile(models, (reps, 1)), np.tile(kinds, reps)
    # Jitter positions; a plane's first three entries are its unit normal.
    moved = kinds != 1
    models[moved, :3] += rng.normal(0, 0.01, (int(moved.sum()), 3))
    inst = labels.instance_id.astype(np.int64)
    return pts, valid, P, N, kinds, models, inst, labels.valid


def cases(width, height):
    pts, valid, P, N, kinds, models, inst, lvalid = scan_inputs(width, height)
    eps, cos_thr = 0.03, math.cos(math.radians(30))
    k0, m0 = int(kinds[0]), models[0]
    # One refit Jacobian: a cone and its 12 finite-difference neighbours.
    cone = np.array([0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.4, 0.0])
    cone_rows = np.tile(cone, (13, 1))
    cone_rows[1:, :3] += 1e-7 * rng_rows(12)
    return [
        (f"count_inliers ({len(models)} models x {len(P)} pts)", kernels._count_inliers_nb, kernels._count_inliers_np,
         (kinds, models, P, N, eps, cos_thr)),
        (f"inlier_mask ({len(P)} pts)", kernels._inlier_mask_nb, kernels._inlier_mask_np, (k0, m0, P, N, eps, cos_thr)),
        (f"signed_distances ({2 * 6 + 1} cones x {len(P)} pts)", kernels._signed_distances_nb,
         kernels._signed_distances_np, (4, cone_rows, P)),
        (f"pca_normals ({width}x{height}, 5x5)", kernels._pca_normals_nb, kernels._pca_normals_np, (pts, valid, 2)),
        (f"boundary_mask ({width}x{height}, 5x5)", kernels._boundary_mask_nb, kernels._boundary_mask_np,
         (inst, lvalid, 2)),
    ]


def rng_rows(n):
    return np.random.default_rng(1).normal(size=(n, 3))


def same(a, b):
    if isinstance(a, tuple):
        return all(same(x, y) for x, y in zip(a, b))
    if a.dtype.kind == "f":
        # Box-sum moments in the numpy path cost a few digits on far pixels.
        return np.allclose(np.abs(a), np.abs(b), atol=1e-4)
    return np.array_equal(a, b)


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--width", type=int, default=640)
    ap.add_argument("--height", type=int, default=480)
    args = ap.parse_args()
    if not kernels._HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")
    print(f"{'kernel':<44} {'first nb':>9} {'numba':>9} {'numpy':>9} {'speedup':>8}  agree")
    for name, nb, np_, call_args in cases(args.width, args.height):
        t0 = time.perf_counter()
        a = nb(*call_args)
        first = time.perf_counter() - t0
        b = np_(*call_args)
        t_nb = min(timeit.repeat(lambda: nb(*call_args), number=1, repeat=args.repeat))
        t_np = min(timeit.repeat(lambda: np_(*call_args), number=1, repeat=args.repeat))
        print(
            f"{name:<44} {1e3 * first:8.1f}ms {1e3 * t_nb:8.1f}ms {1e3 * t_np:8.1f}ms {t_np / t_nb:7.1f}x  {same(a, b)}"
        )


if __name__ == "__main__":
    main()
