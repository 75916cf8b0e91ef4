"""Hot inner loops with two interchangeable implementations.

Each kernel exists as a numba ``@njit`` loop (``*_nb``) and a vectorised
numpy version (``*_np``). The public name binds to the numba version unless
numba is missing or the environment sets ``BAGSFIT_NUMBA=0``. Both paths
must agree; ``tests/test_kernels.py`` checks that and
``benchmarks/bench_kernels.py`` times them.

Packed model layout (``params`` rows, 8 floats), indexed by class id:

* plane     ``nx ny nz d``
* sphere    ``cx cy cz r``
* cylinder  ``ax ay az ux uy uz r``
* cone      ``ax ay az ux uy uz theta``
"""

from __future__ import annotations

import math
import os

import numpy as np
from scipy import ndimage

try:
    import numba

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _HAVE_NUMBA = False

NUMBA_ENABLED = _HAVE_NUMBA and os.environ.get("BAGSFIT_NUMBA", "1") != "0"

PLANE, SPHERE, CYLINDER, CONE = 1, 2, 3, 4


def _njit(fn):
    if _HAVE_NUMBA:
        return numba.njit(cache=True, nogil=True)(fn)
    return fn


# ---------------------------------------------------------------------------
# Candidate scoring


@_njit
def _dist_abscos(kind, prm, x, y, z, nx, ny, nz):
    """Distance to the surface and |cos| between a normal and the surface normal."""
    if kind == PLANE:
        d = prm[0] * x + prm[1] * y + prm[2] * z - prm[3]
        c = prm[0] * nx + prm[1] * ny + prm[2] * nz
        return abs(d), abs(c)
    if kind == SPHERE:
        vx, vy, vz = x - prm[0], y - prm[1], z - prm[2]
        r = math.sqrt(vx * vx + vy * vy + vz * vz)
        if r > 1e-15:
            c = (vx * nx + vy * ny + vz * nz) / r
        else:
            c = nx
        return abs(r - prm[3]), abs(c)
    ux, uy, uz = prm[3], prm[4], prm[5]
    vx, vy, vz = x - prm[0], y - prm[1], z - prm[2]
    h = vx * ux + vy * uy + vz * uz
    rx, ry, rz = vx - h * ux, vy - h * uy, vz - h * uz
    rho = math.sqrt(rx * rx + ry * ry + rz * rz)
    if rho > 1e-15:
        ex, ey, ez = rx / rho, ry / rho, rz / rho
    else:
        ex, ey, ez = 1.0 - ux * ux, -ux * uy, -ux * uz
        ne = math.sqrt(ex * ex + ey * ey + ez * ez)
        if ne <= 1e-6:
            ex, ey, ez = -uy * ux, 1.0 - uy * uy, -uy * uz
            ne = math.sqrt(ex * ex + ey * ey + ez * ez)
        ex, ey, ez = ex / ne, ey / ne, ez / ne
    if kind == CYLINDER:
        return abs(rho - prm[6]), abs(ex * nx + ey * ny + ez * nz)
    ca, sa = math.cos(prm[6]), math.sin(prm[6])
    t = h * ca + rho * sa
    if t > 0:
        d = abs(rho * ca - h * sa)
    else:
        d = math.sqrt(vx * vx + vy * vy + vz * vz)
    c = ca * (ex * nx + ey * ny + ez * nz) - sa * (ux * nx + uy * ny + uz * nz)
    return d, abs(c)


@_njit
def _count_inliers_nb(kinds, params, points, normals, eps, cos_thr):
    n_cand = kinds.shape[0]
    counts = np.zeros(n_cand, dtype=np.int64)
    for c in range(n_cand):
        kind = kinds[c]
        prm = params[c]
        cnt = 0
        for i in range(points.shape[0]):
            d, ac = _dist_abscos(
                kind, prm, points[i, 0], points[i, 1], points[i, 2],
                normals[i, 0], normals[i, 1], normals[i, 2],
            )
            if d <= eps and ac >= cos_thr:
                cnt += 1
        counts[c] = cnt
    return counts


@_njit
def _inlier_mask_nb(kind, prm, points, normals, eps, cos_thr):
    out = np.zeros(points.shape[0], dtype=np.bool_)
    for i in range(points.shape[0]):
        d, ac = _dist_abscos(
            kind, prm, points[i, 0], points[i, 1], points[i, 2],
            normals[i, 0], normals[i, 1], normals[i, 2],
        )
        out[i] = d <= eps and ac >= cos_thr
    return out


def _inlier_mask_np(kind, prm, points, normals, eps, cos_thr):
    from .geometry import model_from_array

    model = model_from_array(int(kind), prm)
    d = model.distance(points)
    c = np.abs(np.einsum("ij,ij->i", model.normals_at_projection(points), normals))
    return (d <= eps) & (c >= cos_thr)


def _count_inliers_np(kinds, params, points, normals, eps, cos_thr):
    return np.array(
        [
            int(_inlier_mask_np(k, p, points, normals, eps, cos_thr).sum())
            for k, p in zip(kinds, params)
        ],
        dtype=np.int64,
    )


@_njit
def _signed_distances_nb(kind, params, points):
    out = np.empty((params.shape[0], points.shape[0]))
    for c in range(params.shape[0]):
        prm = params[c]
        ca, sa = math.cos(prm[6]), math.sin(prm[6])
        for i in range(points.shape[0]):
            x, y, z = points[i, 0], points[i, 1], points[i, 2]
            if kind == PLANE:
                out[c, i] = prm[0] * x + prm[1] * y + prm[2] * z - prm[3]
                continue
            vx, vy, vz = x - prm[0], y - prm[1], z - prm[2]
            if kind == SPHERE:
                out[c, i] = math.sqrt(vx * vx + vy * vy + vz * vz) - prm[3]
                continue
            h = vx * prm[3] + vy * prm[4] + vz * prm[5]
            rx, ry, rz = vx - h * prm[3], vy - h * prm[4], vz - h * prm[5]
            rho = math.sqrt(rx * rx + ry * ry + rz * rz)
            if kind == CYLINDER:
                out[c, i] = rho - prm[6]
            elif h * ca + rho * sa > 0:
                out[c, i] = rho * ca - h * sa
            else:
                out[c, i] = math.sqrt(vx * vx + vy * vy + vz * vz)
    return out


def _signed_distances_np(kind, params, points):
    from .geometry import model_from_array

    out = np.empty((len(params), len(points)))
    for c, prm in enumerate(params):
        out[c] = model_from_array(int(kind), prm).signed_distance(points)
    return out


# ---------------------------------------------------------------------------
# PCA normals over an image window


@_njit
def _rank_deficient(a00, a01, a02, a11, a12, a22):
    # Sum of principal 2x2 minors = w0 w1 + w0 w2 + w1 w2; for a PSD matrix it
    # vanishes exactly when the rank is below 2, and unlike the eigenvalues
    # it is computed without loss near repeated roots.
    minors = a00 * a11 - a01 * a01 + a00 * a22 - a02 * a02 + a11 * a22 - a12 * a12
    tr = a00 + a11 + a22
    return minors <= 1e-12 * tr * tr


@_njit
def _sym3_smallest(a00, a01, a02, a11, a12, a22):
    """Eigenvalues (ascending) and unit eigenvector of the smallest one of a
    symmetric 3x3 matrix, in closed form (trigonometric solution)."""
    q = (a00 + a11 + a22) / 3.0
    b00, b11, b22 = a00 - q, a11 - q, a22 - q
    p = math.sqrt((b00 * b00 + b11 * b11 + b22 * b22 + 2.0 * (a01 * a01 + a02 * a02 + a12 * a12)) / 6.0)
    if p == 0.0:
        return q, q, q, 0.0, 0.0, 0.0
    det = b00 * (b11 * b22 - a12 * a12) - a01 * (a01 * b22 - a12 * a02) + a02 * (a01 * a12 - b11 * a02)
    half_det = min(max(det / (2.0 * p * p * p), -1.0), 1.0)
    phi = math.acos(half_det) / 3.0
    w2 = q + 2.0 * p * math.cos(phi)
    w0 = q + 2.0 * p * math.cos(phi + 2.0 * math.pi / 3.0)
    w1 = 3.0 * q - w0 - w2
    # Rows of A - w0 I span the orthogonal complement; the largest pairwise
    # cross product is the best-conditioned null vector.
    r0x, r0y, r0z = a00 - w0, a01, a02
    r1x, r1y, r1z = a01, a11 - w0, a12
    r2x, r2y, r2z = a02, a12, a22 - w0
    best, nx, ny, nz = -1.0, 0.0, 0.0, 0.0
    for k in range(3):
        if k == 0:
            ux, uy, uz, vx, vy, vz = r0x, r0y, r0z, r1x, r1y, r1z
        elif k == 1:
            ux, uy, uz, vx, vy, vz = r0x, r0y, r0z, r2x, r2y, r2z
        else:
            ux, uy, uz, vx, vy, vz = r1x, r1y, r1z, r2x, r2y, r2z
        cx, cy, cz = uy * vz - uz * vy, uz * vx - ux * vz, ux * vy - uy * vx
        m = cx * cx + cy * cy + cz * cz
        if m > best:
            best, nx, ny, nz = m, cx, cy, cz
    if best <= 0.0:
        return w0, w1, w2, 0.0, 0.0, 0.0
    s = math.sqrt(best)
    return w0, w1, w2, nx / s, ny / s, nz / s


@_njit
def _pca_normals_nb(points, valid, half):
    H, W = valid.shape
    normals = np.zeros((H, W, 3))
    ok = np.zeros((H, W), dtype=np.bool_)
    cov = np.zeros((3, 3))
    for r in range(H):
        for c in range(W):
            if not valid[r, c]:
                continue
            r0, r1 = max(r - half, 0), min(r + half + 1, H)
            c0, c1 = max(c - half, 0), min(c + half + 1, W)
            n = 0
            mx = my = mz = 0.0
            for i in range(r0, r1):
                for j in range(c0, c1):
                    if valid[i, j]:
                        n += 1
                        mx += points[i, j, 0]
                        my += points[i, j, 1]
                        mz += points[i, j, 2]
            if n < 3:
                continue
            mx /= n
            my /= n
            mz /= n
            cov[:, :] = 0.0
            for i in range(r0, r1):
                for j in range(c0, c1):
                    if valid[i, j]:
                        dx = points[i, j, 0] - mx
                        dy = points[i, j, 1] - my
                        dz = points[i, j, 2] - mz
                        cov[0, 0] += dx * dx
                        cov[0, 1] += dx * dy
                        cov[0, 2] += dx * dz
                        cov[1, 1] += dy * dy
                        cov[1, 2] += dy * dz
                        cov[2, 2] += dz * dz
            if _rank_deficient(cov[0, 0], cov[0, 1], cov[0, 2], cov[1, 1], cov[1, 2], cov[2, 2]):
                continue
            _, _, _, nx, ny, nz = _sym3_smallest(cov[0, 0] / n, cov[0, 1] / n, cov[0, 2] / n,
                                                 cov[1, 1] / n, cov[1, 2] / n, cov[2, 2] / n)
            if nx * nx + ny * ny + nz * nz == 0.0:
                continue
            if nx * points[r, c, 0] + ny * points[r, c, 1] + nz * points[r, c, 2] > 0:
                nx, ny, nz = -nx, -ny, -nz
            normals[r, c, 0] = nx
            normals[r, c, 1] = ny
            normals[r, c, 2] = nz
            ok[r, c] = True
    return normals, ok


def _box_sum(a, half):
    """Sum over a (2*half+1)^2 window, truncated at the image border."""
    H, W = a.shape[:2]
    pad = [(half + 1, half)] + [(half + 1, half)] + [(0, 0)] * (a.ndim - 2)
    s = np.pad(a, pad).cumsum(0).cumsum(1)
    k = 2 * half + 1
    return s[k:, k:] - s[:-k, k:] - s[k:, :-k] + s[:-k, :-k]


def _pca_normals_np(points, valid, half):
    H, W = valid.shape
    v = valid.astype(float)
    P = np.where(valid[..., None], points, 0.0)
    # Shift to a local origin to limit cancellation in the raw moments.
    ref = P[valid].mean(axis=0) if valid.any() else np.zeros(3)
    P = np.where(valid[..., None], P - ref, 0.0)
    n = _box_sum(v, half)
    s1 = _box_sum(P, half)
    outer = P[..., :, None] * P[..., None, :]
    s2 = _box_sum(outer.reshape(H, W, 9), half).reshape(H, W, 3, 3)
    enough = valid & (n >= 3)
    nn = n[enough]
    mean = s1[enough] / nn[:, None]
    cov = s2[enough] / nn[:, None, None] - mean[:, :, None] * mean[:, None, :]
    _, vec = np.linalg.eigh(cov)
    nrm = vec[:, :, 0]
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    flip = np.einsum("ij,ij->i", nrm, points[enough]) > 0
    nrm[flip] *= -1
    minors = cov[:, 0, 0] * cov[:, 1, 1] + cov[:, 0, 0] * cov[:, 2, 2] + cov[:, 1, 1] * cov[:, 2, 2]
    minors -= cov[:, 0, 1] ** 2 + cov[:, 0, 2] ** 2 + cov[:, 1, 2] ** 2
    good = minors > 1e-12 * np.trace(cov, axis1=1, axis2=2) ** 2
    normals = np.zeros((H, W, 3))
    ok = np.zeros((H, W), dtype=bool)
    idx = np.flatnonzero(enough.ravel())[good]
    normals.reshape(-1, 3)[idx] = nrm[good]
    ok.ravel()[idx] = True
    return normals, ok


# ---------------------------------------------------------------------------
# Instance-aware boundaries


@_njit
def _boundary_mask_nb(instance, valid, half):
    H, W = valid.shape
    out = np.zeros((H, W), dtype=np.bool_)
    for r in range(H):
        for c in range(W):
            if not valid[r, c]:
                continue
            ref = instance[r, c]
            hit = False
            for i in range(max(r - half, 0), min(r + half + 1, H)):
                for j in range(max(c - half, 0), min(c + half + 1, W)):
                    if not valid[i, j] or instance[i, j] != ref:
                        hit = True
                        break
                if hit:
                    break
            out[r, c] = hit
    return out


def _boundary_mask_np(instance, valid, half):
    ids = np.where(valid, instance.astype(np.int64) + 1, 0)
    size = 2 * half + 1
    hi = ndimage.maximum_filter(ids, size=size, mode="nearest")
    lo = ndimage.minimum_filter(ids, size=size, mode="nearest")
    return ((hi != lo) | (lo == 0)) & valid


if NUMBA_ENABLED:
    count_inliers = _count_inliers_nb
    inlier_mask = _inlier_mask_nb
    signed_distances = _signed_distances_nb
    pca_normals = _pca_normals_nb
    boundary_mask = _boundary_mask_nb
else:
    count_inliers = _count_inliers_np
    inlier_mask = _inlier_mask_np
    signed_distances = _signed_distances_np
    pca_normals = _pca_normals_np
    boundary_mask = _boundary_mask_np
