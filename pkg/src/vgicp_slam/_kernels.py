"""Compiled inner loops for voxel lookup and GICP cost accumulation.

Per-point contributions are summed inside fixed-size chunks and the chunk
partials are combined by a pairwise tree, so results do not depend on how
the work is scheduled.
"""

import numpy as np
from numba import njit

KEY_BITS = 21
KEY_OFFSET = 1 << (KEY_BITS - 1)
KEY_MASK = (1 << KEY_BITS) - 1
CHUNK = 256


@njit(cache=True, nogil=True)
def _pack(cx, cy, cz):
    return ((cx + KEY_OFFSET) << (2 * KEY_BITS)) | ((cy + KEY_OFFSET) << KEY_BITS) | (cz + KEY_OFFSET)


_GOLDEN = np.uint64(0x9E3779B97F4A7C15)


@njit(cache=True, nogil=True)
def _slot(key, shift):
    return np.int64((np.uint64(key) * _GOLDEN) >> np.uint64(shift))


@njit(cache=True, nogil=True)
def build_hash_table(keys):
    """Open-addressing table (linear probing) from packed key to row index.

    Returns ``(table_keys, table_rows, shift)``; empty slots hold key -1.
    """
    m = keys.shape[0]
    bits = 4
    while (1 << bits) < 2 * m:
        bits += 1
    size = 1 << bits
    shift = 64 - bits
    tkeys = np.full(size, -1, dtype=np.int64)
    trows = np.full(size, -1, dtype=np.int64)
    for i in range(m):
        s = _slot(keys[i], shift)
        while tkeys[s] != -1:
            s = (s + 1) & (size - 1)
        tkeys[s] = keys[i]
        trows[s] = i
    return tkeys, trows, shift


@njit(cache=True, nogil=True)
def voxel_correspondences(points, R, t, tkeys, trows, shift, resolution):
    """Row of the voxel holding ``R p + t`` for each point, or -1."""
    n = points.shape[0]
    out = np.full(n, -1, dtype=np.int64)
    size = tkeys.shape[0]
    for k in range(n):
        x = points[k, 0]
        y = points[k, 1]
        z = points[k, 2]
        qx = R[0, 0] * x + R[0, 1] * y + R[0, 2] * z + t[0]
        qy = R[1, 0] * x + R[1, 1] * y + R[1, 2] * z + t[1]
        qz = R[2, 0] * x + R[2, 1] * y + R[2, 2] * z + t[2]
        fx = np.floor(qx / resolution)
        fy = np.floor(qy / resolution)
        fz = np.floor(qz / resolution)
        if (
            abs(fx) >= KEY_OFFSET
            or abs(fy) >= KEY_OFFSET
            or abs(fz) >= KEY_OFFSET
            or not (np.isfinite(fx) and np.isfinite(fy) and np.isfinite(fz))
        ):
            continue
        key = _pack(np.int64(fx), np.int64(fy), np.int64(fz))
        s = _slot(key, shift)
        while True:
            tk = tkeys[s]
            if tk == key:
                out[k] = trows[s]
                break
            if tk == -1:
                break
            s = (s + 1) & (size - 1)
    return out


@njit(cache=True, nogil=True)
def _tree_sum(parts, m):
    while m > 1:
        half = m // 2
        for i in range(half):
            parts[i] = parts[2 * i] + parts[2 * i + 1]
        if m % 2 == 1:
            parts[half] = parts[m - 1]
            m = half + 1
        else:
            m = half
    return parts[0]


@njit(cache=True, nogil=True)
def accumulate_gicp(src_means, src_covs, tgt_means, tgt_covs, corr, R, t, with_hessian):
    """Sum GICP terms over corresponding points for the transform ``(R, t)``.

    The residual of point ``k`` is ``e = mu'_k - (R mu_k + t)`` weighted by
    ``(C'_k + R C_k R^T)^-1``.  Derivatives are taken w.r.t. a left
    perturbation of the transform.  Returns a packed vector

        [error, inliers, skipped, grad(6), H(36)]

    where grad is the exact gradient of the summed error, including the
    dependence of the weight on rotation, and H = J^T W J is the
    Gauss-Newton approximation of half the Hessian.
    """
    n = src_means.shape[0]
    nchunks = max(1, (n + CHUNK - 1) // CHUNK)
    width = 45
    parts = np.zeros((nchunks, width))
    M = np.empty((3, 3))
    W = np.empty((3, 3))
    for c in range(nchunks):
        acc = parts[c]
        for k in range(c * CHUNK, min(n, (c + 1) * CHUNK)):
            j = corr[k]
            if j < 0:
                continue
            mx = src_means[k, 0]
            my = src_means[k, 1]
            mz = src_means[k, 2]
            qx = R[0, 0] * mx + R[0, 1] * my + R[0, 2] * mz + t[0]
            qy = R[1, 0] * mx + R[1, 1] * my + R[1, 2] * mz + t[1]
            qz = R[2, 0] * mx + R[2, 1] * my + R[2, 2] * mz + t[2]
            ex = tgt_means[j, 0] - qx
            ey = tgt_means[j, 1] - qy
            ez = tgt_means[j, 2] - qz
            # M = C' + R C R^T
            C = src_covs[k]
            for a in range(3):
                for b in range(3):
                    s = 0.0
                    for p in range(3):
                        rc = R[a, 0] * C[0, p] + R[a, 1] * C[1, p] + R[a, 2] * C[2, p]
                        s += rc * R[b, p]
                    M[a, b] = tgt_covs[j, a, b] + s
            det = (
                M[0, 0] * (M[1, 1] * M[2, 2] - M[1, 2] * M[2, 1])
                - M[0, 1] * (M[1, 0] * M[2, 2] - M[1, 2] * M[2, 0])
                + M[0, 2] * (M[1, 0] * M[2, 1] - M[1, 1] * M[2, 0])
            )
            if not (det > 1e-300) or not np.isfinite(det):
                acc[2] += 1.0
                continue
            inv = 1.0 / det
            W[0, 0] = (M[1, 1] * M[2, 2] - M[1, 2] * M[2, 1]) * inv
            W[0, 1] = (M[0, 2] * M[2, 1] - M[0, 1] * M[2, 2]) * inv
            W[0, 2] = (M[0, 1] * M[1, 2] - M[0, 2] * M[1, 1]) * inv
            W[1, 0] = (M[1, 2] * M[2, 0] - M[1, 0] * M[2, 2]) * inv
            W[1, 1] = (M[0, 0] * M[2, 2] - M[0, 2] * M[2, 0]) * inv
            W[1, 2] = (M[0, 2] * M[1, 0] - M[0, 0] * M[1, 2]) * inv
            W[2, 0] = (M[1, 0] * M[2, 1] - M[1, 1] * M[2, 0]) * inv
            W[2, 1] = (M[0, 1] * M[2, 0] - M[0, 0] * M[2, 1]) * inv
            W[2, 2] = (M[0, 0] * M[1, 1] - M[0, 1] * M[1, 0]) * inv
            # symmetrize against round-off
            for a in range(3):
                for b in range(a + 1, 3):
                    v = 0.5 * (W[a, b] + W[b, a])
                    W[a, b] = v
                    W[b, a] = v
            gx = W[0, 0] * ex + W[0, 1] * ey + W[0, 2] * ez
            gy = W[1, 0] * ex + W[1, 1] * ey + W[1, 2] * ez
            gz = W[2, 0] * ex + W[2, 1] * ey + W[2, 2] * ez
            acc[0] += ex * gx + ey * gy + ez * gz
            acc[1] += 1.0
            # residual Jacobian for a left perturbation (rot, trans) is
            # [[q]x, -I]; gradient of e^T W e through the residual is
            # 2 [g x q ; -g]
            rx = gy * qz - gz * qy
            ry = gz * qx - gx * qz
            rz = gx * qy - gy * qx
            # weight dependence: d/dw_left = -2 R (C u x u) with u = R^T g
            ux = R[0, 0] * gx + R[1, 0] * gy + R[2, 0] * gz
            uy = R[0, 1] * gx + R[1, 1] * gy + R[2, 1] * gz
            uz = R[0, 2] * gx + R[1, 2] * gy + R[2, 2] * gz
            cux = C[0, 0] * ux + C[0, 1] * uy + C[0, 2] * uz
            cuy = C[1, 0] * ux + C[1, 1] * uy + C[1, 2] * uz
            cuz = C[2, 0] * ux + C[2, 1] * uy + C[2, 2] * uz
            wx = cuy * uz - cuz * uy
            wy = cuz * ux - cux * uz
            wz = cux * uy - cuy * ux
            acc[3] += 2.0 * rx - 2.0 * (R[0, 0] * wx + R[0, 1] * wy + R[0, 2] * wz)
            acc[4] += 2.0 * ry - 2.0 * (R[1, 0] * wx + R[1, 1] * wy + R[1, 2] * wz)
            acc[5] += 2.0 * rz - 2.0 * (R[2, 0] * wx + R[2, 1] * wy + R[2, 2] * wz)
            acc[6] -= 2.0 * gx
            acc[7] -= 2.0 * gy
            acc[8] -= 2.0 * gz
            if with_hessian:
                # J = [[q]x, -I]
                # J^T W J = [[-[q]x W [q]x, [q]x W], [-W [q]x, W]]
                # [q]x W
                QW00 = -qz * W[1, 0] + qy * W[2, 0]
                QW01 = -qz * W[1, 1] + qy * W[2, 1]
                QW02 = -qz * W[1, 2] + qy * W[2, 2]
                QW10 = qz * W[0, 0] - qx * W[2, 0]
                QW11 = qz * W[0, 1] - qx * W[2, 1]
                QW12 = qz * W[0, 2] - qx * W[2, 2]
                QW20 = -qy * W[0, 0] + qx * W[1, 0]
                QW21 = -qy * W[0, 1] + qx * W[1, 1]
                QW22 = -qy * W[0, 2] + qx * W[1, 2]
                # -([q]x W) [q]x  (right-multiplying by [q]x)
                T00 = -(QW01 * qz - QW02 * qy)
                T01 = -(-QW00 * qz + QW02 * qx)
                T02 = -(QW00 * qy - QW01 * qx)
                T10 = -(QW11 * qz - QW12 * qy)
                T11 = -(-QW10 * qz + QW12 * qx)
                T12 = -(QW10 * qy - QW11 * qx)
                T20 = -(QW21 * qz - QW22 * qy)
                T21 = -(-QW20 * qz + QW22 * qx)
                T22 = -(QW20 * qy - QW21 * qx)
                h = 9
                acc[h + 0] += T00
                acc[h + 1] += T01
                acc[h + 2] += T02
                acc[h + 6] += T10
                acc[h + 7] += T11
                acc[h + 8] += T12
                acc[h + 12] += T20
                acc[h + 13] += T21
                acc[h + 14] += T22
                # top-right block [q]x W and its transpose
                acc[h + 3] += QW00
                acc[h + 4] += QW01
                acc[h + 5] += QW02
                acc[h + 9] += QW10
                acc[h + 10] += QW11
                acc[h + 11] += QW12
                acc[h + 15] += QW20
                acc[h + 16] += QW21
                acc[h + 17] += QW22
                acc[h + 18] += QW00
                acc[h + 24] += QW01
                acc[h + 30] += QW02
                acc[h + 19] += QW10
                acc[h + 25] += QW11
                acc[h + 31] += QW12
                acc[h + 20] += QW20
                acc[h + 26] += QW21
                acc[h + 32] += QW22
                for a in range(3):
                    for b in range(3):
                        acc[h + 6 * (3 + a) + 3 + b] += W[a, b]
    return _tree_sum(parts, nchunks)


@njit(cache=True, nogil=True)
def point_errors(src_means, src_covs, tgt_means, tgt_covs, corr, R, t):
    """Per-point GICP errors, NaN where there is no correspondence."""
    n = src_means.shape[0]
    out = np.full(n, np.nan)
    M = np.empty((3, 3))
    for k in range(n):
        j = corr[k]
        if j < 0:
            continue
        e = tgt_means[j] - (R @ src_means[k] + t)
        M[:, :] = tgt_covs[j] + R @ src_covs[k] @ R.T
        if np.linalg.det(M) <= 1e-300:
            continue
        out[k] = e @ np.linalg.solve(M, e)
    return out
