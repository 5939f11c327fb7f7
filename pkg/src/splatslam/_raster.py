"""Numba kernels for tile-binned alpha compositing and its reverse pass."""
import math

import numpy as np
from numba import njit, prange

CUTOFF_POWER = -4.5          # 3-sigma ellipse: -0.5 * 3^2
CUTOFF_VALUE = math.exp(CUTOFF_POWER)
# exp(p) minus its tangent line at the cutoff, rescaled to 1 at p = 0: value
# and slope both vanish on the 3-sigma ellipse
INV_RANGE = 1.0 / (1.0 - CUTOFF_VALUE * (1.0 - CUTOFF_POWER))
T_MIN = 1e-4
N_GRAD = 10                  # u, v, conic a/b/c, z, opacity, r, g, b


@njit(cache=True)
def bin_tiles(order, xmin, xmax, ymin, ymax, tiles_x, tiles_y, tile):
    """Per-tile primitive lists, each kept in the (depth-sorted) ``order``."""
    n_tiles = tiles_x * tiles_y
    counts = np.zeros(n_tiles + 1, dtype=np.int64)
    for k in range(order.shape[0]):
        i = order[k]
        for ty in range(ymin[i] // tile, ymax[i] // tile + 1):
            for tx in range(xmin[i] // tile, xmax[i] // tile + 1):
                counts[ty * tiles_x + tx + 1] += 1
    offsets = np.cumsum(counts)
    lists = np.empty(offsets[-1], dtype=np.int64)
    fill = offsets[:-1].copy()
    for k in range(order.shape[0]):
        i = order[k]
        for ty in range(ymin[i] // tile, ymax[i] // tile + 1):
            for tx in range(xmin[i] // tile, xmax[i] // tile + 1):
                t = ty * tiles_x + tx
                lists[fill[t]] = i
                fill[t] += 1
    return offsets, lists


@njit(cache=True)
def _kernel(ca, cb, cc, dx, dy):
    power = -0.5 * (ca * dx * dx + 2.0 * cb * dx * dy + cc * dy * dy)
    if power < CUTOFF_POWER:
        return 0.0, power
    return (math.exp(power) - CUTOFF_VALUE * (1.0 + power - CUTOFF_POWER)) * INV_RANGE, power


@njit(cache=True)
def project_all(means, quats, log_scales, opacity, R_cw, t_cw, fx, fy, cx, cy, width, height, near, dilation):
    """Camera-frame mean, EWA covariance, conic and pixel bbox of every primitive.

    Returns the indices of primitives whose 3-sigma extent along the view axis
    lies beyond the near plane and whose bbox meets the image, plus per-index
    arrays for them.
    """
    n = means.shape[0]
    keep = np.empty(n, dtype=np.int64)
    p_cam = np.empty((n, 3))
    J = np.zeros((n, 2, 3))
    Rq = np.empty((n, 3, 3))
    s = np.empty((n, 3))
    cov_cam = np.empty((n, 3, 3))
    cov2d = np.empty((n, 2, 2))
    conic = np.empty((n, 3))
    uv = np.empty((n, 2))
    bbox = np.empty((n, 4), dtype=np.int64)
    M = np.empty((3, 3))
    JS = np.empty((2, 3))
    cnt = 0
    for i in range(n):
        if not opacity[i] > 0.0:
            continue
        x = R_cw[0, 0] * means[i, 0] + R_cw[0, 1] * means[i, 1] + R_cw[0, 2] * means[i, 2] + t_cw[0]
        y = R_cw[1, 0] * means[i, 0] + R_cw[1, 1] * means[i, 1] + R_cw[1, 2] * means[i, 2] + t_cw[1]
        z = R_cw[2, 0] * means[i, 0] + R_cw[2, 1] * means[i, 1] + R_cw[2, 2] * means[i, 2] + t_cw[2]
        if not z > near:
            continue
        u = fx * x / z + cx
        v = fy * y / z + cy
        qw, qx, qy, qz = quats[i, 0], quats[i, 1], quats[i, 2], quats[i, 3]
        qn = math.sqrt(qw * qw + qx * qx + qy * qy + qz * qz)
        qw, qx, qy, qz = qw / qn, qx / qn, qy / qn, qz / qn
        k = cnt
        R = Rq[k]
        R[0, 0] = 1 - 2 * (qy * qy + qz * qz)
        R[0, 1] = 2 * (qx * qy - qw * qz)
        R[0, 2] = 2 * (qx * qz + qw * qy)
        R[1, 0] = 2 * (qx * qy + qw * qz)
        R[1, 1] = 1 - 2 * (qx * qx + qz * qz)
        R[1, 2] = 2 * (qy * qz - qw * qx)
        R[2, 0] = 2 * (qx * qz - qw * qy)
        R[2, 1] = 2 * (qy * qz + qw * qx)
        R[2, 2] = 1 - 2 * (qx * qx + qy * qy)
        for j in range(3):
            s[k, j] = math.exp(log_scales[i, j])
        for a in range(3):
            for b in range(3):
                M[a, b] = (R_cw[a, 0] * R[0, b] + R_cw[a, 1] * R[1, b] + R_cw[a, 2] * R[2, b]) * s[k, b]
        for a in range(3):
            for b in range(a, 3):
                c = M[a, 0] * M[b, 0] + M[a, 1] * M[b, 1] + M[a, 2] * M[b, 2]
                cov_cam[k, a, b] = c
                cov_cam[k, b, a] = c
        # the affine projection is meaningless for splats reaching the camera plane
        if not z - 3.0 * math.sqrt(cov_cam[k, 2, 2]) > near:
            continue
        Jk = J[k]
        Jk[0, 0] = fx / z
        Jk[0, 1] = 0.0
        Jk[0, 2] = -fx * x / (z * z)
        Jk[1, 0] = 0.0
        Jk[1, 1] = fy / z
        Jk[1, 2] = -fy * y / (z * z)
        for a in range(2):
            for b in range(3):
                JS[a, b] = Jk[a, 0] * cov_cam[k, 0, b] + Jk[a, 1] * cov_cam[k, 1, b] + Jk[a, 2] * cov_cam[k, 2, b]
        ca = JS[0, 0] * Jk[0, 0] + JS[0, 1] * Jk[0, 1] + JS[0, 2] * Jk[0, 2] + dilation
        cb = JS[0, 0] * Jk[1, 0] + JS[0, 1] * Jk[1, 1] + JS[0, 2] * Jk[1, 2]
        cc = JS[1, 0] * Jk[1, 0] + JS[1, 1] * Jk[1, 1] + JS[1, 2] * Jk[1, 2] + dilation
        rx = 3.0 * math.sqrt(ca)
        ry = 3.0 * math.sqrt(cc)
        xmin = max(math.ceil(u - rx), 0.0)
        xmax = min(math.floor(u + rx), width - 1.0)
        ymin = max(math.ceil(v - ry), 0.0)
        ymax = min(math.floor(v + ry), height - 1.0)
        if not (xmin <= xmax and ymin <= ymax):
            continue
        det = ca * cc - cb * cb
        keep[k] = i
        p_cam[k, 0], p_cam[k, 1], p_cam[k, 2] = x, y, z
        cov2d[k, 0, 0], cov2d[k, 0, 1], cov2d[k, 1, 0], cov2d[k, 1, 1] = ca, cb, cb, cc
        conic[k, 0], conic[k, 1], conic[k, 2] = cc / det, -cb / det, ca / det
        uv[k, 0], uv[k, 1] = u, v
        bbox[k, 0], bbox[k, 1], bbox[k, 2], bbox[k, 3] = int(xmin), int(xmax), int(ymin), int(ymax)
        cnt += 1
    return (keep[:cnt], p_cam[:cnt], J[:cnt], Rq[:cnt], s[:cnt], cov_cam[:cnt], cov2d[:cnt], conic[:cnt],
            uv[:cnt], bbox[:cnt])


@njit(cache=True)
def _row_span(ca, cb, cc, u, v, py, xlo, xhi):
    """Columns of row ``py`` that can lie inside the 3-sigma ellipse, clipped to [xlo, xhi]."""
    dy = py - v
    disc = cb * cb * dy * dy - ca * (cc * dy * dy + 2.0 * CUTOFF_POWER)
    if disc < 0.0:
        return 1, 0
    r = math.sqrt(disc)
    c = u - cb * dy / ca
    h = r / ca + 1e-7
    return max(xlo, int(math.ceil(c - h))), min(xhi, int(math.floor(c + h)))


@njit(cache=True, parallel=True)
def forward(offsets, lists, u, v, ca, cb, cc, alpha, colors, z, dflag, bbox, width, height, tiles_x, tile,
            out_color, out_depth, out_alpha, out_T, out_last):
    # primitive-major inside each tile: every pixel still sees its primitives
    # in list order, but only primitives whose bbox covers it are evaluated
    n_tiles = offsets.shape[0] - 1
    for t in prange(n_tiles):
        ty = t // tiles_x
        tx = t - ty * tiles_x
        start = offsets[t]
        end = offsets[t + 1]
        x0 = tx * tile
        y0 = ty * tile
        x1 = min(x0 + tile, width) - 1
        y1 = min(y0 + tile, height) - 1
        T = np.ones((tile, tile))
        done = np.zeros((tile, tile), dtype=np.bool_)
        last = np.full((tile, tile), start, dtype=np.int64)
        n_open = (x1 - x0 + 1) * (y1 - y0 + 1)
        for k in range(start, end):
            if n_open == 0:
                break
            i = lists[k]
            for py in range(max(bbox[i, 2], y0), min(bbox[i, 3], y1) + 1):
                xa, xb = _row_span(ca[i], cb[i], cc[i], u[i], v[i], py, max(bbox[i, 0], x0), min(bbox[i, 1], x1))
                for px in range(xa, xb + 1):
                    ly = py - y0
                    lx = px - x0
                    if done[ly, lx]:
                        continue
                    G, _ = _kernel(ca[i], cb[i], cc[i], px - u[i], py - v[i])
                    a = alpha[i] * G
                    if a <= 0.0:
                        continue
                    Tp = T[ly, lx]
                    if Tp < T_MIN:
                        done[ly, lx] = True
                        n_open -= 1
                        continue
                    w = a * Tp
                    out_color[py, px, 0] += w * colors[i, 0]
                    out_color[py, px, 1] += w * colors[i, 1]
                    out_color[py, px, 2] += w * colors[i, 2]
                    out_depth[py, px] += w * z[i] * dflag[i]
                    out_alpha[py, px] += w
                    T[ly, lx] = Tp * (1.0 - a)
                    last[ly, lx] = k + 1
        for py in range(y0, y1 + 1):
            for px in range(x0, x1 + 1):
                out_T[py, px] = T[py - y0, px - x0]
                out_last[py, px] = last[py - y0, px - x0]


@njit(cache=True, parallel=True)
def backward(offsets, lists, u, v, ca, cb, cc, alpha, colors, z, dflag, bbox, width, height, tiles_x, tile,
             last_idx, final_T, g_color, g_depth, g_alpha, n_prims, n_chunks):
    """Walks each tile list back to front; a pixel's contributors are exactly
    the entries before its ``last_idx`` with nonzero alpha, and transmittance
    in front of each one is recovered as T / (1 - a)."""
    n_tiles = offsets.shape[0] - 1
    grads = np.zeros((n_chunks, n_prims, N_GRAD))
    for c in prange(n_chunks):
        T = np.empty((tile, tile))
        behind = np.empty((tile, tile))
        for t in range(c, n_tiles, n_chunks):
            ty = t // tiles_x
            tx = t - ty * tiles_x
            start = offsets[t]
            x0 = tx * tile
            y0 = ty * tile
            x1 = min(x0 + tile, width) - 1
            y1 = min(y0 + tile, height) - 1
            end = start
            for py in range(y0, y1 + 1):
                for px in range(x0, x1 + 1):
                    T[py - y0, px - x0] = final_T[py, px]
                    behind[py - y0, px - x0] = 0.0
                    end = max(end, last_idx[py, px])
            for k in range(end - 1, start - 1, -1):
                i = lists[k]
                for py in range(max(bbox[i, 2], y0), min(bbox[i, 3], y1) + 1):
                    xa, xb = _row_span(ca[i], cb[i], cc[i], u[i], v[i], py, max(bbox[i, 0], x0),
                                       min(bbox[i, 1], x1))
                    for px in range(xa, xb + 1):
                        if k >= last_idx[py, px]:
                            continue
                        gr = g_color[py, px, 0]
                        gg = g_color[py, px, 1]
                        gb = g_color[py, px, 2]
                        gd = g_depth[py, px]
                        ga = g_alpha[py, px]
                        if gr == 0.0 and gg == 0.0 and gb == 0.0 and gd == 0.0 and ga == 0.0:
                            continue
                        dx = px - u[i]
                        dy = py - v[i]
                        G, power = _kernel(ca[i], cb[i], cc[i], dx, dy)
                        a = alpha[i] * G
                        if a <= 0.0:
                            continue
                        ly = py - y0
                        lx = px - x0
                        Tm = T[ly, lx] / (1.0 - a)
                        T[ly, lx] = Tm
                        w = a * Tm
                        val = gr * colors[i, 0] + gg * colors[i, 1] + gb * colors[i, 2] + gd * z[i] * dflag[i] + ga
                        grads[c, i, 7] += gr * w
                        grads[c, i, 8] += gg * w
                        grads[c, i, 9] += gb * w
                        grads[c, i, 5] += gd * w * dflag[i]
                        bh = behind[ly, lx]
                        dl_da = Tm * (val - bh)
                        behind[ly, lx] = a * val + (1.0 - a) * bh
                        grads[c, i, 6] += dl_da * G
                        dl_dpow = dl_da * alpha[i] * (math.exp(power) - CUTOFF_VALUE) * INV_RANGE
                        grads[c, i, 0] += dl_dpow * (ca[i] * dx + cb[i] * dy)
                        grads[c, i, 1] += dl_dpow * (cb[i] * dx + cc[i] * dy)
                        grads[c, i, 2] += dl_dpow * (-0.5 * dx * dx)
                        grads[c, i, 3] += dl_dpow * (-dx * dy)
                        grads[c, i, 4] += dl_dpow * (-0.5 * dy * dy)
    return grads


@njit(cache=True)
def _mm3(A, B, out):
    for i in range(3):
        for j in range(3):
            out[i, j] = A[i, 0] * B[0, j] + A[i, 1] * B[1, j] + A[i, 2] * B[2, j]


@njit(cache=True)
def chain(g, conic, J, cov_cam, p_cam, R_cw, Rq, s, q, R_cl, t_cl, fx, fy):
    """Screen-space gradients -> mean, log-scale, quaternion and rig-pose gradients."""
    n = g.shape[0]
    g_mean = np.zeros((n, 3))
    g_ls = np.zeros((n, 3))
    g_q = np.zeros((n, 4))
    g_pose = np.zeros(6)
    G2 = np.empty((2, 2))
    GJ = np.empty((2, 3))
    Gc = np.empty((3, 3))
    tmp = np.empty((3, 3))
    Gw = np.empty((3, 3))
    GM = np.empty((3, 3))
    Hl = np.empty((3, 3))
    Sl = np.empty((3, 3))
    R_clT = R_cl.T.copy()
    R_cwT = R_cw.T.copy()
    for k in range(n):
        ca, cb, cc = conic[k, 0], conic[k, 1], conic[k, 2]
        ga, gb, gc = g[k, 2], 0.5 * g[k, 3], g[k, 4]
        # G2 = -K Gk K with K = [[ca, cb], [cb, cc]], Gk = [[ga, gb], [gb, gc]]
        m00 = ga * ca + gb * cb
        m01 = ga * cb + gb * cc
        m10 = gb * ca + gc * cb
        m11 = gb * cb + gc * cc
        G2[0, 0] = -(ca * m00 + cb * m10)
        G2[0, 1] = -(ca * m01 + cb * m11)
        G2[1, 0] = -(cb * m00 + cc * m10)
        G2[1, 1] = -(cb * m01 + cc * m11)
        Jk = J[k]
        for a in range(3):
            for b in range(3):
                acc = 0.0
                for i in range(2):
                    for j in range(2):
                        acc += Jk[i, a] * G2[i, j] * Jk[j, b]
                Gc[a, b] = acc
        for i in range(2):
            for b in range(3):
                acc = 0.0
                for j in range(2):
                    for c in range(3):
                        acc += G2[i, j] * Jk[j, c] * cov_cam[k, c, b]
                GJ[i, b] = 2.0 * acc
        x, y, z = p_cam[k, 0], p_cam[k, 1], p_cam[k, 2]
        gu, gv, gz = g[k, 0], g[k, 1], g[k, 5]
        gp0 = gu * fx / z - GJ[0, 2] * fx / z**2
        gp1 = gv * fy / z - GJ[1, 2] * fy / z**2
        gp2 = (gz - gu * fx * x / z**2 - gv * fy * y / z**2
               - GJ[0, 0] * fx / z**2 + GJ[0, 2] * 2 * fx * x / z**3
               - GJ[1, 1] * fy / z**2 + GJ[1, 2] * 2 * fy * y / z**3)
        for j in range(3):
            g_mean[k, j] = gp0 * R_cw[0, j] + gp1 * R_cw[1, j] + gp2 * R_cw[2, j]
        # world covariance gradient, then scales and rotation
        _mm3(R_cwT, Gc, tmp)
        _mm3(tmp, R_cw, Gw)
        R = Rq[k]
        for a in range(3):
            for b in range(3):
                GM[a, b] = 2.0 * (Gw[a, 0] * R[0, b] + Gw[a, 1] * R[1, b] + Gw[a, 2] * R[2, b]) * s[k, b]
        for j in range(3):
            g_ls[k, j] = (R[0, j] * GM[0, j] + R[1, j] * GM[1, j] + R[2, j] * GM[2, j]) * s[k, j]
        for a in range(3):
            for b in range(3):
                GM[a, b] *= s[k, b]
        w, qx, qy, qz = q[k, 0], q[k, 1], q[k, 2], q[k, 3]
        d = GM
        gw = 2 * (-qz * d[0, 1] + qy * d[0, 2] + qz * d[1, 0] - qx * d[1, 2] - qy * d[2, 0] + qx * d[2, 1])
        gx = 2 * (qy * d[0, 1] + qz * d[0, 2] + qy * d[1, 0] - 2 * qx * d[1, 1] - w * d[1, 2]
                  + qz * d[2, 0] + w * d[2, 1] - 2 * qx * d[2, 2])
        gy = 2 * (-2 * qy * d[0, 0] + qx * d[0, 1] + w * d[0, 2] + qx * d[1, 0] + qz * d[1, 2]
                  - w * d[2, 0] + qz * d[2, 1] - 2 * qy * d[2, 2])
        gz2 = 2 * (-2 * qz * d[0, 0] - w * d[0, 1] + qx * d[0, 2] + w * d[1, 0] - 2 * qz * d[1, 1]
                   + qy * d[1, 2] + qx * d[2, 0] + qy * d[2, 1])
        dot = w * gw + qx * gx + qy * gy + qz * gz2
        g_q[k, 0] = gw - w * dot
        g_q[k, 1] = gx - qx * dot
        g_q[k, 2] = gy - qy * dot
        g_q[k, 3] = gz2 - qz * dot
        # rig pose, right perturbation
        l0, l1, l2 = x - t_cl[0], y - t_cl[1], z - t_cl[2]
        ql0 = l0 * R_cl[0, 0] + l1 * R_cl[1, 0] + l2 * R_cl[2, 0]
        ql1 = l0 * R_cl[0, 1] + l1 * R_cl[1, 1] + l2 * R_cl[2, 1]
        ql2 = l0 * R_cl[0, 2] + l1 * R_cl[1, 2] + l2 * R_cl[2, 2]
        h0 = gp0 * R_cl[0, 0] + gp1 * R_cl[1, 0] + gp2 * R_cl[2, 0]
        h1 = gp0 * R_cl[0, 1] + gp1 * R_cl[1, 1] + gp2 * R_cl[2, 1]
        h2 = gp0 * R_cl[0, 2] + gp1 * R_cl[1, 2] + gp2 * R_cl[2, 2]
        g_pose[0] -= h0
        g_pose[1] -= h1
        g_pose[2] -= h2
        g_pose[3] += h1 * ql2 - h2 * ql1
        g_pose[4] += h2 * ql0 - h0 * ql2
        g_pose[5] += h0 * ql1 - h1 * ql0
        _mm3(R_clT, Gc, tmp)
        _mm3(tmp, R_cl, Hl)
        _mm3(R_clT, cov_cam[k], tmp)
        _mm3(tmp, R_cl, Sl)
        _mm3(Hl, Sl, tmp)
        _mm3(Sl, Hl, Gw)
        g_pose[3] += (tmp[1, 2] - Gw[1, 2]) - (tmp[2, 1] - Gw[2, 1])
        g_pose[4] += (tmp[2, 0] - Gw[2, 0]) - (tmp[0, 2] - Gw[0, 2])
        g_pose[5] += (tmp[0, 1] - Gw[0, 1]) - (tmp[1, 0] - Gw[1, 0])
    return g_mean, g_ls, g_q, g_pose
