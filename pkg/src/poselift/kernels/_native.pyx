# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled hot kernels: capsule z-buffer, patch NCC dissimilarity with
gradient, and integer-shift patch refinement. Contracts match
poselift.kernels.fallback exactly."""

import numpy as np

cimport numpy as cnp
from libc.math cimport sqrt, floor, ceil, INFINITY

cnp.import_array()

DEF VAR_EPS = 1e-12


def capsule_zbuffer(int width, int height, double fx, double fy,
                    double cx, double cy,
                    double[:, ::1] seg_a, double[:, ::1] seg_b,
                    double[::1] radii, long long[:, ::1] rects):
    cdef cnp.ndarray[cnp.float64_t, ndim=2] out = np.zeros((height, width))
    cdef double[:, ::1] zbuf = out
    cdef int b, px, py, x0, x1, y0, y1
    cdef int nseg = seg_a.shape[0]
    cdef double ax, ay, az, bax, bay, baz, r, baba, baoa, oaoa
    cdef double dx, dy, dd, bard, rdoa, qa, qb, qc, disc, t, yax
    cdef double t_hit, ocx, ocy, ocz, cb, cc, prev
    cdef int side

    for b in range(nseg):
        x0 = <int> rects[b, 0]
        x1 = <int> rects[b, 1]
        y0 = <int> rects[b, 2]
        y1 = <int> rects[b, 3]
        if x1 <= x0 or y1 <= y0:
            continue
        ax = seg_a[b, 0]; ay = seg_a[b, 1]; az = seg_a[b, 2]
        bax = seg_b[b, 0] - ax; bay = seg_b[b, 1] - ay; baz = seg_b[b, 2] - az
        r = radii[b]
        baba = bax * bax + bay * bay + baz * baz
        baoa = -(bax * ax + bay * ay + baz * az)
        oaoa = ax * ax + ay * ay + az * az

        for py in range(y0, y1):
            dy = (py - cy) / fy
            for px in range(x0, x1):
                dx = (px - cx) / fx
                dd = dx * dx + dy * dy + 1.0
                t_hit = INFINITY

                if baba > 0:
                    bard = bax * dx + bay * dy + baz
                    rdoa = -(ax * dx + ay * dy + az)
                    qa = dd * baba - bard * bard
                    qb = baba * rdoa - baoa * bard
                    qc = baba * oaoa - baoa * baoa - r * r * baba
                    disc = qb * qb - qa * qc
                    if disc >= 0 and qa > 1e-12:
                        t = (-qb - sqrt(disc)) / qa
                        yax = baoa + t * bard
                        if t > 0 and yax > 0 and yax < baba:
                            t_hit = t

                for side in range(2):
                    if side == 0:
                        ocx = -ax; ocy = -ay; ocz = -az
                    else:
                        ocx = -(ax + bax); ocy = -(ay + bay); ocz = -(az + baz)
                    cb = ocx * dx + ocy * dy + ocz
                    cc = ocx * ocx + ocy * ocy + ocz * ocz - r * r
                    disc = cb * cb - dd * cc
                    if disc >= 0:
                        t = (-cb - sqrt(disc)) / dd
                        if t > 0 and t < t_hit:
                            t_hit = t

                if t_hit < INFINITY:
                    prev = zbuf[py, px]
                    if prev == 0.0 or t_hit < prev:
                        zbuf[py, px] = t_hit
    return out


DEF WEIGHT_EPS = 1e-6


cdef inline double _wsample(double[:, ::1] img, cnp.uint8_t[:, ::1] valid,
                            double sx, double sy, int w, int h,
                            double* val, double* gx, double* gy) nogil:
    """Weighted bilinear sample: returns the valid mass of the footprint.

    The value is the weighted average over the valid in-image neighbors
    and gx/gy its exact ratio derivatives (validity held fixed); all are
    0 when the mass is negligible. Matches fallback._bilinear_patch."""
    cdef int x0 = <int> floor(sx)
    cdef int y0 = <int> floor(sy)
    cdef double fx = sx - x0
    cdef double fy = sy - y0
    cdef double W = 0, N = 0, Wx = 0, Nx = 0, Wy = 0, Ny = 0
    cdef double wx, wy, dwx, dwy, z, wk
    cdef int dx, dy, xi, yi
    for dx in range(2):
        wx = fx if dx else 1.0 - fx
        dwx = 1.0 if dx else -1.0
        xi = x0 + dx
        if xi < 0 or xi > w - 1:
            continue
        for dy in range(2):
            wy = fy if dy else 1.0 - fy
            dwy = 1.0 if dy else -1.0
            yi = y0 + dy
            if yi < 0 or yi > h - 1:
                continue
            if valid[yi, xi] == 0:
                continue
            z = img[yi, xi]
            W += wx * wy
            N += wx * wy * z
            Wx += dwx * wy
            Nx += dwx * wy * z
            Wy += wx * dwy
            Ny += wx * dwy * z
    if W <= WEIGHT_EPS:
        val[0] = 0; gx[0] = 0; gy[0] = 0
        return 0.0
    val[0] = N / W
    gx[0] = (Nx - val[0] * Wx) / W
    gy[0] = (Ny - val[0] * Wy) / W
    return W


def patch_ds(double[:, ::1] img1, cnp.uint8_t[:, ::1] valid1, double u1, double v1,
             double[:, ::1] img2, cnp.uint8_t[:, ::1] valid2, double u2, double v2,
             int half, double min_frac, int min_floor):
    cdef int n = 2 * half + 1
    cdef int h1 = img1.shape[0], w1 = img1.shape[1]
    cdef int h2 = img2.shape[0], w2 = img2.shape[1]
    cdef int i, j
    cdef double wa, wb, val, gx, gy, val2, gx2, gy2
    cdef cnp.ndarray[cnp.float64_t, ndim=2] pbuf = np.zeros((n, n))
    cdef cnp.ndarray[cnp.float64_t, ndim=2] qbuf = np.zeros((n, n))
    cdef cnp.ndarray[cnp.float64_t, ndim=2] gxbuf = np.zeros((n, n))
    cdef cnp.ndarray[cnp.float64_t, ndim=2] gybuf = np.zeros((n, n))
    cdef cnp.ndarray[cnp.float64_t, ndim=2] wbuf = np.zeros((n, n))
    cdef double[:, ::1] p = pbuf, q = qbuf, gxs = gxbuf, gys = gybuf, ww = wbuf
    cdef double n1 = 0, n2 = 0, nw = 0, psum = 0, qsum = 0

    for i in range(n):
        for j in range(n):
            wa = _wsample(img1, valid1, u1 + j - half, v1 + i - half, w1, h1,
                          &val, &gx, &gy)
            wb = _wsample(img2, valid2, u2 + j - half, v2 + i - half, w2, h2,
                          &val2, &gx2, &gy2)
            n1 += wa
            n2 += wb
            if wa == 0.0 or wb == 0.0:
                continue
            p[i, j] = val
            gxs[i, j] = gx
            gys[i, j] = gy
            q[i, j] = val2
            ww[i, j] = wa * wb
            nw += wa * wb
            psum += wa * wb * val
            qsum += wa * wb * val2

    cdef double small = n1 if n1 < n2 else n2
    cdef double need = min_frac * small
    if need < <double> min_floor:
        need = <double> min_floor
    if nw < need:
        return 1.0, 0.0, 0.0

    cdef double pm = psum / nw, qm = qsum / nw
    cdef double spp = 0, sqq = 0, spq = 0, a, bb
    for i in range(n):
        for j in range(n):
            if ww[i, j] > 0:
                a = p[i, j] - pm
                bb = q[i, j] - qm
                spp += ww[i, j] * a * a
                sqq += ww[i, j] * bb * bb
                spq += ww[i, j] * a * bb

    if spp <= VAR_EPS and sqq <= VAR_EPS:
        return 0.0, 0.0, 0.0
    if spp <= VAR_EPS or sqq <= VAR_EPS:
        return 1.0, 0.0, 0.0

    cdef double denom = sqrt(spp * sqq)
    cdef double ncc = spq / denom
    if ncc > 1.0:
        ncc = 1.0
    elif ncc < -1.0:
        ncc = -1.0

    cdef double du = 0, dv = 0, dncc
    for i in range(n):
        for j in range(n):
            if ww[i, j] > 0:
                a = p[i, j] - pm
                bb = q[i, j] - qm
                dncc = ww[i, j] * (bb / denom - (spq / (spp * denom)) * a)
                du -= dncc * gxs[i, j]
                dv -= dncc * gys[i, j]
    return 1.0 - ncc, du, dv


def refine_shift(double[:, ::1] img_fixed, cnp.uint8_t[:, ::1] valid_fixed,
                 int cx_fixed, int cy_fixed,
                 double[:, ::1] img_moving, cnp.uint8_t[:, ::1] valid_moving,
                 int cx_moving, int cy_moving,
                 int half, int max_shift, double min_frac, int min_floor):
    cdef int hf = img_fixed.shape[0], wf = img_fixed.shape[1]
    cdef int hm = img_moving.shape[0], wm = img_moving.shape[1]
    cdef int dx, dy, i, j, xf, yf, xm, ym, cnt, cnt_f, cnt_m
    cdef int m_ok, f_ok, ym_ok, yf_ok, need, small, r2
    cdef double psum, qsum, pm, qm, spp, sqq, spq, a, bb, ncc
    cdef double best = -2.0
    cdef int best_dx = 0, best_dy = 0
    cdef int best_r2 = 2 * max_shift * max_shift + 1

    for dy in range(-max_shift, max_shift + 1):
        for dx in range(-max_shift, max_shift + 1):
            cnt = 0; cnt_f = 0; cnt_m = 0
            psum = 0; qsum = 0
            for i in range(-half, half + 1):
                ym = cy_moving + i
                yf = cy_fixed + dy + i
                ym_ok = 0 <= ym < hm
                yf_ok = 0 <= yf < hf
                if not (ym_ok or yf_ok):
                    continue
                for j in range(-half, half + 1):
                    xm = cx_moving + j
                    xf = cx_fixed + dx + j
                    m_ok = ym_ok and 0 <= xm < wm and valid_moving[ym, xm] != 0
                    f_ok = yf_ok and 0 <= xf < wf and valid_fixed[yf, xf] != 0
                    cnt_m += m_ok
                    cnt_f += f_ok
                    if m_ok and f_ok:
                        cnt += 1
                        psum += img_fixed[yf, xf]
                        qsum += img_moving[ym, xm]
            small = cnt_m if cnt_m < cnt_f else cnt_f
            need = <int> ceil(min_frac * small)
            if need < min_floor:
                need = min_floor
            if cnt < need:
                continue
            pm = psum / cnt
            qm = qsum / cnt
            spp = 0; sqq = 0; spq = 0
            for i in range(-half, half + 1):
                ym = cy_moving + i
                yf = cy_fixed + dy + i
                if ym < 0 or ym >= hm or yf < 0 or yf >= hf:
                    continue
                for j in range(-half, half + 1):
                    xm = cx_moving + j
                    xf = cx_fixed + dx + j
                    if xm < 0 or xm >= wm or xf < 0 or xf >= wf:
                        continue
                    if valid_moving[ym, xm] and valid_fixed[yf, xf]:
                        a = img_fixed[yf, xf] - pm
                        bb = img_moving[ym, xm] - qm
                        spp += a * a
                        sqq += bb * bb
                        spq += a * bb
            if spp <= VAR_EPS and sqq <= VAR_EPS:
                ncc = 1.0
            elif spp <= VAR_EPS or sqq <= VAR_EPS:
                ncc = 0.0
            else:
                ncc = spq / sqrt(spp * sqq)
            # ties go to the smallest displacement so featureless regions
            # (every shift scores 1.0) stay put instead of drifting to the
            # search corner
            r2 = dx * dx + dy * dy
            if ncc > best or (ncc == best and r2 < best_r2):
                best = ncc
                best_dx = dx
                best_dy = dy
                best_r2 = r2
    return best_dx, best_dy, best
