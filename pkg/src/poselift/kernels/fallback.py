"""Pure NumPy implementations of the hot kernels.

Same contracts as the compiled extension in ``_native.pyx``; used when the
extension is unavailable (or forced via POSELIFT_BACKEND=fallback).
"""

from __future__ import annotations

import numpy as np

_VAR_EPS = 1e-12


def capsule_zbuffer(width, height, fx, fy, cx, cy, seg_a, seg_b, radii, rects):
    """Depth buffer of a union of capsules seen from a pinhole camera.

    seg_a, seg_b: (B, 3) capsule segment endpoints in camera space (mm).
    radii: (B,) capsule radii. rects: (B, 4) per-capsule pixel bounds
    (x0, x1, y0, y1), end-exclusive, precomputed by the caller; empty
    rects are skipped. Returns an (height, width) float64 depth map with
    0 where no capsule is hit. Rays go through pixel centers; depth is
    the camera-space z of the first intersection.
    """
    seg_a = np.asarray(seg_a, dtype=np.float64)
    seg_b = np.asarray(seg_b, dtype=np.float64)
    radii = np.asarray(radii, dtype=np.float64)
    rects = np.asarray(rects, dtype=np.int64)
    zbuf = np.full((height, width), np.inf)

    xs = (np.arange(width) - cx) / fx
    ys = (np.arange(height) - cy) / fy

    for b in range(seg_a.shape[0]):
        x0, x1, y0, y1 = rects[b]
        if x1 <= x0 or y1 <= y0:
            continue
        dx = xs[x0:x1][None, :]
        dy = ys[y0:y1][:, None]
        dd = dx * dx + dy * dy + 1.0

        a = seg_a[b]
        ba = seg_b[b] - a
        r = radii[b]
        baba = float(ba @ ba)
        oa = -a
        baoa = float(ba @ oa)
        oaoa = float(oa @ oa)
        bard = ba[0] * dx + ba[1] * dy + ba[2]
        rdoa = oa[0] * dx + oa[1] * dy + oa[2]

        t_hit = np.full((y1 - y0, x1 - x0), np.inf)

        if baba > 0:
            qa = dd * baba - bard * bard
            qb = baba * rdoa - baoa * bard
            qc = baba * oaoa - baoa * baoa - r * r * baba
            disc = qb * qb - qa * qc
            ok = (disc >= 0) & (qa > 1e-12)
            with np.errstate(invalid="ignore", divide="ignore"):
                t = (-qb - np.sqrt(np.maximum(disc, 0.0))) / np.where(ok, qa, 1.0)
                y_axis = baoa + t * bard
            body = ok & (t > 0) & (y_axis > 0) & (y_axis < baba)
            t_hit = np.where(body, t, t_hit)

        for center in (seg_a[b], seg_b[b]):
            oc = -center
            cb = oc[0] * dx + oc[1] * dy + oc[2]
            cc = float(oc @ oc) - r * r
            disc = cb * cb - dd * cc
            ok = disc >= 0
            with np.errstate(invalid="ignore"):
                t = (-cb - np.sqrt(np.maximum(disc, 0.0))) / dd
            cap = ok & (t > 0)
            t_hit = np.where(cap & (t < t_hit), t, t_hit)

        region = zbuf[y0:y1, x0:x1]
        np.minimum(region, t_hit, out=region)

    return np.where(np.isfinite(zbuf), zbuf, 0.0)


_WEIGHT_EPS = 1e-6


def _bilinear_patch(img, valid, u, v, half):
    """Weighted bilinear samples of a (2*half+1)^2 patch centered at (u, v).

    Returns (values, weights, gx, gy). Each sample's weight is the valid
    bilinear mass of its footprint: 1 deep inside the valid region, 0 on
    fully invalid or out-of-image ground, and a continuous ramp where the
    footprint straddles a silhouette. A hard accept/reject of straddling
    samples would make the patch statistics jump as the window slides,
    and those jumps stall any solver that trusts a local model. Values
    are the weighted average of the valid neighbors; gx/gy are the exact
    derivatives of that ratio w.r.t. the patch center (validity held
    fixed, so jumps at footprint changes are invisible to them).
    """
    h, w = img.shape
    off = np.arange(-half, half + 1, dtype=np.float64)
    px = u + off[None, :]
    py = v + off[:, None]

    x0 = np.floor(px).astype(np.int64)
    y0 = np.floor(py).astype(np.int64)
    fx = px - x0
    fy = py - y0

    W = 0.0
    N = 0.0
    Wx = 0.0
    Nx = 0.0
    Wy = 0.0
    Ny = 0.0
    for dx in (0, 1):
        wx = fx if dx else 1.0 - fx
        dwx = 1.0 if dx else -1.0
        xc = np.clip(x0 + dx, 0, w - 1)
        xin = (x0 + dx >= 0) & (x0 + dx <= w - 1)
        for dy in (0, 1):
            wy = fy if dy else 1.0 - fy
            dwy = 1.0 if dy else -1.0
            yc = np.clip(y0 + dy, 0, h - 1)
            yin = (y0 + dy >= 0) & (y0 + dy <= h - 1)
            vv = np.where(xin & yin, valid[yc, xc], False).astype(np.float64)
            z = img[yc, xc] * vv
            wk = wx * wy * vv
            W = W + wk
            N = N + wk * z
            Wx = Wx + dwx * wy * vv
            Nx = Nx + dwx * wy * z
            Wy = Wy + wx * dwy * vv
            Ny = Ny + wx * dwy * z

    live = W > _WEIGHT_EPS
    Ws = np.where(live, W, 1.0)
    vals = np.where(live, N / Ws, 0.0)
    gx = np.where(live, (Nx - vals * Wx) / Ws, 0.0)
    gy = np.where(live, (Ny - vals * Wy) / Ws, 0.0)
    return vals, np.where(live, W, 0.0), gx, gy


def patch_ds(img1, valid1, u1, v1, img2, valid2, u2, v2, half,
             min_frac, min_floor):
    """Patch dissimilarity 1 - NCC with gradient w.r.t. (u1, v1).

    Compares the bilinear patch of img1 centered at (u1, v1) against the
    patch of img2 at (u2, v2); per-sample weights are the product of the
    two sides' valid masses, so the statistics vary continuously as
    either window slides. The overlap requirement is relative: at least
    min_frac of the smaller side's own valid mass, and never below
    min_floor samples, else the neutral value (1, 0, 0). Relative,
    because a fingertip patch is mostly background on both sides and a
    fixed fraction of the patch area would blank out exactly the joints
    with the strongest depth edges. A flat patch on one side only is
    also neutral; two flat patches are a perfect match (0, 0, 0).
    """
    p, w1, gx, gy = _bilinear_patch(img1, valid1, float(u1), float(v1), half)
    q, w2, _, _ = _bilinear_patch(img2, valid2, float(u2), float(v2), half)
    ww = w1 * w2
    nw = float(ww.sum())
    need = max(float(min_floor), min_frac * min(float(w1.sum()), float(w2.sum())))
    if nw < need:
        return 1.0, 0.0, 0.0

    pm = float((ww * p).sum()) / nw
    qm = float((ww * q).sum()) / nw
    a = p - pm
    b = q - qm
    spp = float((ww * a * a).sum())
    sqq = float((ww * b * b).sum())
    spq = float((ww * a * b).sum())

    if spp <= _VAR_EPS and sqq <= _VAR_EPS:
        return 0.0, 0.0, 0.0
    if spp <= _VAR_EPS or sqq <= _VAR_EPS:
        return 1.0, 0.0, 0.0

    denom = np.sqrt(spp * sqq)
    ncc = min(max(spq / denom, -1.0), 1.0)

    # d(ncc)/dp_j = ww_j * (b_j / denom - spq * a_j / (spp * denom))
    dncc_dp = ww * ((b / denom) - (spq / (spp * denom)) * a)
    du = -(dncc_dp * gx).sum()
    dv = -(dncc_dp * gy).sum()
    return 1.0 - ncc, float(du), float(dv)


def refine_shift(img_fixed, valid_fixed, cx_fixed, cy_fixed,
                 img_moving, valid_moving, cx_moving, cy_moving,
                 half, max_shift, min_frac, min_floor):
    """Integer-shift template match of a moving patch inside a fixed image.

    The template is the (2*half+1)^2 patch of img_moving at the integer
    center (cx_moving, cy_moving); it is matched against patches of
    img_fixed at (cx_fixed + dx, cy_fixed + dy) for every integer shift
    with |dx|, |dy| <= max_shift. Returns (dx, dy, ncc) of the best
    masked NCC; ties resolve to the smallest displacement so featureless
    regions (every shift scores 1.0) stay put instead of drifting to the
    search corner. Overlap rule matches patch_ds (min_frac of the
    smaller side's valid count, floored at min_floor); ncc is -2.0 when
    no shift qualifies.
    """
    h, w = img_fixed.shape
    n = 2 * half + 1

    def int_patch(img, valid, cx, cy):
        vals = np.zeros((n, n))
        mask = np.zeros((n, n), dtype=bool)
        x0, y0 = cx - half, cy - half
        sx0, sy0 = max(0, -x0), max(0, -y0)
        ix0, iy0 = max(0, x0), max(0, y0)
        ix1, iy1 = min(img.shape[1], x0 + n), min(img.shape[0], y0 + n)
        if ix1 > ix0 and iy1 > iy0:
            vals[sy0:sy0 + iy1 - iy0, sx0:sx0 + ix1 - ix0] = img[iy0:iy1, ix0:ix1]
            mask[sy0:sy0 + iy1 - iy0, sx0:sx0 + ix1 - ix0] = valid[iy0:iy1, ix0:ix1]
        return vals, mask

    tmpl, tmask = int_patch(img_moving, valid_moving, int(cx_moving), int(cy_moving))

    best = (-2.0, 0, 0)
    best_r2 = 2 * max_shift * max_shift + 1
    for dy in range(-max_shift, max_shift + 1):
        for dx in range(-max_shift, max_shift + 1):
            vals, mask = int_patch(img_fixed, valid_fixed,
                                   int(cx_fixed) + dx, int(cy_fixed) + dy)
            m = mask & tmask
            cnt = int(m.sum())
            need = max(int(min_floor),
                       int(np.ceil(min_frac * min(tmask.sum(), mask.sum()))))
            if cnt < need:
                continue
            wgt = m.astype(np.float64)
            pm = (wgt * vals).sum() / cnt
            qm = (wgt * tmpl).sum() / cnt
            a = wgt * (vals - pm)
            b = wgt * (tmpl - qm)
            spp = (a * a).sum()
            sqq = (b * b).sum()
            if spp <= _VAR_EPS and sqq <= _VAR_EPS:
                ncc = 1.0
            elif spp <= _VAR_EPS or sqq <= _VAR_EPS:
                ncc = 0.0
            else:
                ncc = float((a * b).sum() / np.sqrt(spp * sqq))
            r2 = dx * dx + dy * dy
            if ncc > best[0] or (ncc == best[0] and r2 < best_r2):
                best = (ncc, dx, dy)
                best_r2 = r2
    return best[1], best[2], best[0]
