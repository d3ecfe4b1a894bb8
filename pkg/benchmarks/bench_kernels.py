"""Timing comparison of the compiled kernels against the NumPy fallback.

Run from the repo root:

    python3 benchmarks/bench_kernels.py

Renders one synthetic frame pair, then times the three hot kernels
(capsule z-buffer render, patch dissimilarity, integer-shift patch
refinement) through both backends and prints a speedup table.
"""

import time

import numpy as np

from poselift import kernels
from poselift.geometry import CameraIntrinsics, project
from poselift.kernels import fallback
from poselift.synth import default_hand_model, desk_script, render_sequence
from poselift.synth.model import capsules_for_pose
from poselift.synth.render import _capsule_rects

if kernels.BACKEND != "native":
    raise SystemExit("compiled extension not importable; nothing to compare "
                     "(build it with: pip install -e . --no-build-isolation)")

native = kernels._native  # noqa: SLF001 - benchmark reaches into the pair


def timeit(fn, *args, repeat=5, number=10):
    best = np.inf
    out = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        for _ in range(number):
            out = fn(*args)
        best = min(best, (time.perf_counter() - t0) / number)
    return best, out


def main():
    cam = CameraIntrinsics(241.42, 241.42, 160.0, 120.0, 320, 240)
    model = default_hand_model()
    frames, gt = render_sequence(model, desk_script(4), cam, seed=0)
    f1, f2 = frames[0], frames[1]
    uv1 = project(gt[0].joints, cam)
    uv2 = project(gt[1].joints, cam)

    rows = []
    seg_a, seg_b, radii = capsules_for_pose(model, gt[0].joints)
    rects = _capsule_rects(seg_a, seg_b, radii, cam)
    args = (cam.width, cam.height, cam.fx, cam.fy, cam.cx, cam.cy,
            seg_a, seg_b, radii, rects)
    tn, zn = timeit(native.capsule_zbuffer, *args, number=3)
    tf, zf = timeit(fallback.capsule_zbuffer, *args, number=3)
    assert np.allclose(zn, zf, atol=1e-9)
    rows.append(("capsule_zbuffer (320x240 hand render)", tn, tf))

    j = 8
    args = (f2.pixels, f2.valid_u8, float(uv2[j, 0]), float(uv2[j, 1]),
            f1.pixels, f1.valid_u8, float(uv1[j, 0]), float(uv1[j, 1]),
            12, 0.25, 25)
    tn, dn = timeit(native.patch_ds, *args, number=200)
    tf, df = timeit(fallback.patch_ds, *args, number=50)
    assert abs(dn[0] - df[0]) < 1e-9
    rows.append(("patch_ds (25px patch)", tn, tf))

    args = (f2.pixels, f2.valid_u8, int(uv2[j, 0]), int(uv2[j, 1]),
            f1.pixels, f1.valid_u8, int(uv1[j, 0]), int(uv1[j, 1]),
            12, 6, 0.25, 25)
    tn, rn = timeit(native.refine_shift, *args, number=20)
    tf, rf = timeit(fallback.refine_shift, *args, number=5)
    assert rn[:2] == rf[:2] and abs(rn[2] - rf[2]) < 1e-9
    rows.append(("refine_shift (+-6px search)", tn, tf))

    width = max(len(r[0]) for r in rows)
    print(f"{'kernel':<{width}}  {'native':>10}  {'fallback':>10}  {'speedup':>8}")
    for name, tn, tf in rows:
        print(f"{name:<{width}}  {tn * 1e6:>8.1f}us  {tf * 1e6:>8.1f}us  "
              f"{tf / tn:>7.1f}x")


if __name__ == "__main__":
    main()
