"""Hot kernels with a compiled core and a NumPy fallback.

The compiled extension is preferred when it imported cleanly; set
POSELIFT_BACKEND=fallback (or =native) to force one side. Both expose
the same three functions with identical numeric contracts:

    capsule_zbuffer(width, height, fx, fy, cx, cy, seg_a, seg_b, radii, rects)
    patch_ds(img1, valid1, u1, v1, img2, valid2, u2, v2, half,
             min_frac, min_floor)
    refine_shift(img_fixed, valid_fixed, cx_fixed, cy_fixed,
                 img_moving, valid_moving, cx_moving, cy_moving,
                 half, max_shift, min_frac, min_floor)
"""

import importlib
import os

from . import fallback

_forced = os.environ.get("POSELIFT_BACKEND", "").strip().lower()

_native = None
if _forced != "fallback":
    try:
        _native = importlib.import_module("._native", __name__)
    except ImportError:
        if _forced == "native":
            raise ImportError(
                "POSELIFT_BACKEND=native but the compiled extension is not "
                "available; build it or drop the override")

if _native is not None:
    BACKEND = "native"
    capsule_zbuffer = _native.capsule_zbuffer
    patch_ds = _native.patch_ds
    refine_shift = _native.refine_shift
else:
    BACKEND = "fallback"
    capsule_zbuffer = fallback.capsule_zbuffer
    patch_ds = fallback.patch_ds
    refine_shift = fallback.refine_shift

__all__ = ["BACKEND", "capsule_zbuffer", "patch_ds", "refine_shift", "fallback"]
