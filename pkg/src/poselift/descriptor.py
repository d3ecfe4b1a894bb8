"""Frame appearance embeddings and their cosine distance.

The default descriptor is training-free: crop the valid-depth bounding
box, center depths on the median, clamp to a +-150mm band, rescale to
[-1, 1], resample to 32x32, then project onto the top principal
components fitted once over the whole sequence and L2-normalize. A
block-gradient-histogram descriptor is available behind the same
interface for comparison.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import map_coordinates

from .geometry import DepthFrame, GeometryError


@dataclass(frozen=True)
class DescriptorConfig:
    kind: str = "depth-pca"   # "depth-pca" | "grad-hist"
    components: int = 64
    patch: int = 32           # resample size
    depth_band: float = 150.0  # clamp around the median, mm

    def __post_init__(self):
        if self.kind not in ("depth-pca", "grad-hist"):
            raise GeometryError(f"unknown descriptor kind {self.kind!r}")
        if self.components < 1 or self.patch < 4 or self.depth_band <= 0:
            raise GeometryError("bad descriptor configuration")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "components": self.components,
                "patch": self.patch, "depth_band": self.depth_band}


@dataclass(frozen=True)
class Embedding:
    frame_index: int
    vector: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=np.float64)
        if v.ndim != 1 or not np.all(np.isfinite(v)):
            raise GeometryError("embedding must be a finite vector")
        object.__setattr__(self, "vector", v)


def normalized_crop(frame: DepthFrame, cfg: DescriptorConfig) -> np.ndarray:
    """The (patch, patch) [-1, 1] image the descriptors are built from.

    Missing depth inside the bounding box becomes +1 (background-far).
    """
    valid = frame.valid_mask
    if not np.any(valid):
        raise GeometryError(f"frame {frame.index} has no valid depth")
    ys, xs = np.nonzero(valid)
    y0, y1 = int(ys.min()), int(ys.max())
    x0, x1 = int(xs.min()), int(xs.max())
    crop = frame.pixels[y0:y1 + 1, x0:x1 + 1]
    cvalid = valid[y0:y1 + 1, x0:x1 + 1]
    med = float(np.median(crop[cvalid]))
    norm = np.clip(crop - med, -cfg.depth_band, cfg.depth_band) / cfg.depth_band
    norm = np.where(cvalid, norm, 1.0)

    p = cfg.patch
    h, w = norm.shape
    # sample output pixel centers mapped onto the crop
    gy = (np.arange(p) + 0.5) * h / p - 0.5
    gx = (np.arange(p) + 0.5) * w / p - 0.5
    coords = np.stack(np.meshgrid(gy, gx, indexing="ij"))
    return map_coordinates(norm, coords.reshape(2, -1), order=1,
                           mode="nearest").reshape(p, p)


def _grad_hist(img: np.ndarray) -> np.ndarray:
    """4x4 blocks x 8 orientation bins, magnitude weighted."""
    gy, gx = np.gradient(img)
    mag = np.hypot(gx, gy)
    ang = np.arctan2(gy, gx)  # [-pi, pi]
    bins = np.clip(((ang + np.pi) / (2 * np.pi) * 8).astype(int), 0, 7)
    p = img.shape[0]
    cell = p // 4
    out = np.zeros((4, 4, 8))
    for by in range(4):
        for bx in range(4):
            m = mag[by * cell:(by + 1) * cell, bx * cell:(bx + 1) * cell]
            b = bins[by * cell:(by + 1) * cell, bx * cell:(bx + 1) * cell]
            out[by, bx] = np.bincount(b.ravel(), weights=m.ravel(), minlength=8)
    return out.ravel()


def _unit(v: np.ndarray) -> np.ndarray:
    n = float(np.linalg.norm(v))
    if n < 1e-12:
        # degenerate (e.g. all frames identical); pick a canonical direction
        out = np.zeros_like(v)
        out[0] = 1.0
        return out
    return v / n


class DescriptorExtractor:
    """Fits any sequence-wide state (the PCA basis), then embeds frames."""

    def __init__(self, cfg: DescriptorConfig = None):
        self.cfg = cfg or DescriptorConfig()
        self._mean = None
        self._basis = None  # (F_eff, raw_dim)

    def fit(self, frames) -> "DescriptorExtractor":
        if self.cfg.kind != "depth-pca":
            return self
        raw = np.stack([normalized_crop(f, self.cfg).ravel() for f in frames])
        self._mean = raw.mean(axis=0)
        centered = raw - self._mean
        _, _, vt = np.linalg.svd(centered, full_matrices=False)
        basis = vt[:self.cfg.components]
        # fix component signs so the fit is reproducible across BLAS builds
        for i in range(basis.shape[0]):
            j = int(np.argmax(np.abs(basis[i])))
            if basis[i, j] < 0:
                basis[i] = -basis[i]
        self._basis = basis
        return self

    def embed(self, frame: DepthFrame) -> Embedding:
        img = normalized_crop(frame, self.cfg)
        if self.cfg.kind == "grad-hist":
            return Embedding(frame.index, _unit(_grad_hist(img)))
        if self._basis is None:
            raise GeometryError("extractor must be fitted before embedding")
        proj = self._basis @ (img.ravel() - self._mean)
        vec = np.zeros(self.cfg.components)
        vec[:proj.size] = proj
        return Embedding(frame.index, _unit(vec))


def distance(a: Embedding, b: Embedding) -> float:
    """Cosine distance 1 - <a,b> of unit embeddings, clamped to [0, 2]."""
    if a.vector.shape != b.vector.shape:
        raise GeometryError("embedding dimensions differ")
    return float(min(max(1.0 - float(a.vector @ b.vector), 0.0), 2.0))


def embed_sequence(frames, cfg: DescriptorConfig = None):
    ext = DescriptorExtractor(cfg).fit(frames)
    return [ext.embed(f) for f in frames]


def distance_matrix(frames, cfg: DescriptorConfig = None) -> np.ndarray:
    """N x N symmetric cosine-distance matrix with a zero diagonal."""
    embs = embed_sequence(frames, cfg)
    E = np.stack([e.vector for e in embs])
    D = 1.0 - E @ E.T
    D = (D + D.T) / 2.0
    np.fill_diagonal(D, 0.0)
    return np.clip(D, 0.0, 2.0)


def save_embeddings(path, embeddings, key: str):
    """Binary sidecar cache; key identifies sequence + config."""
    np.savez_compressed(
        path, key=np.array(key),
        indices=np.array([e.frame_index for e in embeddings], dtype=np.int64),
        vectors=np.stack([e.vector for e in embeddings]))


def load_embeddings(path, key: str):
    """Returns the cached embeddings or None on any mismatch."""
    try:
        with np.load(path, allow_pickle=False) as z:
            if str(z["key"]) != key:
                return None
            return [Embedding(int(i), v) for i, v in zip(z["indices"], z["vectors"])]
    except (OSError, KeyError, ValueError):
        return None
