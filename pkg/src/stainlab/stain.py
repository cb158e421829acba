"""Classical stain normalizers: Reinhard, Ruifrok, Macenko and Vahadane.

All optical-density conversions use I0 = 1 on [0, 1] pixels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from skimage import color

from stainlab.errors import ArgumentError, ConditioningError, EstimationError
from stainlab.imagedata import ImagePatch

OD_EPS = 1e-6
MIN_ROW_ANGLE_DEG = 1.0
MAX_CONC_PERCENTILE = 99.0
MIN_TISSUE_PIXELS = 100


@dataclass(frozen=True, eq=False)
class StainMatrix:
    """Rows are unit OD vectors (hematoxylin first)."""

    vectors: np.ndarray
    max_concentrations: np.ndarray | None = None

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise ArgumentError(f"stain matrix must be n x 3, got {v.shape}")
        if np.any(v < -1e-12):
            raise ArgumentError("stain vectors must be nonnegative")
        norms = np.linalg.norm(v, axis=1)
        if np.any(norms == 0):
            raise ArgumentError("zero stain vector")
        v = np.clip(v, 0, None) / norms[:, None]
        v.setflags(write=False)
        object.__setattr__(self, "vectors", v)
        if self.max_concentrations is not None:
            mc = np.asarray(self.max_concentrations, dtype=np.float64)
            mc.setflags(write=False)
            object.__setattr__(self, "max_concentrations", mc)

    @property
    def n_stains(self) -> int:
        return self.vectors.shape[0]

    def min_row_angle(self) -> float:
        """Smallest pairwise angle between rows, degrees."""
        best = 180.0
        for i in range(self.n_stains):
            for j in range(i + 1, self.n_stains):
                c = np.clip(self.vectors[i] @ self.vectors[j], -1, 1)
                best = min(best, float(np.degrees(np.arccos(c))))
        return best

    def to_dict(self) -> dict:
        return {
            "vectors": self.vectors.tolist(),
            "max_concentrations": None if self.max_concentrations is None else self.max_concentrations.tolist(),
            "percentile": MAX_CONC_PERCENTILE,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StainMatrix":
        return cls(np.array(d["vectors"]), None if d.get("max_concentrations") is None else np.array(d["max_concentrations"]))


# Ruifrok & Johnston H&E reference vectors
RUIFROK_HE = StainMatrix(np.array([[0.65, 0.70, 0.29], [0.07, 0.99, 0.11]]))


def _pixels(p) -> np.ndarray:
    return p.pixels if isinstance(p, ImagePatch) else np.asarray(p, dtype=np.float64)


def rgb_to_od(patch) -> np.ndarray:
    return -np.log10(np.maximum(_pixels(patch), OD_EPS))


def od_to_rgb(od: np.ndarray) -> np.ndarray:
    return np.clip(10.0 ** (-od), 0.0, 1.0)


def angular_error_deg(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    c = a @ b / (np.linalg.norm(a) * np.linalg.norm(b))
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


def _check_conditioning(matrix: StainMatrix):
    if matrix.n_stains > 1 and matrix.min_row_angle() <= MIN_ROW_ANGLE_DEG:
        raise ConditioningError(f"stain vectors within {MIN_ROW_ANGLE_DEG} deg of each other")


def deconvolve(patch, matrix: StainMatrix) -> np.ndarray:
    """Per-pixel least squares of od = conc @ M, negatives clamped to zero.

    Returns an H x W x n_stains concentration map.
    """
    _check_conditioning(matrix)
    od = rgb_to_od(patch)
    h, w, _ = od.shape
    conc = od.reshape(-1, 3) @ np.linalg.pinv(matrix.vectors)
    return np.clip(conc, 0.0, None).reshape(h, w, matrix.n_stains)


def reconstruct(conc: np.ndarray, matrix: StainMatrix) -> np.ndarray:
    return od_to_rgb(np.asarray(conc, dtype=np.float64) @ matrix.vectors)


def _tissue_od(patch, beta: float) -> np.ndarray:
    od = rgb_to_od(patch).reshape(-1, 3)
    return od[np.linalg.norm(od, axis=1) > beta]


def _order_he(rows: np.ndarray) -> np.ndarray:
    # hematoxylin absorbs more red than eosin does
    return rows if rows[0, 0] >= rows[1, 0] else rows[::-1].copy()


def _with_max_conc(patch, rows: np.ndarray) -> StainMatrix:
    base = StainMatrix(rows)
    conc = deconvolve(patch, base).reshape(-1, base.n_stains)
    return StainMatrix(base.vectors, np.percentile(conc, MAX_CONC_PERCENTILE, axis=0))


def _extreme_rays(od: np.ndarray, alpha_percentile: float) -> np.ndarray:
    """Two unit OD vectors at the angular percentiles of the top-2 PCA plane."""
    evals, evecs = np.linalg.eigh(np.cov(od, rowvar=False))
    if evals[-1] <= 0 or evals[-2] / evals[-1] < 1e-8:
        raise ConditioningError("optical-density cloud is rank deficient")
    plane = evecs[:, [-1, -2]]
    plane = plane * np.where(plane.sum(axis=0) < 0, -1.0, 1.0)
    proj = od @ plane
    phi = np.arctan2(proj[:, 1], proj[:, 0])
    lo, hi = np.percentile(phi, [alpha_percentile, 100.0 - alpha_percentile])
    rows = []
    for ang in (lo, hi):
        v = plane @ np.array([np.cos(ang), np.sin(ang)])
        if v.sum() < 0:
            v = -v
        v = np.clip(v, 0.0, None)
        if not v.any():
            raise ConditioningError("estimated stain vector has no positive component")
        rows.append(v / np.linalg.norm(v))
    return _order_he(np.array(rows))


def estimate_macenko(patch, alpha_percentile: float = 1.0, beta_od_threshold: float = 0.15) -> StainMatrix:
    od = _tissue_od(patch, beta_od_threshold)
    if len(od) < MIN_TISSUE_PIXELS:
        raise EstimationError(f"only {len(od)} tissue pixels (need {MIN_TISSUE_PIXELS})")
    rows = _extreme_rays(od, alpha_percentile)
    if StainMatrix(rows).min_row_angle() <= MIN_ROW_ANGLE_DEG:
        raise ConditioningError("estimated stain vectors are nearly parallel")
    return _with_max_conc(patch, rows)


def sparse_nmf(od: np.ndarray, n_components: int = 2, sparsity_lambda: float = 0.1, n_iters: int = 100,
               init: np.ndarray | None = None):
    """Sparse NMF with unit-norm basis rows, od ~= H @ W.

    Minimizes 0.5 * ||od - H W||_F^2 + lambda * sum(H) with H >= 0, W >= 0 and
    ||W_k|| = 1. H takes a multiplicative step; W takes a multiplicative step
    followed by row normalization, backtracked toward the previous W until the
    objective does not increase. Returns ``(W, H, objective_history)``.
    """
    V = np.clip(np.asarray(od, dtype=np.float64), 0.0, None)
    W = np.array(init if init is not None else RUIFROK_HE.vectors[:n_components], dtype=np.float64)
    W = np.maximum(W, 1e-3)
    W /= np.linalg.norm(W, axis=1, keepdims=True)
    H = np.maximum(np.linalg.lstsq(W.T, V.T, rcond=None)[0].T, 1e-3)
    tiny = 1e-12

    def objective(H, W):
        r = V - H @ W
        return 0.5 * float(np.sum(r * r)) + sparsity_lambda * float(H.sum())

    current = objective(H, W)
    history = [current]
    for _ in range(n_iters):
        H = H * (V @ W.T) / (H @ (W @ W.T) + sparsity_lambda + tiny)
        current = objective(H, W)
        step = W * (H.T @ V) / ((H.T @ H) @ W + tiny)
        eta = 1.0
        for _ in range(20):
            cand = (1 - eta) * W + eta * step
            cand = cand / np.maximum(np.linalg.norm(cand, axis=1, keepdims=True), tiny)
            val = objective(H, cand)
            if val <= current:
                W, current = cand, val
                break
            eta *= 0.5
        history.append(current)
    return W, H, history


def estimate_vahadane(patch, sparsity_lambda: float = 0.1, n_iters: int = 100,
                      beta_od_threshold: float = 0.15, max_pixels: int = 20000) -> StainMatrix:
    od = _tissue_od(patch, beta_od_threshold)
    if len(od) < MIN_TISSUE_PIXELS:
        raise EstimationError(f"only {len(od)} tissue pixels (need {MIN_TISSUE_PIXELS})")
    init = _extreme_rays(od, 1.0)
    if len(od) > max_pixels:
        od = od[np.linspace(0, len(od) - 1, max_pixels).astype(int)]
    W, _, _ = sparse_nmf(od, 2, sparsity_lambda, n_iters, init=init)
    rows = _order_he(W)
    if StainMatrix(rows).min_row_angle() <= MIN_ROW_ANGLE_DEG:
        raise ConditioningError("estimated stain vectors are nearly parallel")
    return _with_max_conc(patch, rows)


ESTIMATORS = {
    "ruifrok_fixed": lambda p: _with_max_conc(p, RUIFROK_HE.vectors),
    "macenko": estimate_macenko,
    "vahadane": estimate_vahadane,
}


def _has_no_tissue(patch, beta=0.15) -> bool:
    return len(_tissue_od(patch, beta)) == 0


def normalize_stain(source: ImagePatch, target: ImagePatch, estimator: str = "macenko",
                    target_matrix: StainMatrix | None = None) -> ImagePatch:
    """Deconvolve ``source``, rescale each stain to the target's 99th percentile, recolor."""
    if estimator not in ESTIMATORS:
        raise ArgumentError(f"unknown estimator {estimator!r}")
    if estimator != "ruifrok_fixed" and _has_no_tissue(source):
        # nothing absorbs light, so there is nothing to recolor
        return source.with_pixels(source.pixels)
    est = ESTIMATORS[estimator]
    src_m = est(source)
    tgt_m = target_matrix if target_matrix is not None else est(target)
    conc = deconvolve(source, src_m)
    src_max = src_m.max_concentrations
    scale = np.where(src_max > 1e-12, tgt_m.max_concentrations / np.maximum(src_max, 1e-12), 1.0)
    return source.with_pixels(reconstruct(conc * scale, tgt_m))


def rgb_to_lab(pixels: np.ndarray) -> np.ndarray:
    return color.rgb2lab(np.asarray(pixels, dtype=np.float64))


def lab_to_rgb(lab: np.ndarray) -> np.ndarray:
    return color.lab2rgb(lab)


def lab_stats(patch) -> tuple[np.ndarray, np.ndarray]:
    lab = rgb_to_lab(_pixels(patch)).reshape(-1, 3)
    return lab.mean(axis=0), lab.std(axis=0)


def normalize_reinhard(source: ImagePatch, target: ImagePatch) -> ImagePatch:
    lab = rgb_to_lab(source.pixels)
    mu_s, sd_s = lab_stats(source)
    mu_t, sd_t = lab_stats(target)
    sd_s = np.where(sd_s > 1e-12, sd_s, 1.0)
    out = (lab - mu_s) / sd_s * sd_t + mu_t
    return source.with_pixels(lab_to_rgb(out))
