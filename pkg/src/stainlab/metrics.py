"""Image-quality metrics: PSNR, SSIM, Frechet distance, Pearson correlation."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
from scipy.signal import convolve2d

from stainlab.errors import ArgumentError, NumericalError
from stainlab.imagedata import ImagePatch

SSIM_WIN = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _arr(x) -> np.ndarray:
    return x.pixels if isinstance(x, ImagePatch) else np.asarray(x, dtype=np.float64)


def _same_shape(a, b):
    a, b = _arr(a), _arr(b)
    if a.shape != b.shape:
        raise ArgumentError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, peak: float = 1.0) -> float:
    a, b = _same_shape(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def gaussian_window(size: int = SSIM_WIN, sigma: float = SSIM_SIGMA) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def _ssim_map(x: np.ndarray, y: np.ndarray, data_range: float) -> np.ndarray:
    w = gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2

    def filt(img):
        return convolve2d(img, w[::-1, ::-1], mode="valid")

    mx, my = filt(x), filt(y)
    sxx = filt(x * x) - mx * mx
    syy = filt(y * y) - my * my
    sxy = filt(x * y) - mx * my
    return ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))


def ssim(a, b, data_range: float = 1.0) -> float:
    """Mean local SSIM over valid 11x11 Gaussian windows, averaged over channels."""
    a, b = _same_shape(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if min(a.shape[:2]) < SSIM_WIN:
        raise ArgumentError(f"ssim needs side >= {SSIM_WIN}")
    vals = [float(_ssim_map(a[..., c], b[..., c], data_range).mean()) for c in range(a.shape[2])]
    return float(np.mean(vals))


@dataclass(frozen=True, eq=False)
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray
    n: int

    def __post_init__(self):
        if self.n < 2:
            raise ArgumentError("need at least two samples for covariance")
        cov = np.atleast_2d(self.cov)
        if not np.allclose(cov, cov.T, atol=1e-10, rtol=0):
            raise ArgumentError("covariance is not symmetric")


def gaussian_stats(embeddings) -> GaussianStats:
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2:
        raise ArgumentError("embeddings must be n x d")
    cov = np.atleast_2d(np.cov(x, rowvar=False, ddof=1))
    return GaussianStats(x.mean(axis=0), 0.5 * (cov + cov.T), x.shape[0])


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(0.5 * (m + m.T))
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet_distance(s1: GaussianStats, s2: GaussianStats, neg_tol: float = 1e-8) -> float:
    """||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2)).

    The trace of the square root is taken from the eigenvalues of the
    symmetric product S1^(1/2) S2 S1^(1/2), which shares its spectrum with S1 S2.
    """
    c1, c2 = np.atleast_2d(s1.cov), np.atleast_2d(s2.cov)
    r = _psd_sqrt(c1)
    prod = r @ c2 @ r
    for label, m in (("first covariance", c1), ("second covariance", c2), ("covariance product", prod)):
        vals = np.linalg.eigvalsh(0.5 * (m + m.T))
        scale = max(1.0, float(np.abs(vals).max(initial=0.0)))
        if vals.min(initial=0.0) < -neg_tol * scale:
            raise NumericalError(f"{label} has eigenvalue {vals.min():.3g}")
    # vals now holds the spectrum of the symmetrized product
    tr_sqrt = float(np.sqrt(np.clip(vals, 0.0, None)).sum())
    diff = np.asarray(s1.mean) - np.asarray(s2.mean)
    d = float(diff @ diff) + float(np.trace(c1) + np.trace(c2)) - 2.0 * tr_sqrt
    return max(d, 0.0)


def fid(set_a: Sequence[ImagePatch], set_b: Sequence[ImagePatch], embedder=None) -> float:
    """Frechet distance between embedder outputs of two patch sets."""
    from stainlab.features import ConvEmbedder, embed_patches

    embedder = embedder if embedder is not None else ConvEmbedder()
    return frechet_distance(gaussian_stats(embed_patches(set_a, embedder)),
                            gaussian_stats(embed_patches(set_b, embedder)))


class Correlation(NamedTuple):
    r: float
    degenerate: bool


def pearson(a, b) -> Correlation:
    """Pearson correlation over flattened pixels; constant input gives r=0, degenerate=True."""
    a, b = _same_shape(a, b)
    x = a.ravel() - a.mean()
    y = b.ravel() - b.mean()
    den = math.sqrt(float(x @ x) * float(y @ y))
    if den == 0.0:
        return Correlation(0.0, True)
    return Correlation(float(np.clip((x @ y) / den, -1.0, 1.0)), False)


def _mean_std(vals) -> dict:
    v = np.asarray(vals, dtype=np.float64)
    finite = v[np.isfinite(v)]
    return {"mean": float(finite.mean()) if finite.size else None,
            "std": float(finite.std()) if finite.size else None,
            "n": int(v.size)}


def evaluate_pairs(outputs: Sequence[ImagePatch], references: Sequence[ImagePatch], embedder=None) -> dict:
    """Summary for one target: FID plus mean/std of PSNR, SSIM and Pearson."""
    if len(outputs) != len(references):
        raise ArgumentError("outputs and references differ in length")
    out = {
        "psnr": _mean_std([psnr(o, r) for o, r in zip(outputs, references)]),
        "ssim": _mean_std([ssim(o, r) for o, r in zip(outputs, references)]),
        "pc": _mean_std([pearson(o, r).r for o, r in zip(outputs, references)]),
        "fid": fid(outputs, references, embedder) if len(outputs) >= 2 else None,
    }
    return out


def format_mean_std(stats: dict, digits: int = 3) -> str:
    return f"{stats['mean']:.{digits}f} ± {stats['std']:.{digits}f}"
