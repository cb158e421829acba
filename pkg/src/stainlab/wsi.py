"""Tile-based whole-slide normalization: tissue masking, tile grids, stitching, seam reports."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage
from skimage import color, filters, morphology

from stainlab.errors import ArgumentError, ConfigError, DecodeError
from stainlab.imagedata import ImagePatch, Magnification, quantize, render_beer_lambert
from stainlab.metrics import format_mean_std
from stainlab.stain import ESTIMATORS, RUIFROK_HE, StainMatrix, normalize_reinhard, normalize_stain

log = logging.getLogger(__name__)

SLIDE_MULTIPLE = 64
NORMALIZERS = ("identity", "reinhard", "ruifrok", "macenko", "vahadane", "stainfuser")


@dataclass(frozen=True, eq=False)
class PseudoSlide:
    """A slide-sized RGB raster in [0, 1]; ``footprint`` is the generator's tissue truth, when known."""

    pixels: np.ndarray
    base_magnification: Magnification = Magnification.X20
    slide_id: str = "slide"
    footprint: np.ndarray | None = None

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ArgumentError(f"slide must be H x W x 3, got {px.shape}")
        h, w = px.shape[:2]
        if h == 0 or w == 0 or h % SLIDE_MULTIPLE or w % SLIDE_MULTIPLE:
            raise ArgumentError(f"slide sides must be positive multiples of {SLIDE_MULTIPLE}, got {h}x{w}")
        if not np.all(np.isfinite(px)) or px.min() < 0.0 or px.max() > 1.0:
            raise ArgumentError("slide pixels must lie in [0, 1]")
        object.__setattr__(self, "pixels", px)
        object.__setattr__(self, "base_magnification", Magnification(self.base_magnification))

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape[:2]

    def tile(self, x: int, y: int, side: int) -> ImagePatch:
        return ImagePatch(self.pixels[y:y + side, x:x + side], id=f"{self.slide_id}@{x},{y}",
                          magnification=self.base_magnification, origin=(self.slide_id, x, y))


def synth_slide(side: int = 2048, stain_matrix: StainMatrix = RUIFROK_HE, seed: int = 0, n_blobs: int = 1,
                slide_id: str = "synth-slide") -> PseudoSlide:
    """White background with ``n_blobs`` irregular tissue regions of Beer-Lambert texture."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    footprint = np.zeros((side, side), dtype=bool)
    for _ in range(n_blobs):
        cy, cx = rng.uniform(0.4 * side, 0.6 * side, size=2)
        ry, rx = rng.uniform(0.28 * side, 0.38 * side, size=2)
        # wobbly ellipse boundary
        ang = np.arctan2(yy - cy, xx - cx)
        phases = rng.uniform(0, 2 * np.pi, 3)
        wobble = 1.0 + sum(0.06 * np.sin(k * ang + p) for k, p in zip((3, 5, 7), phases))
        footprint |= ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= wobble**2
    nuclei_seeds = (rng.random((side, side)) < 2.5e-3).astype(np.float64)
    nuclei = np.clip(ndimage.gaussian_filter(nuclei_seeds, 3.0) * 60.0, 0.0, 3.0)
    stroma = ndimage.gaussian_filter(rng.normal(size=(side, side)), 12.0)
    stroma = 0.6 + 0.5 * stroma / (stroma.std() + 1e-12)
    conc = np.zeros((side, side, 2))
    conc[..., 0] = 1.2 * (1.0 - np.exp(-nuclei))
    conc[..., 1] = np.clip(stroma, 0.25, 1.2) * np.exp(-2.0 * nuclei)
    conc *= footprint[..., None]
    return PseudoSlide(render_beer_lambert(conc, stain_matrix.vectors), slide_id=slide_id, footprint=footprint)


def save_slide(slide: PseudoSlide, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(quantize(slide.pixels)).save(path)
    return path


def load_slide(path: str | Path, slide_id: str | None = None) -> PseudoSlide:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except (OSError, ValueError) as exc:
        raise DecodeError(f"cannot read slide {path}: {exc}") from exc
    return PseudoSlide(arr, slide_id=slide_id or Path(path).stem)


# --------------------------------------------------------------------------
# masking and tiling


def _thumbnail(pixels: np.ndarray, f: int) -> np.ndarray:
    h, w = pixels.shape[:2]
    H, W = math.ceil(h / f), math.ceil(w / f)
    # pad with white so partial blocks read as background
    padded = np.ones((H * f, W * f, 3))
    padded[:h, :w] = pixels
    return padded.reshape(H, f, W, f, 3).mean(axis=(1, 3))


def tissue_mask(slide: PseudoSlide, downsample: int = 16, min_saturation: float = 0.05,
                closing_radius: int = 2) -> np.ndarray:
    """Otsu threshold on HSV saturation of a block-mean thumbnail, then binary closing.

    Returns a boolean mask of shape ceil(H/downsample) x ceil(W/downsample).
    Saturation below ``min_saturation`` never counts as tissue, so a blank
    slide gives an empty mask rather than thresholded noise.
    """
    if downsample < 1:
        raise ArgumentError("downsample must be >= 1")
    sat = color.rgb2hsv(_thumbnail(slide.pixels, downsample))[..., 1]
    if sat.max() < min_saturation:
        return np.zeros(sat.shape, dtype=bool)
    thr = max(float(filters.threshold_otsu(sat)), min_saturation)
    mask = sat > thr
    if closing_radius > 0:
        mask = morphology.binary_closing(mask, morphology.disk(closing_radius))
    return mask


@dataclass(frozen=True)
class TileGrid:
    """Row-major top-left corners of the planned tiles.

    ``mask_coverage`` is the share of tissue-mask area that falls inside the
    planned tiles.
    """

    tile_side: int
    coordinates: list[tuple[int, int]]
    mask_coverage: float
    slide_shape: tuple[int, int] = (0, 0)

    def __len__(self) -> int:
        return len(self.coordinates)


def _full_res_mask(mask: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    h, w = shape
    fy, fx = math.ceil(h / mask.shape[0]), math.ceil(w / mask.shape[1])
    if math.ceil(h / fy) != mask.shape[0] or math.ceil(w / fx) != mask.shape[1]:
        raise ArgumentError(f"mask {mask.shape} does not match slide {shape}")
    return np.repeat(np.repeat(mask, fy, axis=0), fx, axis=1)[:h, :w]


def plan_tiles(slide: PseudoSlide, mask: np.ndarray, tile_side: int = 512,
               min_tissue_fraction: float = 0.1) -> TileGrid:
    """Non-overlapping grid over the slide, keeping tiles with enough tissue.

    The grid covers floor(H/side) x floor(W/side) whole tiles; a tile is kept
    when the fraction of its pixels under the (upsampled) mask is at least
    ``min_tissue_fraction``.
    """
    if tile_side < 1:
        raise ArgumentError("tile_side must be >= 1")
    h, w = slide.shape
    full = _full_res_mask(np.asarray(mask, dtype=bool), (h, w))
    ny, nx = h // tile_side, w // tile_side
    frac = full[:ny * tile_side, :nx * tile_side].reshape(ny, tile_side, nx, tile_side).mean(axis=(1, 3))
    keep = frac >= min_tissue_fraction if ny and nx else np.zeros((0, 0), dtype=bool)
    if min_tissue_fraction <= 0:
        keep &= frac > 0
    coords = [(int(j * tile_side), int(i * tile_side)) for i, j in zip(*np.nonzero(keep))]
    total = int(full.sum())
    inside = sum(int(full[y:y + tile_side, x:x + tile_side].sum()) for x, y in coords)
    return TileGrid(tile_side, coords, inside / total if total else 0.0, (h, w))


# --------------------------------------------------------------------------
# seams


@dataclass(frozen=True)
class Seam:
    a: tuple[int, int]
    b: tuple[int, int]
    orientation: str  # "vertical": b is right of a; "horizontal": b is below a
    diff: float


@dataclass
class SeamReport:
    seams: list[Seam]
    mean: float
    source_mean: float | None = None

    @property
    def excess(self) -> float | None:
        """Seam difference beyond what the unnormalized slide already had."""
        return None if self.source_mean is None else self.mean - self.source_mean

    def to_dict(self) -> dict:
        return {"seams": [asdict(s) for s in self.seams], "mean": self.mean, "source_mean": self.source_mean,
                "excess": self.excess, "n_seams": len(self.seams)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def seam_consistency(output, grid: TileGrid) -> SeamReport:
    """Mean absolute difference across each boundary between two adjacent planned tiles."""
    px = output.pixels if isinstance(output, PseudoSlide) else np.asarray(output, dtype=np.float64)
    s = grid.tile_side
    planned = set(grid.coordinates)
    seams = []
    for x, y in grid.coordinates:
        if (x + s, y) in planned:
            d = np.abs(px[y:y + s, x + s - 1] - px[y:y + s, x + s]).mean()
            seams.append(Seam((x, y), (x + s, y), "vertical", float(d)))
        if (x, y + s) in planned:
            d = np.abs(px[y + s - 1, x:x + s] - px[y + s, x:x + s]).mean()
            seams.append(Seam((x, y), (x, y + s), "horizontal", float(d)))
    mean = float(np.mean([sm.diff for sm in seams])) if seams else 0.0
    return SeamReport(seams, mean)


# --------------------------------------------------------------------------
# normalizers


TileFn = Callable[[list[ImagePatch]], list[np.ndarray]]


def tile_seed(seed: int, x: int, y: int) -> int:
    """Per-tile sampling seed derived from the slide seed and the tile position."""
    digest = hashlib.blake2b(f"{seed}:{x}:{y}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") & 0x7FFF_FFFF_FFFF_FFFF


def make_normalizer(name: str, target: ImagePatch, bundle=None, schedule=None, n_steps: int = 20,
                    seed: int = 0) -> TileFn:
    """A function from a batch of tiles to their normalized pixel arrays."""
    if name not in NORMALIZERS:
        raise ConfigError(f"unknown normalizer {name!r}; choose from {NORMALIZERS}")
    if name == "identity":
        return lambda tiles: [t.pixels.copy() for t in tiles]
    if name == "reinhard":
        return lambda tiles: [normalize_reinhard(t, target).pixels for t in tiles]
    if name in ("ruifrok", "macenko", "vahadane"):
        est = "ruifrok_fixed" if name == "ruifrok" else name
        target_matrix = ESTIMATORS[est](target)
        return lambda tiles: [normalize_stain(t, target, est, target_matrix).pixels for t in tiles]

    import torch

    from stainlab.features import to_tensor
    from stainlab.training import default_schedule, infer_tensor

    if bundle is None:
        raise ConfigError("the stainfuser normalizer needs a trained model")
    if not getattr(bundle, "trained", False):
        raise ConfigError("the supplied model has not been trained")
    schedule = schedule if schedule is not None else default_schedule()
    target_t = to_tensor([target])

    def run(tiles: list[ImagePatch]) -> list[np.ndarray]:
        seeds = [tile_seed(seed, *t.origin[1:]) if t.origin else seed for t in tiles]
        src = to_tensor(tiles)
        out = infer_tensor(bundle, schedule, src, target_t.expand(len(tiles), -1, -1, -1), n_steps, seeds)
        return [o.permute(1, 2, 0).to(torch.float64).numpy() for o in out]

    return run


# --------------------------------------------------------------------------
# slide runs


@dataclass
class SlideRun:
    output: PseudoSlide
    report: SeamReport
    grid: TileGrid
    tile_seconds: list[float]
    tiles_per_sec: float
    tiles: dict[tuple[int, int], np.ndarray] | None = field(default=None, repr=False)

    @property
    def latency(self) -> str:
        """Per-tile latency in seconds as ``mean ± std``."""
        if not self.tile_seconds:
            return "n/a"
        v = np.asarray(self.tile_seconds)
        return format_mean_std({"mean": float(v.mean()), "std": float(v.std())}, digits=4)

    def summary(self) -> dict:
        return {"n_tiles": len(self.grid), "tiles_per_sec": self.tiles_per_sec, "latency_s": self.latency,
                "seam_mean": self.report.mean, "seam_source_mean": self.report.source_mean,
                "seam_excess": self.report.excess, "mask_coverage": self.grid.mask_coverage}


def run_slide(slide: PseudoSlide, target: ImagePatch, normalizer: str | TileFn = "macenko", batch: int = 4,
              n_steps: int = 20, bundle=None, schedule=None, seed: int = 0, tile_side: int = 512,
              mask_downsample: int = 16, min_tissue_fraction: float = 0.1, workers: int = 1,
              keep_tiles: bool = False, progress: Callable[[int, int], None] | None = None) -> SlideRun:
    """Normalize every planned tile independently and place it back at its position.

    Tiles without enough tissue keep their input pixels. ``normalizer`` is a
    name from ``NORMALIZERS`` or a callable taking a list of tiles. Latency
    is the wall time of each batch divided evenly among its tiles.
    """
    if batch < 1 or workers < 1:
        raise ConfigError("batch and workers must be >= 1")
    fn = normalizer if callable(normalizer) else make_normalizer(normalizer, target, bundle, schedule, n_steps, seed)
    grid = plan_tiles(slide, tissue_mask(slide, mask_downsample), tile_side, min_tissue_fraction)
    batches = [grid.coordinates[i:i + batch] for i in range(0, len(grid), batch)]
    out = slide.pixels.copy()
    tiles: dict[tuple[int, int], np.ndarray] = {}
    seconds: list[float] = []
    done = 0

    def work(coords):
        t0 = time.perf_counter()
        res = fn([slide.tile(x, y, tile_side) for x, y in coords])
        return coords, res, time.perf_counter() - t0

    t_start = time.perf_counter()
    with ThreadPoolExecutor(max_workers=workers) as pool:
        for coords, res, dt in pool.map(work, batches):
            for (x, y), px in zip(coords, res):
                px = np.asarray(px, dtype=np.float64)
                if px.shape != (tile_side, tile_side, 3):
                    raise ArgumentError(f"normalizer returned {px.shape} for a {tile_side} tile")
                out[y:y + tile_side, x:x + tile_side] = px
                if keep_tiles:
                    tiles[(x, y)] = px
            seconds += [dt / len(coords)] * len(coords)
            done += len(coords)
            if progress is not None:
                progress(done, len(grid))
    elapsed = time.perf_counter() - t_start
    result = PseudoSlide(out, slide.base_magnification, slide.slide_id, slide.footprint)
    report = seam_consistency(result, grid)
    report.source_mean = seam_consistency(slide, grid).mean
    return SlideRun(result, report, grid, seconds, len(grid) / elapsed if elapsed > 0 and len(grid) else 0.0,
                    tiles if keep_tiles else None)
