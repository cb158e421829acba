"""Image patches, the synthetic Beer-Lambert corpus, PNG/JSON persistence."""

from __future__ import annotations

import enum
import json
import os
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Any, Iterable, Sequence

import numpy as np
from PIL import Image, PngImagePlugin, UnidentifiedImageError

from stainlab.errors import ArgumentError, DecodeError, SchemaError

if TYPE_CHECKING:
    from stainlab.stain import StainMatrix

SCHEMA_VERSION = 1
CACHE_ENV = "STAINLAB_CACHE"


class Magnification(str, enum.Enum):
    X20 = "20x"
    X40 = "40x"


@dataclass(frozen=True, eq=False)
class ImagePatch:
    """Square RGB raster with values in [0, 1].

    ``origin`` is ``(slide_id, x, y)`` when the patch was cut from a slide.
    """

    pixels: np.ndarray
    id: str = ""
    magnification: Magnification = Magnification.X20
    origin: tuple[str, int, int] | None = None

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 3 or px.shape[2] != 3 or px.shape[0] != px.shape[1] or px.shape[0] < 1:
            raise ArgumentError(f"patch must be side x side x 3, got {px.shape}")
        if not np.all(np.isfinite(px)) or px.min() < 0.0 or px.max() > 1.0:
            raise ArgumentError("patch pixels must lie in [0, 1]")
        if px is self.pixels:
            px = px.copy()
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)
        object.__setattr__(self, "magnification", Magnification(self.magnification))

    @property
    def side(self) -> int:
        return self.pixels.shape[0]

    @classmethod
    def from_array(cls, arr, **kw) -> "ImagePatch":
        """Build a patch from an array, clipping to [0, 1] first."""
        return cls(np.clip(np.asarray(arr, dtype=np.float64), 0.0, 1.0), **kw)

    def with_pixels(self, arr) -> "ImagePatch":
        return ImagePatch.from_array(arr, id=self.id, magnification=self.magnification, origin=self.origin)


# --------------------------------------------------------------------------
# synthetic corpus


@dataclass(frozen=True)
class SyntheticCorpusConfig:
    n_patches: int
    side: int
    stain_matrix: "StainMatrix"
    texture_seed: int = 0
    concentration_range: tuple[tuple[float, float], tuple[float, float]] = ((0.0, 1.5), (0.0, 1.0))
    # expected nucleus count per 32x32 area
    blob_density: float = 3.0
    # per-index stain variation; zero keeps every patch on ``stain_matrix``
    stain_jitter_deg: float = 0.0
    intensity_jitter: float = 0.0
    magnification: Magnification = Magnification.X20
    name: str = "synth"

    def __post_init__(self):
        if self.n_patches < 0 or self.side < 1:
            raise ArgumentError("n_patches must be >= 0 and side >= 1")
        for lo, hi in self.concentration_range:
            if lo < 0 or hi < lo:
                raise ArgumentError(f"bad concentration range ({lo}, {hi})")
        if self.blob_density < 0 or self.stain_jitter_deg < 0 or not 0 <= self.intensity_jitter < 1:
            raise ArgumentError("blob_density, stain_jitter_deg must be >= 0; intensity_jitter in [0, 1)")


def _rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, int(index)])


def _bumps(rng, side, count, sigma_range, amp_range) -> np.ndarray:
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    out = np.zeros((side, side))
    for _ in range(count):
        cy, cx = rng.uniform(-0.1 * side, 1.1 * side, size=2)
        sigma = rng.uniform(*sigma_range)
        amp = rng.uniform(*amp_range)
        out += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
    return out


def patch_stain_vectors(config: SyntheticCorpusConfig, index: int) -> np.ndarray:
    """The 2x3 unit OD stain vectors used to render patch ``index``."""
    base = np.asarray(config.stain_matrix.vectors, dtype=np.float64)
    if config.stain_jitter_deg == 0:
        return base.copy()
    rng = _rng(config.texture_seed + 7919, index)
    out = []
    for v in base:
        for _ in range(100):
            d = rng.normal(size=3)
            d -= d.dot(v) * v
            d /= np.linalg.norm(d)
            ang = np.deg2rad(rng.uniform(0, config.stain_jitter_deg))
            w = np.cos(ang) * v + np.sin(ang) * d
            if np.all(w >= 0):
                break
        else:
            w = np.clip(w, 0, None)
        out.append(w / np.linalg.norm(w))
    return np.array(out)


def synth_concentrations(config: SyntheticCorpusConfig, index: int) -> np.ndarray:
    """side x side x 2 nonnegative concentration field for patch ``index``."""
    rng = _rng(config.texture_seed, index)
    s = config.side
    scale = s / 64.0
    n_nuclei = int(rng.poisson(config.blob_density * s * s / 1024.0))
    n_stroma = int(rng.integers(2, 6))
    nuclei = _bumps(rng, s, n_nuclei, (3.0 * scale, 5.0 * scale), (1.0, 3.0))
    stroma = _bumps(rng, s, n_stroma, (8.0 * scale, 16.0 * scale), (0.5, 2.0))
    gain = 1.0
    if config.intensity_jitter:
        gain = rng.uniform(1 - config.intensity_jitter, 1 + config.intensity_jitter)
    # nuclei displace cytoplasm, so nucleus cores are close to pure hematoxylin
    stroma = stroma * np.exp(-2.0 * nuclei)
    conc = np.empty((s, s, 2))
    for k, fld in enumerate((nuclei, stroma)):
        lo, hi = config.concentration_range[k]
        conc[..., k] = gain * (lo + (hi - lo) * (1.0 - np.exp(-fld)))
    return conc


def render_beer_lambert(conc: np.ndarray, vectors: np.ndarray) -> np.ndarray:
    """pixel_c = 10 ** -(conc @ M)_c, clipped to [0, 1]."""
    od = np.asarray(conc, dtype=np.float64) @ np.asarray(vectors, dtype=np.float64)
    return np.clip(10.0 ** (-od), 0.0, 1.0)


def synth_patch(config: SyntheticCorpusConfig, index: int) -> ImagePatch:
    conc = synth_concentrations(config, index)
    pixels = render_beer_lambert(conc, patch_stain_vectors(config, index))
    return ImagePatch(
        pixels,
        id=f"{config.name}-{config.texture_seed}-{index:06d}",
        magnification=config.magnification,
    )


def synth_corpus(config: SyntheticCorpusConfig) -> list[ImagePatch]:
    return [synth_patch(config, i) for i in range(config.n_patches)]


# --------------------------------------------------------------------------
# PNG persistence


def quantize(pixels: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_patch(patch: ImagePatch, path: str | os.PathLike, extra: dict[str, str] | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    info = PngImagePlugin.PngInfo()
    info.add_text("stainlab.id", patch.id)
    info.add_text("stainlab.magnification", patch.magnification.value)
    info.add_text("stainlab.origin", json.dumps(patch.origin))
    for k, v in (extra or {}).items():
        info.add_text(f"stainlab.extra.{k}", v)
    tmp = path.with_name(path.name + f".tmp{threading.get_ident()}")
    Image.fromarray(quantize(patch.pixels), mode="RGB").save(tmp, format="PNG", pnginfo=info)
    os.replace(tmp, path)
    return path


def read_png_text(path: str | os.PathLike) -> dict[str, str]:
    try:
        with Image.open(path) as im:
            return dict(getattr(im, "text", {}) or {})
    except (FileNotFoundError, UnidentifiedImageError, OSError) as exc:
        raise DecodeError(f"cannot read {path}: {exc}") from exc


def load_patch(path: str | os.PathLike) -> ImagePatch:
    try:
        with Image.open(path) as im:
            im.load()
            text = dict(getattr(im, "text", {}) or {})
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (FileNotFoundError, UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise DecodeError(f"cannot decode {path}: {exc}") from exc
    if arr.shape[0] != arr.shape[1]:
        raise DecodeError(f"{path}: patch is not square {arr.shape}")
    origin = json.loads(text.get("stainlab.origin", "null"))
    return ImagePatch(
        arr.astype(np.float64) / 255.0,
        id=text.get("stainlab.id", Path(path).stem),
        magnification=text.get("stainlab.magnification", "20x"),
        origin=tuple(origin) if origin else None,
    )


class PatchStore:
    """Directory of PNG patches keyed by id.

    Writes are atomic (temp file + rename) and serialized per id.
    """

    def __init__(self, root: str | os.PathLike | None = None):
        if root is None:
            root = os.environ.get(CACHE_ENV, "stainlab-cache")
        self.root = Path(root)
        self._locks: dict[str, threading.Lock] = {}
        self._guard = threading.Lock()

    def path(self, patch_id: str) -> Path:
        return self.root / "patches" / f"{patch_id}.png"

    def exists(self, patch_id: str) -> bool:
        return self.path(patch_id).is_file()

    def _lock(self, patch_id):
        with self._guard:
            return self._locks.setdefault(patch_id, threading.Lock())

    def put(self, patch: ImagePatch, extra: dict[str, str] | None = None) -> Path:
        with self._lock(patch.id):
            return save_patch(patch, self.path(patch.id), extra)

    def get(self, patch_id: str) -> ImagePatch:
        return load_patch(self.path(patch_id))

    def meta(self, patch_id: str) -> dict[str, str]:
        return read_png_text(self.path(patch_id))


# --------------------------------------------------------------------------
# manifests


@dataclass(frozen=True)
class PatchEntry:
    id: str
    path: str
    side: int
    magnification: str = "20x"


@dataclass(frozen=True)
class TriadRecord:
    source_id: str
    target_id: str
    transferred_id: str
    nst_config_hash: str


@dataclass
class Manifest:
    corpus_name: str
    records: list = field(default_factory=list)
    seed: int = 0
    config_snapshot: dict[str, Any] = field(default_factory=dict)
    plan: dict[str, Any] | None = None

    def patches(self) -> list[PatchEntry]:
        return [r for r in self.records if isinstance(r, PatchEntry)]

    def triads(self) -> list[TriadRecord]:
        return [r for r in self.records if isinstance(r, TriadRecord)]

    def to_json(self) -> str:
        recs = []
        for r in self.records:
            if isinstance(r, PatchEntry):
                recs.append({"kind": "patch", **r.__dict__})
            elif isinstance(r, TriadRecord):
                recs.append({"kind": "triad", **r.__dict__})
            else:
                raise SchemaError(f"unsupported record {r!r}")
        doc = {
            "schema_version": SCHEMA_VERSION,
            "corpus_name": self.corpus_name,
            "seed": self.seed,
            "config_snapshot": self.config_snapshot,
            "plan": self.plan,
            "records": recs,
        }
        return json.dumps(doc, sort_keys=True, indent=1, ensure_ascii=False) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "Manifest":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"manifest is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise SchemaError("manifest must be a JSON object")
        if doc.get("schema_version") != SCHEMA_VERSION:
            raise SchemaError(
                f"manifest schema_version {doc.get('schema_version')!r} != {SCHEMA_VERSION}"
            )
        allowed = {"schema_version", "corpus_name", "seed", "config_snapshot", "plan", "records"}
        extra = set(doc) - allowed
        if extra:
            raise SchemaError(f"unknown manifest keys: {sorted(extra)}")
        records = []
        for rec in doc.get("records", []):
            rec = dict(rec)
            kind = rec.pop("kind", None)
            try:
                if kind == "patch":
                    records.append(PatchEntry(**rec))
                elif kind == "triad":
                    records.append(TriadRecord(**rec))
                else:
                    raise SchemaError(f"unknown record kind {kind!r}")
            except TypeError as exc:
                raise SchemaError(f"bad {kind} record: {exc}") from exc
        return cls(
            corpus_name=doc.get("corpus_name", ""),
            records=records,
            seed=int(doc.get("seed", 0)),
            config_snapshot=doc.get("config_snapshot") or {},
            plan=doc.get("plan"),
        )


def write_manifest(manifest: Manifest, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(manifest.to_json().encode("utf-8"))
    os.replace(tmp, path)
    return path


def read_manifest(path: str | os.PathLike) -> Manifest:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DecodeError(f"cannot read manifest {path}: {exc}") from exc
    return Manifest.from_json(text)


def patch_manifest(name: str, patches: Iterable[ImagePatch], store: PatchStore, seed: int = 0,
                   config_snapshot: dict | None = None) -> Manifest:
    """Write every patch into ``store`` and return a manifest listing them."""
    records = []
    for p in patches:
        path = store.put(p)
        records.append(PatchEntry(p.id, os.path.relpath(path, store.root), p.side, p.magnification.value))
    return Manifest(name, records, seed, config_snapshot or {})


def load_patches(manifest: Manifest, store: PatchStore, ids: Sequence[str] | None = None) -> list[ImagePatch]:
    entries = {e.id: e for e in manifest.patches()}
    wanted = ids if ids is not None else list(entries)
    return [load_patch(store.root / entries[i].path) for i in wanted]
