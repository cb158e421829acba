"""Gatys-style neural style transfer and the triad factory built on it."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import torch

from stainlab.curation import CurationPlan, enumerate_triads
from stainlab.errors import ArgumentError, DecodeError, NumericalError
from stainlab.features import PooledConvExtractor, to_patches, to_tensor
from stainlab.imagedata import ImagePatch, Manifest, PatchStore, TriadRecord

log = logging.getLogger(__name__)

@dataclass(frozen=True)
class NstConfig:
    alpha: float = 1.0
    gamma: float = 10000.0
    n_iters: int = 300
    lr: float = 0.02
    precision_mode: str = "full"  # "full" | "mixed"
    # None -> 1 / sqrt(C*H*W) per layer
    gram_scale: float | None = None

    def __post_init__(self):
        if self.alpha < 0 or self.gamma < 0:
            raise ArgumentError("alpha and gamma must be >= 0")
        if self.n_iters < 1:
            raise ArgumentError("n_iters must be >= 1")
        if self.precision_mode not in ("full", "mixed"):
            raise ArgumentError(f"unknown precision_mode {self.precision_mode!r}")


def round_half(x: torch.Tensor) -> torch.Tensor:
    """Round to the nearest float16 value; out-of-range values become inf.

    The cast is differentiable (identity gradient), so this simulates
    half-precision storage inside an autograd graph on any hardware.
    """
    return x.to(torch.float16).to(x.dtype)


def _flat(fmap: torch.Tensor) -> torch.Tensor:
    # (..., C, H, W) -> (..., C, H*W)
    return fmap.reshape(*fmap.shape[:-2], -1)


def gram(fmap: torch.Tensor) -> torch.Tensor:
    """F F^T / (C H W) for a (C, H, W) map, batched over leading dims."""
    c, h, w = fmap.shape[-3:]
    f = _flat(fmap)
    return f @ f.transpose(-1, -2) / (c * h * w)


def gram_scaled(fmap: torch.Tensor, scale: float | None = None, half: bool = False) -> torch.Tensor:
    """(sF)(sF)^T / (s^2 C H W); equals ``gram`` in exact arithmetic.

    With ``half`` the scaled features and their product are rounded to float16,
    which is where an unscaled product would overflow.
    """
    c, h, w = fmap.shape[-3:]
    n = c * h * w
    s = 1.0 / math.sqrt(n) if scale is None else float(scale)
    f = _flat(fmap) * s
    if half:
        f = round_half(f)
    g = f @ f.transpose(-1, -2)
    if half:
        g = round_half(g)
    return g / (s * s * n)


def content_loss(fs: Sequence[torch.Tensor], fu: Sequence[torch.Tensor]) -> torch.Tensor:
    """Sum over layers of the per-layer element mean of squared differences."""
    return sum(((a - b) ** 2).mean(dim=(-3, -2, -1)) for a, b in zip(fs, fu))


def style_loss(ft: Sequence[torch.Tensor], fu: Sequence[torch.Tensor], gram_fn=gram) -> torch.Tensor:
    return sum(((gram_fn(a) - gram_fn(b)) ** 2).mean(dim=(-2, -1)) for a, b in zip(ft, fu))


def total_loss(fs, ft, fu, config: NstConfig = NstConfig(), gram_fn=gram) -> torch.Tensor:
    return config.alpha * content_loss(fs, fu) + config.gamma * style_loss(ft, fu, gram_fn)


def run_nst_batch(source: torch.Tensor, target: torch.Tensor, extractor=None, config: NstConfig = NstConfig(),
                  dtype=torch.float32, return_trace: bool = False):
    """Stylize every source with its paired target; B x 3 x H x W in [0, 1].

    Adam acts elementwise and the per-pair losses are summed, so a batch is
    the same computation as B independent runs.
    """
    extractor = extractor if extractor is not None else PooledConvExtractor()
    if source.shape != target.shape:
        raise ArgumentError(f"source {tuple(source.shape)} and target {tuple(target.shape)} differ")
    extractor = extractor.to(dtype)
    mixed = config.precision_mode == "mixed"
    round_fn = round_half if mixed else None
    if mixed:
        gram_fn = lambda f: gram_scaled(f, config.gram_scale, half=True)  # noqa: E731
    else:
        gram_fn = gram

    def feats(x):
        return extractor(x, round_fn) if round_fn is not None else extractor(x)

    src = source.to(dtype)
    with torch.no_grad():
        fs = [f.detach() for f in feats(src)]
        ft = [f.detach() for f in feats(target.to(dtype))]
    img = src.clone().requires_grad_(True)
    opt = torch.optim.Adam([img], lr=config.lr)
    trace = []
    for _ in range(config.n_iters):
        opt.zero_grad(set_to_none=False)
        per_pair = total_loss(fs, ft, feats(img), config, gram_fn)
        loss = per_pair.sum()
        if not torch.isfinite(loss):
            raise NumericalError(f"non-finite style-transfer loss at iteration {len(trace)}")
        trace.append(per_pair.detach().clone())
        loss.backward()
        opt.step()
        with torch.no_grad():
            img.clamp_(0.0, 1.0)
    out = img.detach()
    if return_trace:
        with torch.no_grad():
            trace.append(total_loss(fs, ft, feats(out), config, gram_fn).detach())
        return source + (out - src).to(source.dtype), torch.stack(trace)
    # report the change relative to the caller's precision so untouched pixels come back bit-exact
    return source + (out - src).to(source.dtype)


def run_nst(source: ImagePatch, target: ImagePatch, extractor=None, config: NstConfig = NstConfig(),
            dtype=torch.float32) -> ImagePatch:
    if source.side != target.side:
        raise ArgumentError(f"source side {source.side} != target side {target.side}")
    out = run_nst_batch(to_tensor(source, torch.float64), to_tensor(target), extractor, config, dtype)
    return to_patches(out, [source])[0]


def nst_config_hash(config: NstConfig, extractor=None) -> str:
    seed = getattr(extractor, "seed", 0) if extractor is not None else 0
    key = {
        "alpha": config.alpha,
        "gamma": config.gamma,
        "n_iters": config.n_iters,
        "lr": config.lr,
        "precision_mode": config.precision_mode,
        "extractor_seed": seed,
    }
    return hashlib.sha256(json.dumps(key, sort_keys=True).encode()).hexdigest()


def transferred_id(source_id: str, target_id: str) -> str:
    return f"u__{source_id}__{target_id}"


def generate_transferred_set(plan, patches: dict[str, ImagePatch], store: PatchStore, extractor=None,
                             config: NstConfig = NstConfig(), batch: int = 64, corpus_name: str = "triads",
                             seed: int = 0, progress=None) -> Manifest:
    """Stylize every (source, target) pair of ``plan`` into ``store``.

    ``plan`` is a ``CurationPlan`` (all source x target pairs) or an explicit
    list of (source_id, target_id) pairs. Pairs whose output already exists
    with the current config hash are skipped, so an interrupted run resumes
    where it stopped.
    """
    plan_dict = None
    if isinstance(plan, CurationPlan):
        pairs = enumerate_triads(plan)
        plan_dict = plan.to_dict()
    else:
        pairs = [tuple(p) for p in plan]
    if len(set(pairs)) != len(pairs):
        raise ArgumentError("duplicate (source, target) pairs")
    missing = {i for pair in pairs for i in pair} - set(patches)
    if missing:
        raise ArgumentError(f"unknown patch ids: {sorted(missing)[:5]}")
    extractor = extractor if extractor is not None else PooledConvExtractor()
    h = nst_config_hash(config, extractor)
    todo = []
    for s, t in pairs:
        uid = transferred_id(s, t)
        if store.exists(uid):
            try:
                if store.meta(uid).get("stainlab.extra.nst_config_hash") == h:
                    continue
            except DecodeError:
                pass
        todo.append((s, t))
    log.info("style transfer: %d of %d pairs to compute", len(todo), len(pairs))
    done = 0
    for i in range(0, len(todo), batch):
        chunk = todo[i:i + batch]
        src = to_tensor([patches[s] for s, _ in chunk])
        tgt = to_tensor([patches[t] for _, t in chunk])
        out = run_nst_batch(src, tgt, extractor, config)
        for (s, t), px in zip(chunk, to_patches(out, ids=[transferred_id(s, t) for s, t in chunk])):
            store.put(ImagePatch(px.pixels, id=px.id, magnification=patches[s].magnification),
                      extra={"nst_config_hash": h})
        done += len(chunk)
        if progress is not None:
            progress(done, len(todo))
    records = [TriadRecord(s, t, transferred_id(s, t), h) for s, t in pairs]
    snapshot = {"nst": asdict(config), "extractor_seed": getattr(extractor, "seed", 0)}
    return Manifest(corpus_name, records, seed, snapshot, plan=plan_dict)
