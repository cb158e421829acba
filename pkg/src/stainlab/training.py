"""Training loop, checkpoints and inference for the conditional denoiser."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from stainlab.autoencoder import Autoencoder
from stainlab.denoiser import DenoiserBundle, DenoiserConfig, FreezeMask, denoise, embed_target
from stainlab.diffusion import NoiseSchedule, diffusion_loss, forward_marginal, make_schedule, sample
from stainlab.errors import ArgumentError, ConfigError, SchemaError, TrainingError
from stainlab.features import to_patches, to_tensor
from stainlab.imagedata import ImagePatch, save_patch

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "stainlab-checkpoint"
CHECKPOINT_VERSION = 1


def default_schedule(T: int = 200) -> NoiseSchedule:
    """Linear schedule whose endpoints are rescaled so abar_T ~ 0 for short T."""
    scale = 1000.0 / T
    return make_schedule(T, "linear", 1e-4 * scale, min(0.02 * scale, 0.999))


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-2
    epochs: int = 3
    batch: int = 32
    decoder_frozen: bool = False
    seed: int = 0
    sample_every: int = 0
    sample_steps: int = 20
    grad_clip: float = 1.0
    lr_schedule: str = "constant"
    min_lr_ratio: float = 0.05

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError("lr must be > 0")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown lr_schedule {self.lr_schedule!r}")
        if not 0 <= self.min_lr_ratio <= 1:
            raise ConfigError("min_lr_ratio must be in [0, 1]")
        if self.epochs < 0 or self.batch < 1:
            raise ConfigError("epochs must be >= 0 and batch >= 1")


@dataclass
class TriadTensors:
    """Stacked training triads; ``latents`` caches the frozen encoder output."""

    source: torch.Tensor
    target: torch.Tensor
    transferred: torch.Tensor
    latents: torch.Tensor | None = None

    def __len__(self) -> int:
        return self.source.shape[0]

    def take(self, idx) -> "TriadTensors":
        return TriadTensors(self.source[idx], self.target[idx], self.transferred[idx],
                            None if self.latents is None else self.latents[idx])

    @classmethod
    def from_patches(cls, source: Sequence[ImagePatch], target: Sequence[ImagePatch],
                     transferred: Sequence[ImagePatch]) -> "TriadTensors":
        if not len(source) == len(target) == len(transferred):
            raise ArgumentError("triad lists differ in length")
        return cls(to_tensor(list(source)), to_tensor(list(target)), to_tensor(list(transferred)))


@torch.no_grad()
def encode_all(autoencoder: Autoencoder, x: torch.Tensor, batch: int = 256) -> torch.Tensor:
    return torch.cat([autoencoder.encode(x[i:i + batch]) for i in range(0, len(x), batch)])


def make_optimizer(bundle: DenoiserBundle, config: TrainConfig) -> torch.optim.AdamW:
    params = bundle.trainable_parameters()
    if not params:
        raise ConfigError("freeze mask leaves nothing to train")
    return torch.optim.AdamW(params, lr=config.lr, weight_decay=config.weight_decay)


def lr_at(config: TrainConfig, step: int, total_steps: int) -> float:
    """Learning rate for 0-based ``step``; cosine decays to ``lr * min_lr_ratio`` at the last step."""
    if config.lr_schedule == "constant" or total_steps <= 1:
        return config.lr
    frac = min(step / (total_steps - 1), 1.0)
    floor = config.lr * config.min_lr_ratio
    return floor + 0.5 * (config.lr - floor) * (1.0 + float(np.cos(np.pi * frac)))


def train_step(bundle: DenoiserBundle, batch: TriadTensors, schedule: NoiseSchedule, optimizer: torch.optim.Optimizer,
               config: TrainConfig, generator: torch.Generator) -> float:
    """One noise-prediction step: z_t = forward_marginal(E(p_u), t, eps); loss = MSE(eps, eps_hat)."""
    bundle.train()
    z0 = batch.latents if batch.latents is not None else encode_all(bundle.autoencoder, batch.transferred)
    b = z0.shape[0]
    t = torch.randint(1, schedule.T + 1, (b,), generator=generator)
    eps = torch.randn(z0.shape, generator=generator, dtype=z0.dtype)
    z_t = forward_marginal(z0, t, eps, schedule)
    eps_hat = denoise(bundle, z_t, t, batch.source, batch.target)
    loss = diffusion_loss(eps, eps_hat)
    if not torch.isfinite(loss):
        stats = {n: float(p.detach().abs().max()) for n, p in bundle.named_parameters() if p.requires_grad}
        worst = max(stats, key=stats.get)
        raise TrainingError(f"non-finite loss {loss.item()}; largest trainable weight {worst}={stats[worst]:.3g}")
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    if config.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(bundle.trainable_parameters(), config.grad_clip)
    optimizer.step()
    return float(loss.item())


def _rng_state(generator: torch.Generator) -> dict:
    return {"generator": generator.get_state(), "torch": torch.get_rng_state()}


def save_checkpoint(path: str | Path, bundle: DenoiserBundle, optimizer, config: TrainConfig,
                    schedule: NoiseSchedule, epoch: int, step: int, generator: torch.Generator) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "bundle_config": bundle.config_dict(),
        "state_dict": bundle.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "train_config": asdict(config),
        "schedule": schedule.to_dict(),
        "epoch": epoch,
        "step": step,
        "rng": _rng_state(generator),
        "trained": bundle.trained,
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path) -> dict:
    """Load a checkpoint and rebuild its bundle; returns the payload with ``bundle`` and ``schedule`` set."""
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise SchemaError(f"{path} is not a stainlab checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise SchemaError(f"checkpoint version {payload.get('version')} != {CHECKPOINT_VERSION}")
    bc = payload["bundle_config"]
    dc = dict(bc["denoiser"])
    dc["widths"] = tuple(dc["widths"])
    ae = Autoencoder(bc["downsample_factor"], bc["latent_channels"])
    bundle = DenoiserBundle(ae, DenoiserConfig(**dc), FreezeMask(dict(bc["freeze_mask"])))
    bundle.load_state_dict(payload["state_dict"])
    bundle.autoencoder.requires_grad_(False)
    bundle.trained = bool(payload.get("trained", False))
    payload["bundle"] = bundle
    payload["schedule"] = NoiseSchedule.from_dict(payload["schedule"])
    payload["train_config"] = TrainConfig(**payload["train_config"])
    return payload


class MetricsLog:
    """Line-delimited JSON; one record per optimizer step."""

    def __init__(self, path: str | Path | None):
        self.path = Path(path) if path is not None else None
        self.records: list[dict] = []
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def write(self, record: dict) -> None:
        self.records.append(record)
        if self.path is not None:
            with self.path.open("a") as fh:
                fh.write(json.dumps(record) + "\n")


def train(bundle: DenoiserBundle, data: TriadTensors, schedule: NoiseSchedule, config: TrainConfig,
          out_dir: str | Path | None = None, resume: str | Path | None = None, validation: TriadTensors | None = None,
          max_seconds: float | None = None) -> tuple[DenoiserBundle, list[dict]]:
    """Epoch loop over ``data``; returns the bundle and its per-step log records.

    Each epoch shuffles with a permutation derived from (seed, epoch), and all
    other randomness comes from one checkpointed generator, so resuming from
    an epoch checkpoint reproduces the uninterrupted run. With ``out_dir``
    set, writes ``metrics.jsonl``, ``checkpoints/epoch_XXX.pt`` and, every
    ``sample_every`` steps, a PNG sample of the first validation triad.
    """
    if len(data) == 0:
        raise ArgumentError("no training triads")
    out = Path(out_dir) if out_dir is not None else None
    bundle.set_freeze_mask(FreezeMask.default(config.decoder_frozen) if resume is None else bundle.freeze_mask)
    if config.epochs == 0:
        return bundle, []
    if data.latents is None:
        data.latents = encode_all(bundle.autoencoder, data.transferred)
    torch.manual_seed(config.seed)
    generator = torch.Generator().manual_seed(config.seed)
    optimizer = make_optimizer(bundle, config)
    start_epoch, step = 0, 0
    if resume is not None:
        ck = load_checkpoint(resume)
        bundle.load_state_dict(ck["state_dict"])
        optimizer.load_state_dict(ck["optimizer"])
        generator.set_state(ck["rng"]["generator"])
        torch.set_rng_state(ck["rng"]["torch"])
        start_epoch, step = ck["epoch"], ck["step"]
    metrics = MetricsLog(out / "metrics.jsonl" if out is not None else None)
    t0 = time.perf_counter()
    total_steps = config.epochs * -(-len(data) // config.batch)
    for epoch in range(start_epoch, config.epochs):
        perm = np.random.default_rng([config.seed, epoch]).permutation(len(data))
        for i in range(0, len(data), config.batch):
            for group in optimizer.param_groups:
                group["lr"] = lr_at(config, step, total_steps)
            loss = train_step(bundle, data.take(torch.from_numpy(perm[i:i + config.batch])), schedule, optimizer,
                              config, generator)
            step += 1
            rec = {"step": step, "epoch": epoch, "loss": loss, "lr": optimizer.param_groups[0]["lr"],
                   "wall_time": time.perf_counter() - t0}
            if config.sample_every and validation is not None and step % config.sample_every == 0:
                rec["val_mse"] = _validation_sample(bundle, schedule, validation, config, out, step)
            metrics.write(rec)
            if max_seconds is not None and time.perf_counter() - t0 > max_seconds:
                break
        bundle.trained = True
        if out is not None:
            save_checkpoint(out / "checkpoints" / f"epoch_{epoch + 1:03d}.pt", bundle, optimizer, config, schedule,
                            epoch + 1, step, generator)
        log.info("epoch %d done: step %d loss %.4f", epoch + 1, step, metrics.records[-1]["loss"])
        if max_seconds is not None and time.perf_counter() - t0 > max_seconds:
            log.warning("time budget of %.0fs reached after epoch %d", max_seconds, epoch + 1)
            break
    bundle.eval()
    return bundle, metrics.records


def _validation_sample(bundle, schedule, validation: TriadTensors, config: TrainConfig, out: Path | None,
                       step: int) -> float:
    v = validation.take(slice(0, 1))
    img = infer_tensor(bundle, schedule, v.source, v.target, config.sample_steps, seed=0)
    bundle.train()
    if out is not None:
        px = img[0].permute(1, 2, 0).double().numpy()
        save_patch(ImagePatch(px, id=f"val-step{step:06d}"), out / "samples" / f"step_{step:06d}.png")
    return float(((img - v.transferred) ** 2).mean())


@torch.no_grad()
def infer_tensor(bundle: DenoiserBundle, schedule: NoiseSchedule, source: torch.Tensor, target: torch.Tensor,
                 n_steps: int = 20, seed: int | Sequence[int] = 0) -> torch.Tensor:
    """Sample outputs for a batch of sources; targets may have a different side.

    The target tokens come from the target at its own resolution, so a small
    reference patch can steer a large tile.
    """
    if not 1 <= n_steps <= schedule.T:
        raise ArgumentError(f"n_steps must be in [1, {schedule.T}]")
    if source.shape[:2] != target.shape[:2]:
        raise ArgumentError(f"source {tuple(source.shape)} and target {tuple(target.shape)} batches differ")
    bundle.eval()
    ae = bundle.autoencoder
    context = embed_target(ae, bundle.projector, target)
    shape = (source.shape[0], *ae.latent_shape(source.shape[-1]))

    def eps_fn(z, t, _cond):
        return denoise(bundle, z, t, source, context=context)

    z0 = sample(eps_fn, schedule, n_steps, seed=seed, shape=shape)
    return ae.decode(z0).clamp(0.0, 1.0)


def infer(bundle: DenoiserBundle, schedule: NoiseSchedule, source, target, n_steps: int = 20, seed: int = 0):
    """Stain-normalize ``source`` towards ``target``; patches in, patches out.

    Accepts single patches or equal-length lists of them.
    """
    single = isinstance(source, ImagePatch)
    src = [source] if single else list(source)
    tgt = [target] if single else list(target)
    out = infer_tensor(bundle, schedule, to_tensor(src), to_tensor(tgt), n_steps, seed)
    patches = to_patches(out, src)
    return patches[0] if single else patches


def batched_infer(bundle, schedule, sources: Sequence[ImagePatch], targets: Sequence[ImagePatch], n_steps: int = 20,
                  seed: int = 0, batch: int = 64) -> list[ImagePatch]:
    out = []
    for i in range(0, len(sources), batch):
        out.extend(infer(bundle, schedule, list(sources[i:i + batch]), list(targets[i:i + batch]), n_steps,
                         seed + i))
    return out

