"""Small KL-regularized convolutional autoencoder that defines the latent space."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from stainlab.errors import ArgumentError, TrainingError
from stainlab.features import to_tensor
from stainlab.imagedata import ImagePatch

log = logging.getLogger(__name__)

_WIDTHS = (32, 64, 128, 128)


@dataclass(frozen=True)
class AutoencoderConfig:
    downsample_factor: int = 8
    latent_channels: int = 4
    epochs: int = 20
    batch: int = 32
    lr: float = 2e-3
    kl_weight: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        f = self.downsample_factor
        if f < 2 or f & (f - 1) or f > 2 ** len(_WIDTHS):
            raise ArgumentError(f"downsample_factor must be a power of two in [2, {2 ** len(_WIDTHS)}]")
        if self.latent_channels < 1:
            raise ArgumentError("latent_channels must be >= 1")


def _stage(cin: int, cout: int) -> list[nn.Module]:
    return [nn.Conv2d(cin, cout, 3, padding=1), nn.GELU(), nn.Conv2d(cout, cout, 3, padding=1), nn.GELU()]


class Autoencoder(nn.Module):
    """Encoder to a (d_E, H/f, W/f) latent and a sigmoid-output decoder.

    ``encode`` returns the posterior mean multiplied by ``latent_scale`` so
    diffusion operates on roughly unit-variance latents; ``decode`` undoes
    the scaling.
    """

    def __init__(self, downsample_factor: int = 8, latent_channels: int = 4):
        super().__init__()
        AutoencoderConfig(downsample_factor, latent_channels)
        self.downsample_factor = downsample_factor
        self.latent_channels = latent_channels
        widths = _WIDTHS[: int(math.log2(downsample_factor))]
        enc: list[nn.Module] = [nn.Conv2d(3, widths[0], 3, padding=1), nn.GELU()]
        c = widths[0]
        for w in widths:
            enc += [nn.Conv2d(c, w, 3, stride=2, padding=1), nn.GELU(), nn.Conv2d(w, w, 3, padding=1), nn.GELU()]
            c = w
        enc.append(nn.Conv2d(c, 2 * latent_channels, 1))
        self.encoder = nn.Sequential(*enc)
        dec: list[nn.Module] = [nn.Conv2d(latent_channels, widths[-1], 3, padding=1), nn.GELU()]
        c = widths[-1]
        for w in reversed(widths):
            dec += [nn.Upsample(scale_factor=2, mode="nearest"), *_stage(c, w)]
            c = w
        dec.append(nn.Conv2d(c, 3, 3, padding=1))
        self.decoder = nn.Sequential(*dec)
        self.register_buffer("latent_scale", torch.tensor(1.0))

    def posterior(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if x.shape[-1] % self.downsample_factor or x.shape[-2] % self.downsample_factor:
            raise ArgumentError(f"image side {tuple(x.shape[-2:])} not divisible by {self.downsample_factor}")
        mean, logvar = self.encoder(x - 0.5).chunk(2, dim=1)
        return mean, logvar.clamp(-30.0, 20.0)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        return self.posterior(x)[0] * self.latent_scale

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.decoder(z / self.latent_scale))

    def forward(self, x: torch.Tensor, generator: torch.Generator | None = None):
        mean, logvar = self.posterior(x)
        noise = torch.randn(mean.shape, generator=generator, dtype=mean.dtype)
        z = mean + noise * torch.exp(0.5 * logvar)
        return torch.sigmoid(self.decoder(z)), mean, logvar

    def latent_shape(self, side: int) -> tuple[int, int, int]:
        return (self.latent_channels, side // self.downsample_factor, side // self.downsample_factor)


def autoencoder_loss(x, recon, mean, logvar, kl_weight: float) -> torch.Tensor:
    kl = 0.5 * (mean**2 + logvar.exp() - 1.0 - logvar).mean()
    return F.mse_loss(recon, x) + kl_weight * kl


def train_autoencoder(corpus: Sequence[ImagePatch] | torch.Tensor, config: AutoencoderConfig = AutoencoderConfig(),
                      return_history: bool = False):
    """Fit an ``Autoencoder`` on ``corpus`` and calibrate its latent scale.

    Returns the model (frozen, eval mode) and, optionally, the per-epoch mean
    training loss.
    """
    x = corpus if isinstance(corpus, torch.Tensor) else to_tensor(list(corpus))
    if len(x) == 0:
        raise ArgumentError("empty training corpus")
    torch.manual_seed(config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    model = Autoencoder(config.downsample_factor, config.latent_channels)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(config.epochs, 1))
    history = []
    model.train()
    t0 = time.perf_counter()
    for epoch in range(config.epochs):
        perm = torch.randperm(len(x), generator=gen)
        total, count = 0.0, 0
        for i in range(0, len(x), config.batch):
            xb = x[perm[i:i + config.batch]]
            recon, mean, logvar = model(xb, gen)
            loss = autoencoder_loss(xb, recon, mean, logvar, config.kl_weight)
            if not torch.isfinite(loss):
                raise TrainingError(f"autoencoder loss became {loss.item()} at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(xb)
            count += len(xb)
        sched.step()
        history.append(total / count)
        log.info("autoencoder epoch %d loss %.5f (%.1fs)", epoch, history[-1], time.perf_counter() - t0)
    model.eval()
    with torch.no_grad():
        means = torch.cat([model.posterior(x[i:i + 256])[0] for i in range(0, len(x), 256)])
        std = float(means.std())
        model.latent_scale.fill_(1.0 / std if std > 0 else 1.0)
    model.requires_grad_(False)
    return (model, history) if return_history else model


@torch.no_grad()
def reconstruct(model: Autoencoder, patches: Sequence[ImagePatch]) -> np.ndarray:
    """Decode(encode(p)) for each patch, as an N x H x W x 3 array."""
    x = to_tensor(list(patches))
    out = model.decode(model.encode(x))
    return out.double().numpy().transpose(0, 2, 3, 1)
