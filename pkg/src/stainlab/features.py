"""Fixed-seed convolutional feature networks.

Pretrained backbones are out of reach here, so both the curation/FID embedder
and the style-transfer extractor are small randomly initialized networks whose
weights depend only on ``seed``. Anything with the same call signature can be
plugged in instead.
"""

from __future__ import annotations

from typing import Protocol, Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from stainlab.imagedata import ImagePatch


def to_tensor(patches: Sequence[ImagePatch] | ImagePatch, dtype=torch.float32) -> torch.Tensor:
    """Patches (H x W x 3) -> batch tensor (B x 3 x H x W)."""
    if isinstance(patches, ImagePatch):
        patches = [patches]
    arr = np.stack([p.pixels for p in patches]).transpose(0, 3, 1, 2)
    return torch.from_numpy(np.ascontiguousarray(arr)).to(dtype)


def to_patches(batch: torch.Tensor, like: Sequence[ImagePatch] | None = None, ids: Sequence[str] | None = None):
    arr = batch.detach().cpu().double().clamp(0, 1).numpy().transpose(0, 2, 3, 1)
    out = []
    for i, px in enumerate(arr):
        if like is not None:
            out.append(like[i].with_pixels(px))
        else:
            out.append(ImagePatch.from_array(px, id=ids[i] if ids else ""))
    return out


def _seeded_init(module: nn.Module, seed: int):
    gen = torch.Generator().manual_seed(int(seed))
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
            with torch.no_grad():
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * np.sqrt(2.0 / fan_in))
                if m.bias is not None:
                    m.bias.zero_()


class FeatureExtractor(Protocol):
    n_layers: int

    def __call__(self, x: torch.Tensor) -> list[torch.Tensor]: ...


def _smooth_kernels(cout: int, cin: int, gen: torch.Generator) -> torch.Tensor:
    """Random 3x3 kernels blurred by a 3x3 binomial into 5x5, He-scaled.

    Pixel gradients pass through the adjoint of these filters, so keeping
    them low-pass keeps style-transfer updates free of checkerboard noise.
    """
    b = torch.tensor([1.0, 2.0, 1.0])
    blur = (b[:, None] * b[None, :]) / 16.0
    raw = torch.randn(cout * cin, 1, 3, 3, generator=gen)
    k = F.conv2d(F.pad(raw, (2, 2, 2, 2)), blur[None, None]).reshape(cout, cin, 5, 5)
    k = k / k.flatten(1).norm(dim=1)[:, None, None, None]
    return k * np.sqrt(2.0 / cin)


class PooledConvExtractor(nn.Module):
    """Smooth conv5x5 -> GELU -> 2x avg-pool stages; returns every pooled output.

    GELU keeps the loss differentiable everywhere in the pixels, which the
    finite-difference gradient check relies on.
    """

    def __init__(self, n_layers: int = 4, widths: Sequence[int] = (16, 32, 64, 64), seed: int = 0):
        super().__init__()
        if n_layers < 1 or n_layers > len(widths):
            raise ValueError(f"n_layers must be in [1, {len(widths)}]")
        self.n_layers = n_layers
        self.seed = seed
        chans = [3, *widths[:n_layers]]
        gen = torch.Generator().manual_seed(int(seed))
        self.convs = nn.ModuleList()
        for i in range(n_layers):
            conv = nn.Conv2d(chans[i], chans[i + 1], 5, padding=2, padding_mode="reflect")
            with torch.no_grad():
                conv.weight.copy_(_smooth_kernels(chans[i + 1], chans[i], gen))
                conv.bias.zero_()
            self.convs.append(conv)
        self.requires_grad_(False)
        self.eval()

    def forward(self, x: torch.Tensor, round_fn=None) -> list[torch.Tensor]:
        feats = []
        h = x - 0.5
        for conv in self.convs:
            h = F.avg_pool2d(F.gelu(conv(h)), 2)
            if round_fn is not None:
                h = round_fn(h)
            feats.append(h)
        return feats


class ConvEmbedder(nn.Module):
    """Four stride-2 conv layers plus global average pooling; d = 64 by default."""

    def __init__(self, dim: int = 64, seed: int = 0):
        super().__init__()
        self.dim = dim
        self.seed = seed
        self.net = nn.Sequential(
            nn.Conv2d(3, 16, 3, stride=2, padding=1), nn.GELU(),
            nn.Conv2d(16, 32, 3, stride=2, padding=1), nn.GELU(),
            nn.Conv2d(32, 64, 3, stride=2, padding=1), nn.GELU(),
            nn.Conv2d(64, dim, 3, stride=2, padding=1),
        )
        _seeded_init(self, seed)
        self.requires_grad_(False)
        self.eval()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x - 0.5).mean(dim=(2, 3))


@torch.no_grad()
def embed_patches(patches: Sequence[ImagePatch], embedder=None, batch: int = 64) -> np.ndarray:
    embedder = embedder if embedder is not None else ConvEmbedder()
    out = []
    for i in range(0, len(patches), batch):
        x = to_tensor(patches[i:i + batch])
        out.append(embedder(x).double().numpy())
    if not out:
        return np.zeros((0, getattr(embedder, "dim", 0)))
    return np.concatenate(out, axis=0)
