"""Conditional latent denoiser: time-conditional UNet with target cross-attention
and a zero-convolution source-control branch.

Layout for widths (32, 64, 128) on an 8x8 latent::

    conv_in -> enc0 (8x8) -> down -> enc1 (4x4) -> down -> enc2 (2x2)
    mid: res -> cross-attn -> res
    dec2 (2x2) -> up -> dec1 (4x4) -> up -> dec0 (8x8) -> cross-attn -> conv_out

The control branch is a trainable copy of conv_in..enc2 fed with
``z_t + h(p_s)``; each copied block's output enters the matching decoder
skip (plus the mid output) through a zero-initialized 1x1 convolution.
"""

from __future__ import annotations

import copy
import hashlib
import math
from dataclasses import asdict, dataclass, field

import torch
from torch import nn
from torch.nn import functional as F

from stainlab.autoencoder import Autoencoder
from stainlab.errors import ArgumentError, ConfigError

GROUPS = ("autoencoder", "unet_encoder", "unet_decoder", "cross_attention", "projector", "control")


@dataclass(frozen=True)
class DenoiserConfig:
    widths: tuple[int, ...] = (32, 64, 128)
    d_tau: int = 32
    d_attn: int = 32
    time_dim: int = 32
    control_mode: str = "add"  # "add" | "concat"
    out_init_scale: float = 0.1

    def __post_init__(self):
        if len(self.widths) < 1:
            raise ConfigError("widths must be non-empty")
        if self.control_mode not in ("add", "concat"):
            raise ConfigError(f"unknown control_mode {self.control_mode!r}")


def _norm(c: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(8, c), c)


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal embedding: [cos(t w_i), sin(t w_i)] with w_i = max_period^(-i/half)."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, temb_dim: int):
        super().__init__()
        self.norm1 = _norm(cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(temb_dim, cout)
        self.norm2 = _norm(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class CrossAttention(nn.Module):
    """x + W_O softmax(Q K^T / sqrt(d)) V with Q from x and K, V from the tokens."""

    def __init__(self, channels: int, d_context: int, d: int):
        super().__init__()
        self.d = d
        self.norm = _norm(channels)
        self.to_q = nn.Linear(channels, d, bias=False)
        self.to_k = nn.Linear(d_context, d, bias=False)
        self.to_v = nn.Linear(d_context, d, bias=False)
        self.to_out = nn.Linear(d, channels)

    def forward(self, x: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        q = self.to_q(self.norm(x).flatten(2).transpose(1, 2))
        k, v = self.to_k(context), self.to_v(context)
        attn = torch.softmax(q @ k.transpose(1, 2) / math.sqrt(self.d), dim=-1)
        out = self.to_out(attn @ v)
        return x + out.transpose(1, 2).reshape(b, c, h, w)


class UNetEncoder(nn.Module):
    """conv_in plus one ResBlock per level, downsampling between levels."""

    def __init__(self, in_ch: int, widths, temb_dim: int):
        super().__init__()
        self.conv_in = nn.Conv2d(in_ch, widths[0], 3, padding=1)
        self.blocks = nn.ModuleList()
        self.downs = nn.ModuleList()
        c = widths[0]
        for i, w in enumerate(widths):
            self.blocks.append(ResBlock(c, w, temb_dim))
            c = w
            if i + 1 < len(widths):
                self.downs.append(nn.Conv2d(c, c, 3, stride=2, padding=1))

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> list[torch.Tensor]:
        h = self.conv_in(x)
        skips = []
        for i, block in enumerate(self.blocks):
            h = block(h, temb)
            skips.append(h)
            if i < len(self.downs):
                h = self.downs[i](h)
        return skips


class UNet(nn.Module):
    def __init__(self, latent_channels: int, cfg: DenoiserConfig):
        super().__init__()
        w = cfg.widths
        temb_dim = 4 * cfg.time_dim
        self.time_dim = cfg.time_dim
        self.time_mlp = nn.Sequential(nn.Linear(cfg.time_dim, temb_dim), nn.SiLU(), nn.Linear(temb_dim, temb_dim))
        self.encoder = UNetEncoder(latent_channels, w, temb_dim)
        self.mid1 = ResBlock(w[-1], w[-1], temb_dim)
        self.mid_attn = CrossAttention(w[-1], cfg.d_tau, cfg.d_attn)
        self.mid2 = ResBlock(w[-1], w[-1], temb_dim)
        self.dec_blocks = nn.ModuleList()
        self.ups = nn.ModuleList()
        c = w[-1]
        for i in reversed(range(len(w))):
            self.dec_blocks.append(ResBlock(c + w[i], w[i], temb_dim))
            c = w[i]
            if i > 0:
                self.ups.append(nn.Conv2d(c, c, 3, padding=1))
        self.out_attn = CrossAttention(w[0], cfg.d_tau, cfg.d_attn)
        self.norm_out = _norm(w[0])
        self.conv_out = nn.Conv2d(w[0], latent_channels, 3, padding=1)
        with torch.no_grad():
            self.conv_out.weight.mul_(cfg.out_init_scale)
            self.conv_out.bias.zero_()

    def embed_time(self, t: torch.Tensor) -> torch.Tensor:
        return self.time_mlp(timestep_embedding(t, self.time_dim))

    def forward(self, z: torch.Tensor, temb: torch.Tensor, context: torch.Tensor,
                control: list[torch.Tensor] | None = None) -> torch.Tensor:
        skips = self.encoder(z, temb)
        h = self.mid2(self.mid_attn(self.mid1(skips[-1], temb), context), temb)
        if control is not None:
            skips = [s + c for s, c in zip(skips, control[:-1])]
            h = h + control[-1]
        for j, block in enumerate(self.dec_blocks):
            h = block(torch.cat([h, skips[-1 - j]], dim=1), temb)
            if j < len(self.ups):
                h = self.ups[j](F.interpolate(h, scale_factor=2.0, mode="nearest"))
        h = self.out_attn(h, context)
        return self.conv_out(F.silu(self.norm_out(h)))


def _zero_conv(c: int) -> nn.Conv2d:
    conv = nn.Conv2d(c, c, 1)
    nn.init.zeros_(conv.weight)
    nn.init.zeros_(conv.bias)
    return conv


class SourceEncoder(nn.Module):
    """h(p_s): pixels -> latent-grid feature map with d_E channels.

    Pixel-unshuffle keeps every source pixel; the convs mix them down.
    """

    def __init__(self, downsample_factor: int, out_ch: int, hidden: int = 64):
        super().__init__()
        self.f = downsample_factor
        self.net = nn.Sequential(
            nn.Conv2d(3 * downsample_factor**2, hidden, 1), nn.SiLU(),
            nn.Conv2d(hidden, hidden, 3, padding=1), nn.SiLU(),
            nn.Conv2d(hidden, out_ch, 3, padding=1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(F.pixel_unshuffle(x - 0.5, self.f))


class ControlBranch(nn.Module):
    def __init__(self, unet: UNet, latent_channels: int, downsample_factor: int, cfg: DenoiserConfig):
        super().__init__()
        self.mode = cfg.control_mode
        self.source_encoder = SourceEncoder(downsample_factor, latent_channels)
        self.blocks = copy.deepcopy(unet.encoder)
        if self.mode == "concat":
            old = self.blocks.conv_in
            new = nn.Conv2d(2 * latent_channels, old.out_channels, 3, padding=1)
            with torch.no_grad():
                new.weight.zero_()
                new.weight[:, :latent_channels] = old.weight
                new.bias.copy_(old.bias)
            self.blocks.conv_in = new
        w = cfg.widths
        self.zero_convs = nn.ModuleList([_zero_conv(c) for c in w] + [_zero_conv(w[-1])])

    def forward(self, z: torch.Tensor, temb: torch.Tensor, source: torch.Tensor) -> list[torch.Tensor]:
        hs = self.source_encoder(source)
        if hs.shape != z.shape:
            raise ArgumentError(f"source grid {tuple(hs.shape[1:])} does not match latent {tuple(z.shape[1:])}")
        x = z + hs if self.mode == "add" else torch.cat([z, hs], dim=1)
        feats = self.blocks(x, temb)
        feats = feats + [feats[-1]]
        return [zc(f) for zc, f in zip(self.zero_convs, feats)]


@dataclass
class FreezeMask:
    frozen: dict[str, bool] = field(default_factory=lambda: {
        "autoencoder": True, "unet_encoder": True, "unet_decoder": False,
        "cross_attention": False, "projector": False, "control": False,
    })

    def __post_init__(self):
        if set(self.frozen) != set(GROUPS):
            raise ConfigError(f"freeze mask must name exactly the groups {GROUPS}")

    @classmethod
    def default(cls, decoder_frozen: bool = False) -> "FreezeMask":
        m = cls()
        m.frozen["unet_decoder"] = decoder_frozen
        return m

    @classmethod
    def all_trainable(cls) -> "FreezeMask":
        return cls({g: g == "autoencoder" for g in GROUPS})


class DenoiserBundle(nn.Module):
    """Autoencoder, UNet, control branch and target projector under one freeze mask."""

    def __init__(self, autoencoder: Autoencoder, config: DenoiserConfig = DenoiserConfig(),
                 freeze_mask: FreezeMask | None = None, seed: int = 0):
        super().__init__()
        torch.manual_seed(seed)
        self.config = config
        self.autoencoder = autoencoder
        d_e = autoencoder.latent_channels
        self.unet = UNet(d_e, config)
        self.projector = nn.Linear(d_e, config.d_tau)
        self.control = ControlBranch(self.unet, d_e, autoencoder.downsample_factor, config)
        self.trained = False
        self.set_freeze_mask(freeze_mask or FreezeMask.default())

    def group_of(self, name: str) -> str:
        if name.startswith("autoencoder."):
            return "autoencoder"
        if name.startswith("projector."):
            return "projector"
        if name.startswith("control."):
            return "control"
        if name.startswith("unet."):
            if name.startswith(("unet.mid_attn.", "unet.out_attn.")):
                return "cross_attention"
            if name.startswith(("unet.encoder.", "unet.time_mlp.")):
                return "unet_encoder"
            return "unet_decoder"
        raise KeyError(name)

    def parameter_groups(self) -> dict[str, list[tuple[str, nn.Parameter]]]:
        groups: dict[str, list] = {g: [] for g in GROUPS}
        for name, p in self.named_parameters():
            groups[self.group_of(name)].append((name, p))
        return groups

    def set_freeze_mask(self, mask: FreezeMask) -> None:
        self.freeze_mask = mask
        for name, p in self.named_parameters():
            p.requires_grad_(not mask.frozen[self.group_of(name)])

    def trainable_parameters(self) -> list[nn.Parameter]:
        return [p for p in self.parameters() if p.requires_grad]

    def count_trainable(self) -> int:
        return sum(p.numel() for p in self.trainable_parameters())

    def group_checksums(self) -> dict[str, str]:
        """sha256 over the raw bytes of every parameter, per group."""
        out = {}
        for g, params in self.parameter_groups().items():
            h = hashlib.sha256()
            for name, p in params:
                h.update(name.encode())
                h.update(p.detach().contiguous().numpy().tobytes())
            out[g] = h.hexdigest()
        return out

    def train(self, mode: bool = True):
        super().train(mode)
        self.autoencoder.eval()
        return self

    def config_dict(self) -> dict:
        return {
            "denoiser": asdict(self.config),
            "downsample_factor": self.autoencoder.downsample_factor,
            "latent_channels": self.autoencoder.latent_channels,
            "freeze_mask": dict(self.freeze_mask.frozen),
        }


def embed_target(autoencoder: Autoencoder, projector: nn.Linear, target: torch.Tensor) -> torch.Tensor:
    """Encode targets, flatten the latent grid to (w*h) tokens of d_E, project to d_tau."""
    with torch.no_grad():
        z = autoencoder.encode(target)
    return projector(z.flatten(2).transpose(1, 2))


def denoise(bundle: DenoiserBundle, z_t: torch.Tensor, t, source: torch.Tensor, target: torch.Tensor | None = None,
            use_control: bool = True, context: torch.Tensor | None = None) -> torch.Tensor:
    """Predicted noise for ``z_t`` at timestep ``t`` given source and target images.

    ``context`` may carry precomputed target tokens. ``use_control=False``
    runs the backbone alone.
    """
    if z_t.ndim != 4:
        raise ArgumentError("z_t must be B x C x h x w")
    b = z_t.shape[0]
    if not isinstance(t, torch.Tensor):
        t = torch.as_tensor(t)
    t = t.reshape(-1).expand(b) if t.numel() == 1 else t.reshape(b)
    if context is None:
        if target is None:
            raise ArgumentError("need a target image or precomputed context")
        context = embed_target(bundle.autoencoder, bundle.projector, target)
    temb = bundle.unet.embed_time(t)
    control = None
    if use_control:
        if source is None or source.shape[0] != b:
            raise ArgumentError("source batch does not match z_t")
        control = bundle.control(z_t, temb, source)
    return bundle.unet(z_t, temb, context, control)
