"""A small U-shaped denoiser conditioned on timestep + concept vector.

The conditioning vector (sinusoidal timestep encoding plus the selected
concept embedding, both width D) is projected per block and added to the
feature maps. Desk-scale default: 32x32 inputs, three resolutions.
"""

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F


@dataclass(frozen=True)
class DenoiserConfig:
    image_size: int = 32
    base_channels: int = 48
    channel_mults: tuple = (1, 2, 2)
    cond_width: int = 128  # = embedding width D; the two vectors are summed
    param_seed: int = 0

    def to_dict(self):
        return {
            "image_size": self.image_size,
            "base_channels": self.base_channels,
            "channel_mults": list(self.channel_mults),
            "cond_width": self.cond_width,
            "param_seed": self.param_seed,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            image_size=d["image_size"],
            base_channels=d["base_channels"],
            channel_mults=tuple(d["channel_mults"]),
            cond_width=d["cond_width"],
            param_seed=d["param_seed"],
        )


def sinusoidal_encoding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Standard sin/cos positional encoding of integer timesteps, width dim."""
    half = dim // 2
    freqs = torch.exp(
        -np.log(10000.0) * torch.arange(half, dtype=t.dtype, device=t.device) / (half - 1)
    )
    args = t[:, None] * freqs[None, :]
    enc = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2 == 1:
        enc = F.pad(enc, (0, 1))
    return enc


def _groups(ch: int) -> int:
    g = 8
    while ch % g:
        g //= 2
    return g


class ResBlock(nn.Module):
    def __init__(self, in_ch, out_ch, cond_width):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.cond_proj = nn.Linear(cond_width, out_ch)
        self.norm2 = nn.GroupNorm(_groups(out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, cond):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.cond_proj(cond)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class ConditionalDenoiser(nn.Module):
    """Predicts the noise in x_t given (x_t, t, concept vector)."""

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        torch.manual_seed(cfg.param_seed)
        D = cfg.cond_width
        chans = [cfg.base_channels * m for m in cfg.channel_mults]

        self.cond_mlp = nn.Sequential(nn.Linear(D, D), nn.SiLU(), nn.Linear(D, D))
        self.stem = nn.Conv2d(3, chans[0], 3, padding=1)

        self.down_blocks = nn.ModuleList()
        self.downsamplers = nn.ModuleList()
        for i, ch in enumerate(chans):
            in_ch = chans[max(0, i - 1)] if i > 0 else chans[0]
            self.down_blocks.append(ResBlock(in_ch, ch, D))
            self.downsamplers.append(
                nn.Conv2d(ch, ch, 3, stride=2, padding=1) if i < len(chans) - 1 else nn.Identity()
            )

        self.middle = ResBlock(chans[-1], chans[-1], D)

        # Upward pass level i consumes cat(h, skip_i) and, for i > 0, halves
        # the channel count while doubling the resolution.
        self.up_blocks = nn.ModuleList()
        self.up_convs = nn.ModuleList()
        for i in reversed(range(len(chans))):
            self.up_blocks.append(ResBlock(chans[i] * 2, chans[i], D))
            self.up_convs.append(
                nn.ConvTranspose2d(chans[i], chans[i - 1], 4, stride=2, padding=1)
                if i > 0
                else nn.Identity()
            )

        self.out_norm = nn.GroupNorm(_groups(chans[0]), chans[0])
        self.out_conv = nn.Conv2d(chans[0], 3, 3, padding=1)

    def forward(self, x, t, concept_vec):
        """x: (B,3,H,W); t: (B,) float timesteps; concept_vec: (B,D)."""
        cond = self.cond_mlp(sinusoidal_encoding(t, self.cfg.cond_width) + concept_vec)
        h = self.stem(x)
        skips = []
        for block, down in zip(self.down_blocks, self.downsamplers):
            h = block(h, cond)
            skips.append(h)
            h = down(h)
        h = self.middle(h, cond)
        for j, i in enumerate(reversed(range(len(skips)))):
            h = self.up_blocks[j](torch.cat([h, skips[i]], dim=1), cond)
            h = self.up_convs[j](h)
        return self.out_conv(F.silu(self.out_norm(h)))
