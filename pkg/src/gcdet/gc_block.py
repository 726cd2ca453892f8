"""Global context block: softmax attention pooling + bottleneck transform + add.

One block pools a single context vector from all H*W positions (softmax over a
1x1 projection to one channel), squeezes it through a channel bottleneck
(1x1 conv -> layer norm -> ReLU -> 1x1 conv) and adds the result back onto
every spatial position. The final conv is zero-initialized so a freshly built
block is an exact identity, which makes insertion into an existing network a
no-op until training moves the weights.
"""

import math
from dataclasses import dataclass

import torch
from torch import nn

from .errors import ConfigError, NumericError

LN_EPS = 1e-5


@dataclass(frozen=True)
class GCConfig:
    """Channel count, bottleneck reduction ratio and fusion mode of one block."""

    channels: int
    ratio: int = 8
    fusion: str = "add"

    def __post_init__(self):
        if self.channels < 1:
            raise ConfigError(f"channels must be >= 1, got {self.channels}")
        if self.ratio < 1:
            raise ConfigError(f"ratio must be >= 1, got {self.ratio}")
        if self.fusion != "add":
            raise ConfigError(f"unsupported fusion mode {self.fusion!r}, only 'add'")

    @property
    def bottleneck_width(self) -> int:
        return max(1, self.channels // self.ratio)


def gc_param_count(channels: int, ratio: int) -> int:
    """Learnable parameter count of one block.

    attention projection (C*1 + 1) + squeeze conv (C*w + w) + layer norm (2w)
    + expand conv (w*C + C), with w = max(1, C // ratio). For C divisible by
    ratio this collapses to 2C^2/r + 3C/r + 2C + 1.
    """
    if channels < 1 or ratio < 1:
        raise ConfigError("channels and ratio must be positive integers")
    w = max(1, channels // ratio)
    attn = channels + 1
    squeeze = channels * w + w
    norm = 2 * w
    expand = w * channels + channels
    return attn + squeeze + norm + expand


class GlobalContextBlock(nn.Module):
    """Additive global-context attention over a (N, C, H, W) feature map."""

    def __init__(self, channels, ratio=8):
        super().__init__()
        self.cfg = GCConfig(channels, ratio)
        w = self.cfg.bottleneck_width
        self.attn = nn.Conv2d(channels, 1, kernel_size=1)
        self.squeeze = nn.Conv2d(channels, w, kernel_size=1)
        self.norm = nn.LayerNorm([w, 1, 1], eps=LN_EPS)
        self.act = nn.ReLU(inplace=True)
        self.expand = nn.Conv2d(w, channels, kernel_size=1)
        self.reset_parameters()

    def reset_parameters(self, generator=None):
        """Fan-in-scaled uniform init for attn/squeeze, zeros for the rest.

        The expand conv is zeroed so the block starts as an exact identity.
        """
        for conv in (self.attn, self.squeeze):
            fan_in = conv.in_channels
            bound = 1.0 / math.sqrt(fan_in)
            conv.weight.data.uniform_(-bound, bound, generator=generator)
            conv.bias.data.zero_()
        self.norm.weight.data.fill_(1.0)
        self.norm.bias.data.zero_()
        self.expand.weight.data.zero_()
        self.expand.bias.data.zero_()

    def attention_weights(self, x: torch.Tensor) -> torch.Tensor:
        """Softmax weights over the H*W positions of each sample, shape (N, H*W)."""
        n, _, h, w = x.shape
        return self.attn(x).view(n, h * w).softmax(dim=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4:
            raise ConfigError(f"expected (N, C, H, W) input, got shape {tuple(x.shape)}")
        if x.shape[1] != self.cfg.channels:
            raise ConfigError(
                f"block built for {self.cfg.channels} channels, input has {x.shape[1]}"
            )
        if not torch.isfinite(x).all():
            raise NumericError("non-finite values in global-context block input")
        n, c, h, w = x.shape
        alpha = self.attention_weights(x)  # (N, HW)
        ctx = torch.bmm(x.view(n, c, h * w), alpha.unsqueeze(2))  # (N, C, 1)
        ctx = ctx.view(n, c, 1, 1)
        y = self.expand(self.act(self.norm(self.squeeze(ctx))))
        return x + y

    def extra_repr(self):
        return f"channels={self.cfg.channels}, ratio={self.cfg.ratio}"
