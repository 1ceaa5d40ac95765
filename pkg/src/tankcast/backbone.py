"""Nested-skip image encoder-decoder with embedding conditioning on the decoder side."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .attention import MultiHeadAttention
from .errors import InvalidArgument

LOSS_KINDS = ("bce", "mse", "focal", "kldiv")


@dataclass(frozen=True)
class BackboneConfig:
    in_channels: int = 6
    base_width: int = 16
    depth: int = 3
    nested: bool = True
    n_conditioned: int = 1
    cond_heads: int = 4

    def __post_init__(self):
        if self.depth < 1:
            raise InvalidArgument("depth must be >= 1")
        if not 0 <= self.n_conditioned <= self.depth:
            raise InvalidArgument("conditioned layer count must lie in [0, depth]")

    def widths(self) -> List[int]:
        return [self.base_width * 2 ** i for i in range(self.depth + 1)]


def _block(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1, bias=False), nn.BatchNorm2d(cout), nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1, bias=False), nn.BatchNorm2d(cout), nn.ReLU(inplace=True))


class _Down(nn.Sequential):
    def __init__(self, cin, cout):
        super().__init__(nn.Conv2d(cin, cout, 3, stride=2, padding=1, bias=False),
                         nn.BatchNorm2d(cout), nn.ReLU(inplace=True), _block(cout, cout))


class _Up(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class ConditioningAttention(nn.Module):
    """Cross-attention from every spatial position of a feature map to the
    conditioning vector, taken as a key/value sequence of length one; the
    result is added back onto the map."""

    def __init__(self, channels: int, cond_dim: int, n_heads: int = 4):
        super().__init__()
        heads = n_heads if channels % n_heads == 0 else 1
        self.attn = MultiHeadAttention(channels, heads, kv_dim=cond_dim)

    def forward(self, h, z):
        b, c, hh, ww = h.shape
        q = h.flatten(2).transpose(1, 2)                 # (B, HW, C)
        kv = z[:, None, :]                               # (B, 1, D)
        out, _ = self.attn(q, kv, kv)
        return h + out.transpose(1, 2).reshape(b, c, hh, ww)


class NestedUNet(nn.Module):
    """U-Net++ style encoder-decoder returning (B, H, W) logits.

    Node (i, j) sits at resolution level i and decoder column j. With
    ``nested=False`` only the plain U-Net path (i + j == depth) is built.
    """

    def __init__(self, config: BackboneConfig, cond_dim: Optional[int] = None):
        super().__init__()
        self.config = config
        w = config.widths()
        d = config.depth
        self.stem = _block(config.in_channels, w[0])
        self.down = nn.ModuleList(_Down(w[i - 1], w[i]) for i in range(1, d + 1))
        self.up = nn.ModuleDict()
        self.nodes = nn.ModuleDict()
        for j in range(1, d + 1):
            for i in range(0, d - j + 1):
                if not config.nested and i + j != d:
                    continue
                n_skip = j if config.nested else 1
                self.up[f"{i}_{j}"] = _Up(w[i + 1], w[i])
                self.nodes[f"{i}_{j}"] = _block((n_skip + 1) * w[i], w[i])
        self.head = nn.Conv2d(w[0], 1, 1)
        self.conditioned = [(d - k, k) for k in range(1, config.n_conditioned + 1)]
        self.cond = nn.ModuleDict()
        if cond_dim:
            for i, j in self.conditioned:
                self.cond[f"{i}_{j}"] = ConditioningAttention(w[i], cond_dim, config.cond_heads)

    def forward(self, image, z=None):
        d = self.config.depth
        b, c, h, w = image.shape
        if c != self.config.in_channels:
            raise InvalidArgument(f"expected {self.config.in_channels} channels, got {c}")
        if h % 2 ** d or w % 2 ** d:
            raise InvalidArgument(f"image {h}x{w} not divisible by 2**{d}")
        if self.cond and (z is None or z.shape[-1] != self.cond_dim):
            raise InvalidArgument("conditioning vector missing or of the wrong size")
        x: Dict[Tuple[int, int], torch.Tensor] = {(0, 0): self.stem(image)}
        for i in range(1, d + 1):
            x[(i, 0)] = self.down[i - 1](x[(i - 1, 0)])
        for j in range(1, d + 1):
            for i in range(0, d - j + 1):
                key = f"{i}_{j}"
                if key not in self.nodes:
                    continue
                skips = ([x[(i, k)] for k in range(j)] if self.config.nested else [x[(i, 0)]])
                node = self.nodes[key](torch.cat(skips + [self.up[key](x[(i + 1, j - 1)])], 1))
                if key in self.cond:
                    node = self.cond[key](node, z)
                x[(i, j)] = node
        return self.head(x[(0, d)])[:, 0]

    @property
    def cond_dim(self) -> Optional[int]:
        for m in self.cond.values():
            return m.attn.k.in_features
        return None


def backbone_forward(image, z_final, net: NestedUNet):
    return net(image, z_final)


def inflate_weights(weight: torch.Tensor, c_in_new: int) -> torch.Tensor:
    """Repeat input-channel slices cyclically up to ``c_in_new`` channels and
    rescale by c_in_old / c_in_new."""
    c_old = weight.shape[1]
    if c_in_new < c_old:
        raise InvalidArgument(f"cannot shrink {c_old} input channels to {c_in_new}")
    idx = torch.arange(c_in_new) % c_old
    return weight[:, idx] * (c_old / c_in_new)


def inflate_conv(conv: nn.Conv2d, c_in_new: int) -> nn.Conv2d:
    """Copy of ``conv`` accepting ``c_in_new`` input channels."""
    if conv.groups != 1:
        raise InvalidArgument("grouped convolutions are not supported")
    new = nn.Conv2d(c_in_new, conv.out_channels, conv.kernel_size, conv.stride, conv.padding,
                    conv.dilation, bias=conv.bias is not None, padding_mode=conv.padding_mode,
                    device=conv.weight.device, dtype=conv.weight.dtype)
    with torch.no_grad():
        new.weight.copy_(inflate_weights(conv.weight, c_in_new))
        if conv.bias is not None:
            new.bias.copy_(conv.bias)
    return new


def heatmap_activation(logits: torch.Tensor, loss_kind: str) -> torch.Tensor:
    """Per-pixel sigmoid, or a softmax over all pixels for ``kldiv``."""
    if loss_kind not in LOSS_KINDS:
        raise InvalidArgument(f"unknown loss kind {loss_kind!r}")
    if loss_kind == "kldiv":
        flat = logits.flatten(-2)
        return torch.softmax(flat, dim=-1).view_as(logits)
    return torch.sigmoid(logits)
