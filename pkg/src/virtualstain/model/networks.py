"""U-Net generator and PatchGAN discriminator."""

from __future__ import annotations

import functools
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass(frozen=True)
class GeneratorConfig:
    in_channels: int = 3
    out_channels: int = 3
    base_width: int = 64
    depth: int = 8
    norm: str = "instance"
    use_dropout: bool = True
    input_size: int = 256

    def __post_init__(self):
        if self.norm not in ("batch", "instance"):
            raise ValueError("norm must be 'batch' or 'instance'")
        if self.depth < 2 or self.base_width < 1:
            raise ValueError("depth must be >= 2 and base_width >= 1")
        if padded_size(self.input_size, self.depth) is None:
            raise ValueError(f"input size {self.input_size} cannot be reflect-padded "
                             f"to a multiple of 2**{self.depth}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class DiscriminatorConfig:
    in_channels: int = 6  # conditioning input + candidate
    base_width: int = 64
    n_layers: int = 3  # C64-C128-C256-C512 + head -> 70x70 receptive field
    norm: str = "instance"

    def __post_init__(self):
        if self.norm not in ("batch", "instance"):
            raise ValueError("norm must be 'batch' or 'instance'")
        if self.n_layers < 1 or self.base_width < 1:
            raise ValueError("n_layers and base_width must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def padded_size(size: int, depth: int) -> int | None:
    """Smallest multiple of 2**depth >= size reachable by reflect padding."""
    m = 2 ** depth
    target = -(-size // m) * m
    pad = target - size
    # reflect padding needs each side's pad < size
    if pad and (pad - pad // 2) >= size:
        return None
    return target


def _norm_layer(kind: str):
    if kind == "batch":
        return functools.partial(nn.BatchNorm2d, affine=True, track_running_stats=True)
    return functools.partial(nn.InstanceNorm2d, affine=False, track_running_stats=False)


class UnetBlock(nn.Module):
    """One encoder/decoder level wrapping an inner block, with a skip connection."""

    def __init__(self, outer_nc, inner_nc, input_nc=None, submodule=None,
                 outermost=False, innermost=False, norm_layer=nn.InstanceNorm2d,
                 use_dropout=False):
        super().__init__()
        self.outermost = outermost
        use_bias = norm_layer.func == nn.InstanceNorm2d if isinstance(norm_layer, functools.partial) \
            else norm_layer == nn.InstanceNorm2d
        input_nc = outer_nc if input_nc is None else input_nc
        downconv = nn.Conv2d(input_nc, inner_nc, kernel_size=4, stride=2, padding=1, bias=use_bias)
        downrelu = nn.LeakyReLU(0.2, True)
        downnorm = norm_layer(inner_nc)
        uprelu = nn.ReLU(True)
        upnorm = norm_layer(outer_nc)

        if outermost:
            upconv = nn.ConvTranspose2d(inner_nc * 2, outer_nc, kernel_size=4, stride=2, padding=1)
            model = [downconv, submodule, uprelu, upconv, nn.Tanh()]
        elif innermost:
            upconv = nn.ConvTranspose2d(inner_nc, outer_nc, kernel_size=4, stride=2, padding=1, bias=use_bias)
            model = [downrelu, downconv, uprelu, upconv, upnorm]
        else:
            upconv = nn.ConvTranspose2d(inner_nc * 2, outer_nc, kernel_size=4, stride=2, padding=1, bias=use_bias)
            model = [downrelu, downconv, downnorm, submodule, uprelu, upconv, upnorm]
            if use_dropout:
                model.append(nn.Dropout(0.5))
        self.model = nn.Sequential(*model)

    def forward(self, x):
        if self.outermost:
            return self.model(x)
        return torch.cat([x, self.model(x)], 1)


class UnetGenerator(nn.Module):
    """Encoder-decoder with skips; maps unit-range input to unit-range output."""

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.cfg = cfg
        ngf = cfg.base_width
        norm = _norm_layer(cfg.norm)
        widths = [min(ngf * 2 ** i, ngf * 8) for i in range(cfg.depth)]
        # widths[i] is the channel count after the (i+1)-th downsampling
        block = UnetBlock(widths[-2], widths[-1], norm_layer=norm, innermost=True)
        for level in range(cfg.depth - 2, 0, -1):
            # dropout on the three innermost non-bottleneck decoder levels
            dropout = cfg.use_dropout and level >= cfg.depth - 4 and widths[level] == ngf * 8
            block = UnetBlock(widths[level - 1], widths[level], submodule=block,
                              norm_layer=norm, use_dropout=dropout)
        self.model = UnetBlock(cfg.out_channels, widths[0], input_nc=cfg.in_channels,
                               submodule=block, outermost=True, norm_layer=norm)

    def forward(self, x):
        h, w = x.shape[-2:]
        th, tw = padded_size(h, self.cfg.depth), padded_size(w, self.cfg.depth)
        if th is None or tw is None:
            raise ValueError(f"input {h}x{w} incompatible with depth {self.cfg.depth}")
        if (th, tw) != (h, w):
            top, left = (th - h) // 2, (tw - w) // 2
            x = F.pad(x, (left, tw - w - left, top, th - h - top), mode="reflect")
        else:
            top = left = 0
        y = self.model(2.0 * x - 1.0)
        y = 0.5 * (y + 1.0)
        return y[..., top:top + h, left:left + w]


class PatchDiscriminator(nn.Module):
    """PatchGAN scoring overlapping patches of the (input, candidate) pair; outputs logits."""

    def __init__(self, cfg: DiscriminatorConfig):
        super().__init__()
        self.cfg = cfg
        norm = _norm_layer(cfg.norm)
        use_bias = cfg.norm == "instance"
        ndf = cfg.base_width
        layers = [nn.Conv2d(cfg.in_channels, ndf, 4, 2, 1), nn.LeakyReLU(0.2, True)]
        mult = 1
        for n in range(1, cfg.n_layers):
            prev, mult = mult, min(2 ** n, 8)
            layers += [nn.Conv2d(ndf * prev, ndf * mult, 4, 2, 1, bias=use_bias),
                       norm(ndf * mult), nn.LeakyReLU(0.2, True)]
        prev, mult = mult, min(2 ** cfg.n_layers, 8)
        layers += [nn.Conv2d(ndf * prev, ndf * mult, 4, 1, 1, bias=use_bias),
                   norm(ndf * mult), nn.LeakyReLU(0.2, True)]
        layers += [nn.Conv2d(ndf * mult, 1, 4, 1, 1)]
        self.model = nn.Sequential(*layers)

    def forward(self, condition, candidate):
        return self.model(torch.cat([condition, candidate], 1))


def score_map_size(size: int, n_layers: int = 3) -> int:
    """Discriminator output side length from conv arithmetic (kernel 4, padding 1)."""
    strides = [2] * n_layers + [1, 1]
    for s in strides:
        size = (size + 2 - 4) // s + 1
    return size


def init_weights(net: nn.Module, gain: float = 0.02) -> None:
    for m in net.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.normal_(m.weight, 0.0, gain)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.normal_(m.weight, 1.0, gain)
            nn.init.zeros_(m.bias)


def build_generator(cfg: GeneratorConfig = GeneratorConfig(), seed: int = 0) -> UnetGenerator:
    gen = torch.Generator().manual_seed(seed)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(torch.randint(0, 2**31 - 1, (1,), generator=gen)))
        net = UnetGenerator(cfg)
        init_weights(net)
    return net


def build_discriminator(cfg: DiscriminatorConfig = DiscriminatorConfig(), seed: int = 0) -> PatchDiscriminator:
    gen = torch.Generator().manual_seed(seed + 1)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(torch.randint(0, 2**31 - 1, (1,), generator=gen)))
        net = PatchDiscriminator(cfg)
        init_weights(net)
    return net
