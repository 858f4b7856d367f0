"""Injection network, guidance extractor and patch discriminator."""

import torch
import torch.nn as nn

from ..errors import InputError


def init_weights(module):
    name = module.__class__.__name__
    if "Conv" in name:
        nn.init.normal_(module.weight, 0.0, 0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif "BatchNorm" in name or ("InstanceNorm" in name and module.affine):
        nn.init.normal_(module.weight, 1.0, 0.02)
        nn.init.zeros_(module.bias)


class InjectionNet(nn.Module):
    """Five-level U-Net: 4x4 stride-2 convs down, 4x4 stride-2 transposed convs up.

    Input is the clean image concatenated with its trigger pattern (6 channels);
    the sigmoid head keeps the poisoned image in [0, 1].
    """

    depth = 5

    def __init__(self, in_channels=6, out_channels=3, ngf=64):
        super().__init__()
        widths = [ngf, ngf * 2, ngf * 4, ngf * 8, ngf * 8]
        self.down = nn.ModuleList()
        prev = in_channels
        for w in widths:
            self.down.append(nn.Sequential(
                nn.Conv2d(prev, w, 4, 2, 1, bias=False),
                nn.BatchNorm2d(w),
                nn.LeakyReLU(0.2, inplace=True),
            ))
            prev = w
        self.up = nn.ModuleList()
        skips = widths[::-1][1:] + [0]
        outs = widths[::-1][1:] + [out_channels]
        for i, (skip, out) in enumerate(zip(skips, outs)):
            last = i == len(outs) - 1
            self.up.append(nn.Sequential(
                nn.ConvTranspose2d(prev, out, 4, 2, 1, bias=False),
                nn.BatchNorm2d(out),
                nn.Sigmoid() if last else nn.ReLU(inplace=True),
            ))
            prev = out + skip

    def forward(self, x):
        h, w = x.shape[-2:]
        step = 2 ** self.depth
        if h % step or w % step:
            raise InputError(f"injection network needs H, W divisible by {step}, got {h}x{w}")
        feats = []
        for layer in self.down:
            x = layer(x)
            feats.append(x)
        feats = feats[:-1][::-1]
        for i, layer in enumerate(self.up):
            x = layer(x)
            if i < len(feats):
                x = torch.cat([x, feats[i]], dim=1)
        return x


class ResBlock(nn.Module):
    def __init__(self, width):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(width, width, 3, 1, 1),
            nn.InstanceNorm2d(width, affine=True),
            nn.ReLU(inplace=True),
            nn.Conv2d(width, width, 3, 1, 1),
            nn.InstanceNorm2d(width, affine=True),
        )
        self.act = nn.ReLU(inplace=True)

    def forward(self, x):
        return self.act(x + self.body(x))


def _conv_in_relu(cin, cout, k, s, transpose=False):
    conv = nn.ConvTranspose2d(cin, cout, k, s, 1) if transpose else nn.Conv2d(cin, cout, k, s, k // 2)
    return nn.Sequential(conv, nn.InstanceNorm2d(cout, affine=True), nn.ReLU(inplace=True))


class GuidanceExtractor(nn.Module):
    """Encoder (one stride-2 level), residual trunk, mirrored decoder; output shape == input shape.

    The final 1x1 projection is left unnormalised and linear so the all-zero
    clean map is reachable.
    """

    def __init__(self, channels=3, width=128, n_res=7):
        super().__init__()
        self.encoder = nn.Sequential(
            _conv_in_relu(channels, width, 3, 1),
            _conv_in_relu(width, width, 3, 1),
            _conv_in_relu(width, width, 3, 2),
        )
        self.trunk = nn.Sequential(*[ResBlock(width) for _ in range(n_res)])
        self.decoder = nn.Sequential(
            _conv_in_relu(width, width, 4, 2, transpose=True),
            _conv_in_relu(width, width, 3, 1),
            nn.Conv2d(width, channels, 1, 1, 0),
        )

    def forward(self, x):
        if x.shape[-2] % 2 or x.shape[-1] % 2:
            raise InputError(f"guidance extractor needs even H, W, got {tuple(x.shape[-2:])}")
        return self.decoder(self.trunk(self.encoder(x)))


class PatchDiscriminator(nn.Module):
    """Fully convolutional critic with total stride ``patch``: one logit per patch x patch cell."""

    def __init__(self, channels=3, ndf=64, patch=16):
        super().__init__()
        n = patch.bit_length() - 1
        if n < 1 or 2 ** n != patch:
            raise ValueError(f"patch must be a power of two >= 2, got {patch}")
        self.patch = patch
        layers = []
        prev = channels
        for i in range(n):
            if i == n - 1:
                layers.append(nn.Conv2d(prev, 1, 4, 2, 1))
                break
            w = ndf * min(2 ** i, 8)
            layers.append(nn.Conv2d(prev, w, 4, 2, 1, bias=i == 0))
            if i > 0:
                layers.append(nn.BatchNorm2d(w))
            layers.append(nn.LeakyReLU(0.2, inplace=True))
            prev = w
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)
