"""The four encoder-decoder skeletons.

Each skeleton splits into ``encode`` (input -> bottleneck, plus whatever the
decoder needs from the encoder) and ``decode`` (bottleneck -> full-resolution
feature maps). The bottleneck is the narrowest map, at 1/16 of the input in
each direction; the hybrid model fuses the rainfall encoding there.

Widths are multiples of ``base_width``; all of them live in ``WIDTHS``.
"""

from __future__ import annotations

import numpy as np

from ..autodiff import functional as F
from ..autodiff.tensor import Tensor, add, broadcast_to, concat, relu
from .layers import Conv2d, ConvBNReLU, ConvTranspose2d, Linear, Module

CNN_KINDS = ("FCN", "UNet", "SegNet", "DeepLabv3plus")
DOWNSAMPLING = 16

WIDTHS = {
    # encoder stage multipliers, then the conv-ised "fully connected" block
    "FCN": {"stages": (1, 2, 4, 8), "fc": 32},
    "UNet": {"stages": (1, 2, 4, 8)},
    # eight encoder convs, two per pooling stage; the last decoder stage runs
    # at a fixed 64 feature maps
    "SegNet": {"stages": (1, 1, 2, 2), "last_decoder_maps": 64},
    "DeepLabv3plus": {"stages": (1, 2, 4, 8), "aspp": 4, "aspp_rates": (6, 12, 18)},
}


class CNNSkeleton(Module):
    kind: str = ""
    bottleneck_channels: int
    out_channels: int

    def encode(self, x: Tensor):
        raise NotImplementedError

    def decode(self, b: Tensor, ctx) -> Tensor:
        raise NotImplementedError

    def __call__(self, x: Tensor) -> Tensor:
        b, ctx = self.encode(x)
        return self.decode(b, ctx)


class FCN(CNNSkeleton):
    """VGG-style encoder, conv-ised FC block, transposed-conv decoder with additive skips."""

    kind = "FCN"

    def __init__(self, in_channels, w, rng):
        super().__init__()
        cfg = WIDTHS["FCN"]
        widths = [m * w for m in cfg["stages"]]
        self.stages = []
        cin = in_channels
        for i, cw in enumerate(widths):
            a = self.child(f"enc{i + 1}a", ConvBNReLU(cin, cw, 3, rng))
            b = self.child(f"enc{i + 1}b", ConvBNReLU(cw, cw, 3, rng))
            self.stages.append((a, b))
            cin = cw
        fc = cfg["fc"] * w
        self.fc6 = self.child("fc6", ConvBNReLU(widths[-1], fc, 3, rng))
        self.fc7 = self.child("fc7", ConvBNReLU(fc, fc, 1, rng))
        self.up = [
            self.child("up4", ConvTranspose2d(fc, widths[2], 2, 2, rng)),
            self.child("up3", ConvTranspose2d(widths[2], widths[1], 2, 2, rng)),
            self.child("up2", ConvTranspose2d(widths[1], widths[0], 2, 2, rng)),
            self.child("up1", ConvTranspose2d(widths[0], w, 2, 2, rng)),
        ]
        self.final = self.child("final", ConvBNReLU(w, w, 3, rng))
        self.bottleneck_channels = fc
        self.out_channels = w

    def encode(self, x):
        pooled = []
        for a, b in self.stages:
            x, _ = F.max_pool2d(b(a(x)), 2)
            pooled.append(x)
        return self.fc7(self.fc6(x)), pooled

    def decode(self, x, pooled):
        x = add(self.up[0](x), pooled[2])
        x = add(self.up[1](x), pooled[1])
        x = add(self.up[2](x), pooled[0])
        return self.final(self.up[3](x))


class UNet(CNNSkeleton):
    """Four pooling steps down, four 2x2 transposed-conv steps up, concatenating skips."""

    kind = "UNet"

    def __init__(self, in_channels, w, rng):
        super().__init__()
        widths = [m * w for m in WIDTHS["UNet"]["stages"]]
        self.down = []
        cin = in_channels
        for i, cw in enumerate(widths):
            self.down.append((self.child(f"down{i + 1}a", ConvBNReLU(cin, cw, 3, rng)),
                              self.child(f"down{i + 1}b", ConvBNReLU(cw, cw, 3, rng))))
            cin = cw
        self.bottom = self.child("bottom", ConvBNReLU(widths[-1], widths[-1], 3, rng))
        # decoder filters halve at every stage
        self.ups = []
        cin = widths[-1]
        for i, skip in enumerate(reversed(widths)):
            cout = max(w, cin // 2)
            up = self.child(f"up{4 - i}", ConvTranspose2d(cin, cout, 2, 2, rng))
            ca = self.child(f"up{4 - i}a", ConvBNReLU(cout + skip, cout, 3, rng))
            cb = self.child(f"up{4 - i}b", ConvBNReLU(cout, cout, 3, rng))
            self.ups.append((up, ca, cb))
            cin = cout
        self.head = self.child("out1x1", Conv2d(cin, w, 1, rng))
        self.bottleneck_channels = widths[-1]
        self.out_channels = w

    def encode(self, x):
        skips = []
        for a, b in self.down:
            x = b(a(x))
            skips.append(x)
            x, _ = F.max_pool2d(x, 2)
        return self.bottom(x), skips

    def decode(self, x, skips):
        for (up, ca, cb), skip in zip(self.ups, reversed(skips)):
            x = cb(ca(concat([up(x), skip], axis=1)))
        return self.head(x)


class SegNet(CNNSkeleton):
    """Eight-conv encoder storing pool indices; mirrored decoder unpools with them."""

    kind = "SegNet"

    def __init__(self, in_channels, w, rng):
        super().__init__()
        cfg = WIDTHS["SegNet"]
        widths = [m * w for m in cfg["stages"]]
        self.enc = []
        cin = in_channels
        for i, cw in enumerate(widths):
            self.enc.append((self.child(f"enc{i + 1}a", ConvBNReLU(cin, cw, 3, rng)),
                             self.child(f"enc{i + 1}b", ConvBNReLU(cw, cw, 3, rng))))
            cin = cw
        self.dec = []
        outs = [cfg["last_decoder_maps"]] + widths[:-1]
        for i in reversed(range(4)):
            cw, cout = widths[i], outs[i]
            self.dec.append((self.child(f"dec{i + 1}a", ConvBNReLU(cw, cout if i == 0 else cw, 3, rng)),
                             self.child(f"dec{i + 1}b", ConvBNReLU(cout if i == 0 else cw, cout, 3, rng))))
        self.head = self.child("out1x1", Conv2d(outs[0], w, 1, rng))
        self.bottleneck_channels = widths[-1]
        self.out_channels = w

    def encode(self, x):
        ctx = []
        for a, b in self.enc:
            y = b(a(x))
            x, idx = F.max_pool2d(y, 2)
            ctx.append((idx, y.shape[2:]))
        return x, ctx

    def decode(self, x, ctx):
        for (a, b), (idx, shape) in zip(self.dec, reversed(ctx)):
            x = b(a(F.max_unpool2d(x, idx, shape)))
        return self.head(x)


class ResidualBlock(Module):
    def __init__(self, cin, cout, stride, rng):
        super().__init__()
        self.c1 = self.child("conv1", ConvBNReLU(cin, cout, 3, rng, stride=stride))
        self.c2 = self.child("conv2", ConvBNReLU(cout, cout, 3, rng, act=False))
        self.proj = None
        if stride != 1 or cin != cout:
            self.proj = self.child("proj", ConvBNReLU(cin, cout, 1, rng, stride=stride, act=False))

    def __call__(self, x):
        short = self.proj(x) if self.proj is not None else x
        return relu(add(self.c2(self.c1(x)), short))


class ASPP(Module):
    """1x1 branch, three dilated 3x3 branches and an image-pooling branch."""

    def __init__(self, cin, cout, rates, rng):
        super().__init__()
        self.b0 = self.child("b1x1", ConvBNReLU(cin, cout, 1, rng))
        self.dilated = [self.child(f"rate{r}", ConvBNReLU(cin, cout, 3, rng, dilation=r)) for r in rates]
        self.pool_fc = self.child("pool", Linear(cin, cout, rng))
        self.project = self.child("project", ConvBNReLU(cout * (2 + len(rates)), cout, 1, rng))

    def __call__(self, x):
        n, _, h, w = x.shape
        pooled = relu(self.pool_fc(F.global_avg_pool(x)))
        pooled = broadcast_to(pooled.reshape(n, -1, 1, 1), (n, pooled.shape[1], h, w))
        branches = [self.b0(x)] + [d(x) for d in self.dilated] + [pooled]
        return self.project(concat(branches, axis=1))


class DeepLabV3Plus(CNNSkeleton):
    """Residual backbone, ASPP, and a decoder joining low-level features at 1/4 scale."""

    kind = "DeepLabv3plus"

    def __init__(self, in_channels, w, rng):
        super().__init__()
        cfg = WIDTHS["DeepLabv3plus"]
        widths = [m * w for m in cfg["stages"]]
        self.stem = self.child("stem", ConvBNReLU(in_channels, w, 3, rng))
        self.stages = []
        cin = w
        for i, cw in enumerate(widths):
            blocks = (self.child(f"layer{i + 1}.0", ResidualBlock(cin, cw, 2, rng)),
                      self.child(f"layer{i + 1}.1", ResidualBlock(cw, cw, 1, rng)))
            self.stages.append(blocks)
            cin = cw
        a = cfg["aspp"] * w
        self.aspp = self.child("aspp", ASPP(widths[-1], a, cfg["aspp_rates"], rng))
        self.low = self.child("low1x1", ConvBNReLU(widths[1], w, 1, rng))
        self.up_a = self.child("up4x_a", ConvTranspose2d(a, a, 4, 4, rng))
        self.refine = self.child("refine", ConvBNReLU(a + w, a, 3, rng))
        self.up_b = self.child("up4x_b", ConvTranspose2d(a, w, 4, 4, rng))
        self.final = self.child("final", ConvBNReLU(w, w, 3, rng))
        self.bottleneck_channels = a
        self.out_channels = w

    def encode(self, x):
        x = self.stem(x)
        low = None
        for i, (b0, b1) in enumerate(self.stages):
            x = b1(b0(x))
            if i == 1:
                low = x
        return self.aspp(x), low

    def decode(self, x, low):
        x = self.refine(concat([self.up_a(x), self.low(low)], axis=1))
        return self.final(self.up_b(x))


_SKELETONS = {"FCN": FCN, "UNet": UNet, "SegNet": SegNet, "DeepLabv3plus": DeepLabV3Plus}


def build_cnn(kind: str, in_channels: int, base_width: int,
              rng: np.random.Generator) -> CNNSkeleton:
    try:
        cls = _SKELETONS[kind]
    except KeyError:
        raise ValueError(f"unknown CNN kind {kind!r}; expected one of {CNN_KINDS}") from None
    return cls(in_channels, base_width, rng)
