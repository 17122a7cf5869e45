"""Detector building blocks over the tensor core.

Each block is a parameterized forward unit: Conv->BN->SiLU composites, the
residual Bottleneck, the split/fuse C2f stage, serial pyramid pooling (SPPF),
its cross-stage two-branch variant (SPPFCSPC), space-to-depth downsampling
(SPDConv, internal convolution stride fixed to 1), and the anchor-free
decoupled detection head.

Parameters are created at construction from the supplied RNG (fan-in-scaled
uniform conv weights) so builds are deterministic per seed. Blocks are pure
functions of (input, parameters) apart from batch-norm running statistics,
updated only in training mode.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .tensor import Tensor


class Block:
    """Base: named parameter/buffer traversal in attribute creation order."""

    kind = "block"

    def named_params(self, prefix: str = ""):
        for name, val in vars(self).items():
            path = f"{prefix}{name}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield path, val
            elif isinstance(val, Block):
                yield from val.named_params(path + ".")
            elif isinstance(val, list) and val and isinstance(val[0], Block):
                for i, sub in enumerate(val):
                    yield from sub.named_params(f"{path}.{i}.")

    def named_buffers(self, prefix: str = ""):
        for name, val in vars(self).items():
            path = f"{prefix}{name}"
            if isinstance(val, np.ndarray):
                yield path, val
            elif isinstance(val, Block):
                yield from val.named_buffers(path + ".")
            elif isinstance(val, list) and val and isinstance(val[0], Block):
                for i, sub in enumerate(val):
                    yield from sub.named_buffers(f"{path}.{i}.")

    def count_params(self) -> int:
        return sum(t.size for _, t in self.named_params())

    def zero_grad(self) -> None:
        for _, t in self.named_params():
            t.zero_grad()


def _uniform_fan_in(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv2d(Block):
    """Plain convolution holder (used standalone only by the head outputs)."""

    kind = "conv2d"

    def __init__(self, cin: int, cout: int, k: int, s: int = 1, p: int = 0,
                 bias: bool = True, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.stride = s
        self.padding = p
        self.weight = T.param(_uniform_fan_in(rng, (cout, cin, k, k), cin * k * k))
        self.bias = T.param(np.zeros(cout)) if bias else None

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def named_params(self, prefix: str = ""):
        yield f"{prefix}weight", self.weight
        if self.bias is not None:
            yield f"{prefix}bias", self.bias


class BatchNorm2d(Block):
    kind = "batchnorm"

    def __init__(self, c: int, eps: float = 1e-5, momentum: float = 0.1):
        self.gamma = T.param(np.ones(c))
        self.beta = T.param(np.zeros(c))
        self.running_mean = np.zeros(c)
        self.running_var = np.ones(c)
        self.eps = eps
        self.momentum = momentum

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        return T.batchnorm2d(x, self.gamma, self.beta,
                             self.running_mean, self.running_var,
                             eps=self.eps, momentum=self.momentum,
                             training=training)


class ConvBlock(Block):
    """conv2d (no bias) -> batchnorm2d -> silu."""

    kind = "conv"

    def __init__(self, cin: int, cout: int, k: int = 1, s: int = 1,
                 p: int | None = None, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        if p is None:
            p = k // 2
        self.stride = s
        self.padding = p
        self.weight = T.param(_uniform_fan_in(rng, (cout, cin, k, k), cin * k * k))
        self.bn = BatchNorm2d(cout)

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        y = T.conv2d(x, self.weight, None, self.stride, self.padding)
        return T.silu(self.bn.forward(y, training))


class Bottleneck(Block):
    """Two 3x3 ConvBlocks with optional residual add (requires cin == cout)."""

    kind = "bottleneck"

    def __init__(self, cin: int, cout: int, shortcut: bool = True,
                 rng: np.random.Generator | None = None):
        if shortcut and cin != cout:
            raise ConfigError(
                f"bottleneck shortcut requires equal channels, got {cin} -> {cout}")
        self.shortcut = shortcut
        self.cv1 = ConvBlock(cin, cout, 3, 1, rng=rng)
        self.cv2 = ConvBlock(cout, cout, 3, 1, rng=rng)

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        y = self.cv2.forward(self.cv1.forward(x, training), training)
        return T.add(y, x) if self.shortcut else y


class C2f(Block):
    """1x1 to 2*hidden, split in halves, chain n bottlenecks on the second
    half keeping every intermediate, concat all, 1x1 back to cout."""

    kind = "c2f"

    def __init__(self, cin: int, cout: int, n: int = 1, shortcut: bool = False,
                 rng: np.random.Generator | None = None):
        if cout % 2:
            raise ConfigError(f"c2f needs even out channels, got {cout}")
        self.hidden = cout // 2
        self.cv1 = ConvBlock(cin, 2 * self.hidden, 1, 1, rng=rng)
        self.bottlenecks = [Bottleneck(self.hidden, self.hidden, shortcut, rng=rng)
                            for _ in range(n)]
        self.cv2 = ConvBlock((2 + n) * self.hidden, cout, 1, 1, rng=rng)

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        y = self.cv1.forward(x, training)
        h = self.hidden
        parts = [y[:, :h], y[:, h:]]
        for b in self.bottlenecks:
            parts.append(b.forward(parts[-1], training))
        return self.cv2.forward(T.concat_channels(parts), training)


class SPDConv(Block):
    """Space-to-depth (scale 2) then a stride-1 3x3 ConvBlock: spatial dims
    halve with no value discarded by striding."""

    kind = "spd_conv"

    def __init__(self, cin: int, cout: int, rng: np.random.Generator | None = None,
                 name: str | None = None):
        self.name = name
        self.cv = ConvBlock(4 * cin, cout, 3, 1, rng=rng)

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        return self.cv.forward(T.space_to_depth(x, 2, layer=self.name), training)


class SPPF(Block):
    """1x1 down to hidden, three serial 5x5/s1/p2 maxpools, concat
    [x, p1, p2, p3], 1x1 up to cout. Spatial shape preserved."""

    kind = "sppf"

    def __init__(self, cin: int, cout: int, hidden: int,
                 rng: np.random.Generator | None = None):
        self.cv1 = ConvBlock(cin, hidden, 1, 1, rng=rng)
        self.cv2 = ConvBlock(4 * hidden, cout, 1, 1, rng=rng)

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        y = self.cv1.forward(x, training)
        p1 = T.maxpool2d(y, 5, 1, 2)
        p2 = T.maxpool2d(p1, 5, 1, 2)
        p3 = T.maxpool2d(p2, 5, 1, 2)
        return self.cv2.forward(T.concat_channels([y, p1, p2, p3]), training)


class SPPFCSPC(Block):
    """Two-branch cross-stage pooling block.

    Branch A: 1x1 -> 3x3 -> 1x1 ConvBlocks at hidden width, SPPF-style serial
    pooling concatenated with the pre-pool tensor (4*hidden), then 1x1 -> 3x3
    back to hidden. Branch B: a single 1x1 ConvBlock to hidden. The branches
    concat to 2*hidden and a final 1x1 ConvBlock maps to cout.
    """

    kind = "sppfcspc"

    def __init__(self, cin: int, cout: int, hidden: int,
                 rng: np.random.Generator | None = None):
        self.a1 = ConvBlock(cin, hidden, 1, 1, rng=rng)
        self.a2 = ConvBlock(hidden, hidden, 3, 1, rng=rng)
        self.a3 = ConvBlock(hidden, hidden, 1, 1, rng=rng)
        self.a4 = ConvBlock(4 * hidden, hidden, 1, 1, rng=rng)
        self.a5 = ConvBlock(hidden, hidden, 3, 1, rng=rng)
        self.b1 = ConvBlock(cin, hidden, 1, 1, rng=rng)
        self.out = ConvBlock(2 * hidden, cout, 1, 1, rng=rng)

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        a = self.a3.forward(
            self.a2.forward(self.a1.forward(x, training), training), training)
        p1 = T.maxpool2d(a, 5, 1, 2)
        p2 = T.maxpool2d(p1, 5, 1, 2)
        p3 = T.maxpool2d(p2, 5, 1, 2)
        a = self.a4.forward(T.concat_channels([a, p1, p2, p3]), training)
        a = self.a5.forward(a, training)
        b = self.b1.forward(x, training)
        return self.out.forward(T.concat_channels([a, b]), training)


class Upsample(Block):
    kind = "upsample"

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        return T.upsample_nearest2x(x)


class Concat(Block):
    kind = "concat"

    def forward(self, xs: list[Tensor], training: bool = False) -> Tensor:
        return T.concat_channels(xs)


@dataclass
class HeadOutput:
    """Raw per-scale prediction maps, each (n, 4 + num_classes, gh, gw),
    channel 0..3 = left/top/right/bottom distances in stride units
    (pre-activation), the rest raw class logits."""

    maps: list[Tensor]
    strides: list[int]
    num_classes: int


class Detect(Block):
    """Anchor-free decoupled head: per scale, two parallel stems of two 3x3
    ConvBlocks feed a 1x1 box-regression conv (4 ch) and a 1x1 classification
    conv (num_classes ch, bias at the logit of a 0.01 prior). Stems are
    independent per scale."""

    kind = "detect"

    def __init__(self, cins: list[int], strides: list[int], num_classes: int,
                 rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.strides = list(strides)
        self.num_classes = num_classes
        self.box_stems = []
        self.cls_stems = []
        self.box_heads = []
        self.cls_heads = []
        prior_logit = math.log(0.01 / 0.99)
        for c in cins:
            self.box_stems.append(_Stem(c, rng))
            self.cls_stems.append(_Stem(c, rng))
            self.box_heads.append(Conv2d(c, 4, 1, bias=True, rng=rng))
            head = Conv2d(c, num_classes, 1, bias=True, rng=rng)
            head.bias.data[:] = prior_logit
            self.cls_heads.append(head)

    def forward(self, feats: list[Tensor], training: bool = False) -> HeadOutput:
        maps = []
        for i, f in enumerate(feats):
            box = self.box_heads[i].forward(self.box_stems[i].forward(f, training))
            cls = self.cls_heads[i].forward(self.cls_stems[i].forward(f, training))
            maps.append(T.concat_channels([box, cls]))
        return HeadOutput(maps=maps, strides=self.strides,
                          num_classes=self.num_classes)


class _Stem(Block):
    def __init__(self, c: int, rng: np.random.Generator):
        self.cv1 = ConvBlock(c, c, 3, 1, rng=rng)
        self.cv2 = ConvBlock(c, c, 3, 1, rng=rng)

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        return self.cv2.forward(self.cv1.forward(x, training), training)
