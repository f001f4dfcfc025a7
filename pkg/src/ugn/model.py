"""Uncertainty-gated segmentation network.

A ResNet-style encoder yields a feature pyramid ``g_0 .. g_L``. Starting from
the coarsest level, each step upsamples the running features, predicts logits
and log-variances with two 1x1 heads, turns sampled logits into a per-pixel
uncertainty map, and gates the next finer encoder level with it:

    b_bar[j-1] = stop_gradient(gamma[j]) * g[j-1] + upsample(b_bar[j])

The final segmentation averages every level's softmax weighted by
``1 - gamma``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np

from . import nn
from . import tensor as T
from .nn import BatchNormState, Conv2dParams
from .tensor import ShapeError, Tensor
from .uncertainty import UncertaintyConfig, gamma_map, sample_logits

DEFAULT_WIDTHS = (8, 8, 16, 32, 64)
MAX_LOGVAR = 6.0


class Module:
    """Tiny parameter container: tensors with ``requires_grad`` are parameters,
    numpy arrays are buffers, and child modules/lists are walked in
    attribute order."""

    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, list):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, np.ndarray):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_buffers(name + ".")
            elif isinstance(val, list):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{name}.{i}.")

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for val in vars(self).values():
            if isinstance(val, Module):
                yield from val.modules()
            elif isinstance(val, list):
                for item in val:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def _param(arr: np.ndarray) -> Tensor:
    return Tensor(arr, requires_grad=True)


class Conv2d(Module):
    def __init__(self, cin, cout, k, rng, stride=1, padding=0, bias=False, std=None):
        std = math.sqrt(2.0 / (cin * k * k)) if std is None else std
        self.weight = _param(rng.standard_normal((cout, cin, k, k)) * std)
        self.bias = _param(np.zeros(cout)) if bias else None
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return nn.conv2d(x, Conv2dParams(self.weight, self.bias, self.stride, self.padding))


class BatchNorm2d(Module):
    def __init__(self, c, momentum=0.9, eps=1e-5):
        self.scale = _param(np.ones(c))
        self.shift = _param(np.zeros(c))
        self.running_mean = np.zeros(c, dtype=T.default_dtype())
        self.running_var = np.ones(c, dtype=T.default_dtype())
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        st = BatchNormState(self.scale, self.shift, self.running_mean, self.running_var, self.momentum, self.eps)
        return nn.batchnorm2d(x, st, self.training)


class BasicBlock(Module):
    def __init__(self, cin, cout, stride, rng):
        self.conv1 = Conv2d(cin, cout, 3, rng, stride=stride, padding=1)
        self.bn1 = BatchNorm2d(cout)
        self.conv2 = Conv2d(cout, cout, 3, rng, padding=1)
        self.bn2 = BatchNorm2d(cout)
        if stride != 1 or cin != cout:
            self.down = Conv2d(cin, cout, 1, rng, stride=stride)
            self.down_bn = BatchNorm2d(cout)
        else:
            self.down = None
            self.down_bn = None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.relu(self.bn1(self.conv1(x)))
        y = self.bn2(self.conv2(y))
        skip = x if self.down is None else self.down_bn(self.down(x))
        return T.relu(T.add(y, skip))


@dataclass
class EncoderConfig:
    widths: Tuple[int, ...] = DEFAULT_WIDTHS
    blocks_per_stage: int = 2
    in_channels: int = 3
    gate_width: int = 0  # 0 means widths[1]

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if len(self.widths) < 2 or any(w < 1 for w in self.widths):
            raise ValueError(f"need >= 2 positive stage widths, got {self.widths}")
        if self.blocks_per_stage < 1:
            raise ValueError("blocks_per_stage must be >= 1")

    @property
    def levels(self) -> int:
        return len(self.widths)

    @property
    def width(self) -> int:
        return self.gate_width or self.widths[1]

    @property
    def strides(self) -> List[int]:
        """Stride of each g_j relative to the input."""
        return [4] + [4 * 2 ** (j - 1) for j in range(1, self.levels)]

    @property
    def divisor(self) -> int:
        return self.strides[-1]


class Encoder(Module):
    """Stem (7x7/2 conv, BN, ReLU, 3x3/2 max-pool) gives g_0; each further stage of
    basic blocks gives g_1, g_2, ...; a 1x1 projection maps every g_j to the gate width."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        w = cfg.widths
        self.stem = Conv2d(cfg.in_channels, w[0], 7, rng, stride=2, padding=3)
        self.stem_bn = BatchNorm2d(w[0])
        self.stages = []
        for j in range(1, cfg.levels):
            stride = 1 if j == 1 else 2
            blocks = [BasicBlock(w[j - 1], w[j], stride, rng)]
            blocks += [BasicBlock(w[j], w[j], 1, rng) for _ in range(cfg.blocks_per_stage - 1)]
            self.stages.append(Stage(blocks))
        self.proj = [Conv2d(wj, cfg.width, 1, rng, bias=True) for wj in w]

    def __call__(self, x: Tensor) -> List[Tensor]:
        h, w = x.shape[-2:]
        d = self.cfg.divisor
        if h % d or w % d:
            raise ShapeError(f"input {h}x{w} must be divisible by {d}")
        y = T.relu(self.stem_bn(self.stem(x)))
        y = nn.maxpool2d(y, window=3, stride=2, padding=1)
        feats = [y]
        for stage in self.stages:
            y = stage(y)
            feats.append(y)
        return [p(f) for p, f in zip(self.proj, feats)]


class Stage(Module):
    def __init__(self, blocks):
        self.blocks = blocks

    def __call__(self, x):
        for b in self.blocks:
            x = b(x)
        return x


class GateHead(Module):
    """The pair of 1x1 convolutions giving logits and log-variances.

    The log-variance is softly capped at ``max_logvar`` (``s = cap - softplus(cap - raw)``).
    Without a cap, one batch can push sigma so high that the cross-entropy
    gradient explodes and permanently inflates the optimizer's accumulator.
    There is no lower cap. Both convolutions start with small weights so early
    logits are near uniform and early gradients stay moderate.
    """

    def __init__(self, width, num_classes, rng, max_logvar=MAX_LOGVAR):
        self.logits = Conv2d(width, num_classes, 1, rng, bias=True, std=0.01)
        self.logvar = Conv2d(width, num_classes, 1, rng, bias=True, std=0.01)
        self.max_logvar = max_logvar

    def __call__(self, b: Tensor) -> Tuple[Tensor, Tensor]:
        raw = self.logvar(b)
        cap = self.max_logvar
        s = T.sub(T.constant_like(raw, cap), nn.softplus(T.sub(T.constant_like(raw, cap), raw)))
        return self.logits(b), s


@dataclass
class GateLevelOutput:
    level: int
    features: Tensor  # input to the heads: b_j, or b_bar_0 at level 0
    l: Tensor
    s: Tensor
    lhat: Tensor
    gamma: Tensor
    b_bar: Optional[Tensor] = None  # b_bar_{j-1}; None at level 0


def _factor(src: Tensor, dst_hw: Sequence[int]) -> int:
    h, w = src.shape[-2:]
    fh, fw = dst_hw[0] // h, dst_hw[1] // w
    if fh != fw or fh * h != dst_hw[0] or fw * w != dst_hw[1]:
        raise ShapeError(f"cannot upsample {h}x{w} to {dst_hw[0]}x{dst_hw[1]}")
    return fh


def downsample_labels(mask: np.ndarray, factor: int) -> np.ndarray:
    """Nearest (top-left cell) downsampling of ``[..., H, W]`` label arrays."""
    return mask[..., ::factor, ::factor]


def gate_refine(
    pyramid: Sequence[Tensor],
    heads: Sequence[GateHead],
    cfg: UncertaintyConfig,
    rng: np.random.Generator,
    labels: Optional[np.ndarray] = None,
) -> List[GateLevelOutput]:
    """Run the gated refinement chain, returning outputs for levels L..0 (coarse first)."""
    top = len(pyramid) - 1
    if len(heads) != len(pyramid):
        raise ShapeError(f"{len(heads)} heads for {len(pyramid)} pyramid levels")
    in_h = None if labels is None else labels.shape[-2]

    def level_labels(hw):
        if labels is None:
            return None
        return downsample_labels(labels, in_h // hw[0])

    out = []
    b_bar = pyramid[top]
    for j in range(top, 0, -1):
        g_prev = pyramid[j - 1]
        b = nn.upsample_nearest(b_bar, _factor(b_bar, g_prev.shape[-2:]))
        if b.shape != g_prev.shape:
            raise ShapeError(f"level {j}: upsampled {b.shape} does not match g_{j - 1} {g_prev.shape}")
        l, s = heads[j](b)
        lhat = sample_logits(l, s, cfg.samples, rng)
        gamma = gamma_map(lhat, cfg, level_labels(l.shape[-2:]))
        b_next = T.add(T.mul(T.stop_gradient(gamma), g_prev), b)
        out.append(GateLevelOutput(j, b, l, s, lhat, gamma, b_next))
        b_bar = b_next
    l, s = heads[0](b_bar)
    lhat = sample_logits(l, s, cfg.samples, rng)
    gamma = gamma_map(lhat, cfg, level_labels(l.shape[-2:]))
    out.append(GateLevelOutput(0, b_bar, l, s, lhat, gamma, None))
    return out


def fuse_levels(
    levels: Sequence[GateLevelOutput],
    target: Tuple[int, int],
    clamp: bool = True,
    normalizer: Optional[float] = None,
) -> Tensor:
    """Average of per-level softmax maps weighted by ``1 - gamma`` (clamped at 0 when ``clamp``).

    ``normalizer`` defaults to ``1 / len(levels)``; any positive value gives the
    same argmax.
    """
    if not levels:
        raise ValueError("fuse_levels needs at least one level")
    norm = 1.0 / len(levels) if normalizer is None else normalizer
    total = None
    for lv in levels:
        f = _factor(lv.l, target)
        p = nn.upsample_nearest(nn.softmax_channel(lv.l), f)
        w = T.sub(T.constant_like(lv.gamma, 1.0), T.stop_gradient(lv.gamma))
        if clamp:
            w = T.relu(w)
        term = T.mul(p, nn.upsample_nearest(w, f))
        total = term if total is None else T.add(total, term)
    return T.scale(total, norm)


class UGNet(Module):
    def __init__(self, enc_cfg: EncoderConfig, num_classes: int, seed: int = 0):
        if num_classes < 2:
            raise ValueError("need at least two classes")
        rng = np.random.default_rng(seed)
        self.enc_cfg = enc_cfg
        self.num_classes = num_classes
        self.encoder = Encoder(enc_cfg, rng)
        self.heads = [GateHead(enc_cfg.width, num_classes, rng) for _ in range(enc_cfg.levels)]

    def forward(
        self,
        x: Tensor,
        cfg: UncertaintyConfig,
        rng: np.random.Generator,
        labels: Optional[np.ndarray] = None,
    ) -> List[GateLevelOutput]:
        return gate_refine(self.encoder(x), self.heads, cfg, rng, labels)

    def head_parameters(self) -> List[Tensor]:
        return [p for h in self.heads for p in h.parameters()]


@dataclass
class Prediction:
    classes: np.ndarray  # [H, W] int
    gammas: List[np.ndarray] = field(default_factory=list)  # per level j (index j), native resolution
    scores: Optional[np.ndarray] = None  # [C, H/4, W/4] fused scores


def predict_image(
    model: UGNet,
    image: np.ndarray,
    cfg: UncertaintyConfig,
    seed: int = 0,
) -> Prediction:
    """Eval-mode forward of one ``[3, H, W]`` image to a class map at input resolution."""
    h, w = image.shape[-2:]
    d = model.enc_cfg.divisor
    if h % d or w % d:
        ph, pw = (-h) % d, (-w) % d
        raise ValueError(f"image {h}x{w} is not divisible by {d}; pad by {ph} rows and {pw} columns")
    was_training = model.training
    model.eval()
    try:
        with T.no_grad():
            x = Tensor(image[None])
            levels = model.forward(x, cfg, np.random.default_rng(seed))
            base = levels[-1].l.shape[-2:]
            fused = fuse_levels(levels, base, clamp=cfg.clamp_fusion_weight)
            full = nn.upsample_nearest(fused, h // base[0])
    finally:
        model.train(was_training)
    classes = np.argmax(full.data[0], axis=0)
    gammas = [None] * len(levels)
    for lv in levels:
        gammas[lv.level] = lv.gamma.data[0, 0]
    return Prediction(classes, gammas, fused.data[0])
