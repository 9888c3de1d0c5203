"""Dense dilated convolution merging (DDCM) modules and the joint-task network.

Layout of the joint-task network for an H x W input::

    low level : bands -> DDCM[1,2,3,5,7,9] -> max-pool x2 -> (H/4)
    high level: bands -> band expansion -> residual backbone (H/16)
                -> DDCM[1,2,3,4] -> upsample to H/4 -> DDCM[1]
    fusion    : concat(low, high) at H/4
    heads     : full-class 1x1 conv -> upsample to H
                binary 1x1 conv -> upsample to H
                presence: global average pool -> fully connected
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .nn import functional as F
from .nn.layers import BatchNorm2d, Conv2d, Linear, Module, PReLU
from .rng import RngState
from .tensor import Tensor, as_tensor, no_grad

# Published parameter count (millions) and GFLOPs of the joint-task network, for reporting only.
TABLE1_PARAMS_M = 9.30
TABLE1_GFLOPS = 4.44


@dataclass(frozen=True)
class DCsBlockSpec:
    in_channels: int
    growth: int
    dilation: int
    kernel: int = 3
    stride: int = 2

    @property
    def out_channels(self) -> int:
        return self.in_channels + self.growth

    @property
    def extent(self) -> int:
        return self.kernel + (self.kernel - 1) * (self.dilation - 1)


@dataclass(frozen=True)
class DDCMSpec:
    in_channels: int
    dilations: tuple[int, ...]
    growth: int
    merge_out: int
    kernel: int = 3

    def blocks(self) -> list[DCsBlockSpec]:
        return [
            DCsBlockSpec(self.in_channels + i * self.growth, self.growth, r, self.kernel)
            for i, r in enumerate(self.dilations)
        ]

    @property
    def stack_channels(self) -> int:
        return self.in_channels + len(self.dilations) * self.growth


@dataclass(frozen=True)
class NetworkConfig:
    input_bands: int = 2
    num_classes: int = 4
    kernel_size: int = 3
    low_dilations: tuple[int, ...] = (1, 2, 3, 5, 7, 9)
    low_growth: int = 24
    low_merge: int = 36
    high_dilations: tuple[int, ...] = (1, 2, 3, 4)
    high_growth: int = 64
    high_merge: int = 128
    post_dilations: tuple[int, ...] = (1,)
    post_growth: int = 64
    post_merge: int = 36
    backbone_width: int = 64
    backbone_blocks: tuple[int, ...] = (3, 4, 6)
    binary_head: bool = True
    presence_head: bool = True

    def __post_init__(self):
        for name in ("low_dilations", "high_dilations", "post_dilations", "backbone_blocks"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        if not (self.low_dilations and self.high_dilations and self.post_dilations):
            raise ValueError("every DDCM module needs a nonempty dilation list")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> NetworkConfig:
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


class DCsBlock(Module):
    """Strided dilated conv -> PReLU -> BN -> bilinear upsample -> concat with input."""

    def __init__(self, spec: DCsBlockSpec, rng: RngState):
        self.spec = spec
        pad = spec.dilation * (spec.kernel - 1) // 2
        self.conv = Conv2d(spec.in_channels, spec.growth, spec.kernel, spec.stride,
                           spec.dilation, pad, bias=True, rng=rng)
        self.act = PReLU()
        self.bn = BatchNorm2d(spec.growth)

    def forward(self, x):
        H, W = x.shape[-2:]
        if H < 2 or W < 2:
            raise ValueError(f"DCs block needs spatial size >= 2, got {H}x{W}")
        y = self.bn(self.act(self.conv(x)))
        y = F.bilinear_upsample(y, H, W)
        return F.concat_channels([y, x])


class MergeModule(Module):
    """1x1 conv + BN + PReLU over the stacked features."""

    def __init__(self, in_channels, out_channels, rng: RngState):
        self.conv = Conv2d(in_channels, out_channels, 1, bias=False, rng=rng)
        self.bn = BatchNorm2d(out_channels)
        self.act = PReLU()

    def forward(self, x):
        return self.act(self.bn(self.conv(x)))


class DDCM(Module):
    def __init__(self, spec: DDCMSpec, rng: RngState):
        if not spec.dilations:
            raise ValueError("DDCM needs a nonempty dilation list")
        self.spec = spec
        self.blocks = [DCsBlock(b, rng) for b in spec.blocks()]
        self.merge = MergeModule(spec.stack_channels, spec.merge_out, rng)

    def stack(self, x):
        for block in self.blocks:
            x = block(x)
        return x

    def forward(self, x):
        return self.merge(self.stack(x))


class BandExpand(Module):
    """Adds learned bands (3x3 conv + BN + PReLU) until the input has 3 bands."""

    def __init__(self, in_bands: int, rng: RngState, target: int = 3):
        self.in_bands = in_bands
        self.extra = max(target - in_bands, 0)
        if self.extra:
            self.conv = Conv2d(in_bands, self.extra, 3, bias=False, rng=rng)
            self.bn = BatchNorm2d(self.extra)
            self.act = PReLU()

    def forward(self, x):
        if not self.extra:
            return x
        return F.concat_channels([self.act(self.bn(self.conv(x))), x])


class Bottleneck(Module):
    expansion = 4

    def __init__(self, in_channels, planes, stride, rng: RngState):
        out = planes * self.expansion
        self.conv1 = Conv2d(in_channels, planes, 1, bias=False, rng=rng)
        self.bn1 = BatchNorm2d(planes)
        self.conv2 = Conv2d(planes, planes, 3, stride=stride, bias=False, rng=rng)
        self.bn2 = BatchNorm2d(planes)
        self.conv3 = Conv2d(planes, out, 1, bias=False, rng=rng)
        self.bn3 = BatchNorm2d(out)
        self.down = None
        if stride != 1 or in_channels != out:
            self.down = [Conv2d(in_channels, out, 1, stride=stride, padding=0, bias=False, rng=rng),
                         BatchNorm2d(out)]

    def forward(self, x):
        y = F.relu(self.bn1(self.conv1(x)))
        y = F.relu(self.bn2(self.conv2(y)))
        y = self.bn3(self.conv3(y))
        skip = x if self.down is None else self.down[1](self.down[0](x))
        return F.relu(y + skip)


class Backbone(Module):
    """Residual bottleneck stem and first three stages; output stride 16."""

    def __init__(self, width: int = 64, blocks=(3, 4, 6), rng: RngState | None = None,
                 in_channels: int = 3):
        rng = rng or RngState(0)
        self.stem_conv = Conv2d(in_channels, width, 7, stride=2, padding=3, bias=False, rng=rng)
        self.stem_bn = BatchNorm2d(width)
        stages = []
        c = width
        for i, n in enumerate(blocks):
            planes = width * 2**i
            stride = 1 if i == 0 else 2
            stage = []
            for j in range(n):
                stage.append(Bottleneck(c, planes, stride if j == 0 else 1, rng))
                c = planes * Bottleneck.expansion
            stages.append(stage)
        self.stages = [b for stage in stages for b in stage]
        self.out_channels = c

    def forward(self, x):
        y = F.relu(self.stem_bn(self.stem_conv(x)))
        y = F.max_pool(y, 3, 2, 1)
        for block in self.stages:
            y = block(y)
        return y


def backbone_param_count(width: int = 64, blocks=(3, 4, 6), in_channels: int = 3) -> int:
    """Closed-form parameter count of :class:`Backbone` (convs have no bias; BN has 2/channel)."""
    total = in_channels * width * 49 + 2 * width
    c = width
    for i, n in enumerate(blocks):
        p = width * 2**i
        out = 4 * p
        for j in range(n):
            total += c * p + 2 * p          # 1x1 reduce
            total += 9 * p * p + 2 * p      # 3x3
            total += p * out + 2 * out      # 1x1 expand
            if j == 0 and (i > 0 or c != out):
                total += c * out + 2 * out  # projection shortcut
            c = out
    return total


class JointTaskDDCM(Module):
    def __init__(self, cfg: NetworkConfig = NetworkConfig(), rng: RngState | None = None):
        rng = rng or RngState(0)
        self.cfg = cfg
        k = cfg.kernel_size
        self.low = DDCM(DDCMSpec(cfg.input_bands, cfg.low_dilations, cfg.low_growth,
                                 cfg.low_merge, k), rng.stream("low"))
        self.expand = BandExpand(cfg.input_bands, rng.stream("expand"))
        bb_in = max(cfg.input_bands, 3)
        self.backbone = Backbone(cfg.backbone_width, cfg.backbone_blocks, rng.stream("backbone"), bb_in)
        self.high = DDCM(DDCMSpec(self.backbone.out_channels, cfg.high_dilations, cfg.high_growth,
                                  cfg.high_merge, k), rng.stream("high"))
        self.post = DDCM(DDCMSpec(cfg.high_merge, cfg.post_dilations, cfg.post_growth,
                                  cfg.post_merge, k), rng.stream("post"))
        fused = cfg.low_merge + cfg.post_merge
        self.fused_channels = fused
        self.seg_head = Conv2d(fused, cfg.num_classes, 1, rng=rng.stream("seg_head"))
        self.binary_head = Conv2d(fused, 1, 1, rng=rng.stream("binary_head")) if cfg.binary_head else None
        self.presence_head = (Linear(fused, cfg.num_classes - 1, rng=rng.stream("presence_head"))
                              if cfg.presence_head else None)

    def features(self, x: Tensor) -> Tensor:
        H, W = x.shape[-2:]
        if H % 32 or W % 32:
            raise ValueError(f"input size {H}x{W} must be a multiple of 32 in both dimensions")
        if x.shape[1] != self.cfg.input_bands:
            raise ValueError(f"expected {self.cfg.input_bands} input bands, got {x.shape[1]}")
        low = F.max_pool2(F.max_pool2(self.low(x)))
        high = self.high(self.backbone(self.expand(x)))
        high = F.bilinear_upsample(high, H // 4, W // 4)
        high = self.post(high)
        return F.concat_channels([low, high])

    def forward(self, x) -> dict[str, Tensor]:
        x = as_tensor(x)
        squeeze = x.ndim == 3
        if squeeze:
            x = x.reshape(1, *x.shape)
        H, W = x.shape[-2:]
        fused = self.features(x)
        out = {"full_seg": F.bilinear_upsample(self.seg_head(fused), H, W)}
        if self.binary_head is not None:
            out["binary"] = F.bilinear_upsample(self.binary_head(fused), H, W)
        if self.presence_head is not None:
            pooled = F.adaptive_avg_pool(fused).reshape(fused.shape[0], fused.shape[1])
            out["presence"] = self.presence_head(pooled)
        if squeeze:
            out = {k: v.reshape(v.shape[1:]) for k, v in out.items()}
        return out


def jt_ddcm_forward(x, cfg: NetworkConfig, net: JointTaskDDCM | None = None) -> dict[str, Tensor]:
    net = net or JointTaskDDCM(cfg)
    return net(x)


@dataclass
class Summary:
    parameters: int
    macs: int
    input_shape: tuple
    by_module: dict = field(default_factory=dict)

    def table(self) -> str:
        lines = [f"{'module':<16}{'parameters':>14}"]
        for name, n in self.by_module.items():
            lines.append(f"{name:<16}{n:>14,d}")
        lines.append(f"{'total':<16}{self.parameters:>14,d}")
        m = self.parameters / 1e6
        lines.append(
            f"parameters {m:.2f}M (reference 9.30M, deviation {m - TABLE1_PARAMS_M:+.2f}M / "
            f"{100 * (m - TABLE1_PARAMS_M) / TABLE1_PARAMS_M:+.1f}%)"
        )
        g = self.macs / 1e9
        lines.append(f"multiply-accumulates {g:.2f}G on input {self.input_shape} "
                     f"(reference {TABLE1_GFLOPS} GFLOPs)")
        return "\n".join(lines)


def summarize(cfg: NetworkConfig = NetworkConfig(), input_size: int = 256,
              net: JointTaskDDCM | None = None) -> Summary:
    net = net or JointTaskDDCM(cfg)
    by_module = {}
    for name, child in net._children():
        by_module[name] = child.num_parameters()
    was_training = net.training
    net.eval()
    x = np.zeros((1, cfg.input_bands, input_size, input_size))
    with no_grad(), F.count_macs() as log:
        net(x)
    net.train(was_training)
    return Summary(net.num_parameters(), int(sum(n for _, n in log)),
                   (cfg.input_bands, input_size, input_size), by_module)
