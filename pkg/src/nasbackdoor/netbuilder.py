"""Target networks built from a cell architecture, plus a residual baseline.

Public tensors are channels-last ``(B, H, W, C)`` with pixel values in
``[0, 1]``; modules permute to channels-first internally.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn

from .archspace import EDGES, ArchSpec, format_arch


@dataclass
class SkeletonConfig:
    stages: int = 3
    cells_per_stage: int = 2
    base_width: int = 16
    input_shape: tuple[int, int, int] = (8, 8, 3)
    num_classes: int = 4

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        if min(self.stages, self.cells_per_stage, self.base_width, self.num_classes) < 1:
            raise ValueError("skeleton counts must be >= 1")
        h, w, _ = self.input_shape
        div = 2 ** (self.stages - 1)
        if h % div or w % div:
            raise ValueError(f"input {h}x{w} not divisible by {div} for {self.stages} stages")


@dataclass
class InitSpec:
    family: str = "fan_in_gaussian"
    gain: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.family != "fan_in_gaussian":
            raise ValueError(f"unknown init family {self.family!r}")
        if self.gain <= 0:
            raise ValueError("gain must be > 0")


def init_parameters(module: nn.Module, init: InitSpec) -> None:
    """Zero-mean Gaussian weights with variance gain^2 / fan_in; BN scale 1, shift 0."""
    g = torch.Generator().manual_seed(int(init.seed))
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                fan_in = m.weight[0].numel()
                std = init.gain / math.sqrt(fan_in)
                m.weight.copy_(torch.randn(m.weight.shape, generator=g, dtype=m.weight.dtype) * std)
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, nn.BatchNorm2d):
                m.weight.fill_(1.0)
                m.bias.zero_()
                m.reset_running_stats()


class ReLUConvBN(nn.Sequential):
    def __init__(self, c_in: int, c_out: int, kernel: int, stride: int = 1):
        super().__init__(
            nn.ReLU(inplace=False),
            nn.Conv2d(c_in, c_out, kernel, stride=stride, padding=kernel // 2, bias=False),
            nn.BatchNorm2d(c_out),
        )


class Zero(nn.Module):
    def forward(self, x):
        return x.mul(0.0)


def make_op(tag: str, c: int) -> nn.Module:
    if tag == "none":
        return Zero()
    if tag == "skip_connect":
        return nn.Identity()
    if tag == "nor_conv_1x1":
        return ReLUConvBN(c, c, 1)
    if tag == "nor_conv_3x3":
        return ReLUConvBN(c, c, 3)
    if tag == "avg_pool_3x3":
        return nn.AvgPool2d(3, stride=1, padding=1, count_include_pad=False)
    raise ValueError(f"unknown operator {tag!r}")


class Cell(nn.Module):
    def __init__(self, arch: ArchSpec, c: int):
        super().__init__()
        self.ops = nn.ModuleList(make_op(tag, c) for tag in arch.edges)

    def forward(self, x):
        nodes = [x]
        for dst in (1, 2, 3):
            total = None
            for k, (d, src) in enumerate(EDGES):
                if d != dst:
                    continue
                y = self.ops[k](nodes[src])
                total = y if total is None else total + y
            nodes.append(total)
        return nodes[3]


class ResidualBlock(nn.Module):
    """Two ReLU-conv-BN layers with an identity or avgpool+1x1 shortcut."""

    def __init__(self, c_in: int, c_out: int, stride: int):
        super().__init__()
        self.conv_a = ReLUConvBN(c_in, c_out, 3, stride)
        self.conv_b = ReLUConvBN(c_out, c_out, 3, 1)
        if stride == 2:
            self.shortcut = nn.Sequential(
                nn.AvgPool2d(2, 2), nn.Conv2d(c_in, c_out, 1, bias=False)
            )
        elif c_in != c_out:
            self.shortcut = nn.Conv2d(c_in, c_out, 1, bias=False)
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        return self.shortcut(x) + self.conv_b(self.conv_a(x))


class _Backbone(nn.Module):
    def __init__(self, skel: SkeletonConfig):
        super().__init__()
        self.skel = skel
        c_img = skel.input_shape[2]
        self.stem = nn.Sequential(
            nn.Conv2d(c_img, skel.base_width, 3, padding=1, bias=False),
            nn.BatchNorm2d(skel.base_width),
        )
        self.classifier = nn.Linear(skel.base_width * 2 ** (skel.stages - 1), skel.num_classes)

    def check_input(self, x: torch.Tensor) -> None:
        if x.dim() != 4 or tuple(x.shape[1:]) != self.skel.input_shape:
            raise ValueError(
                f"expected input (B, {', '.join(map(str, self.skel.input_shape))}), got {tuple(x.shape)}"
            )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        self.check_input(x)
        h = self.stem(x.permute(0, 3, 1, 2))
        h = self.body(h)
        h = h.mean(dim=(2, 3))
        return self.classifier(h)


class CellNetwork(_Backbone):
    """Stem -> stages of cells (width doubling, residual reduction between) -> GAP -> linear."""

    def __init__(self, arch: ArchSpec, skel: SkeletonConfig, init: InitSpec):
        super().__init__(skel)
        self.arch = arch
        self.init = init
        layers = []
        c = skel.base_width
        for s in range(skel.stages):
            if s > 0:
                layers.append(ResidualBlock(c, 2 * c, stride=2))
                c *= 2
            layers.extend(Cell(arch, c) for _ in range(skel.cells_per_stage))
        self.body = nn.Sequential(*layers)
        init_parameters(self, init)

    @property
    def arch_string(self) -> str:
        return format_arch(self.arch)


class ResidualBaseline(_Backbone):
    """Hand-designed comparison network: two residual blocks per stage."""

    arch_string = "resnet"

    def __init__(self, skel: SkeletonConfig, init: InitSpec):
        super().__init__(skel)
        self.arch = None
        self.init = init
        layers = []
        c = skel.base_width
        for s in range(skel.stages):
            c_out = skel.base_width * 2**s
            layers.append(ResidualBlock(c, c_out, stride=2 if s > 0 else 1))
            layers.append(ResidualBlock(c_out, c_out, stride=1))
            c = c_out
        self.body = nn.Sequential(*layers)
        init_parameters(self, init)


NetworkInstance = _Backbone


def build_network(a: ArchSpec, skel: SkeletonConfig, init: InitSpec) -> CellNetwork:
    return CellNetwork(a, skel, init)


def build_residual_baseline(skel: SkeletonConfig, init: InitSpec) -> ResidualBaseline:
    return ResidualBaseline(skel, init)


def forward(net: nn.Module, x: torch.Tensor) -> torch.Tensor:
    return net(x.to(next(net.parameters()).dtype))


def gradients(net: nn.Module, loss: torch.Tensor) -> dict[str, torch.Tensor]:
    """Reverse-mode gradient of a scalar loss for every named parameter."""
    if loss.dim() != 0:
        raise ValueError("loss must be a scalar")
    if not torch.isfinite(loss):
        raise FloatingPointError(f"non-finite loss {loss.item()}")
    names, params = zip(*net.named_parameters())
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    return {
        n: torch.zeros_like(p) if g is None else g for n, p, g in zip(names, params, grads)
    }


def count_parameters(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())


def skeleton_dict(skel: SkeletonConfig) -> dict:
    d = asdict(skel)
    d["input_shape"] = list(skel.input_shape)
    return d
