"""Input-aware trigger generator: a mask network and a pattern ("mark") network.

Each network is an encoder/decoder of ConvBNReLU blocks (3 max-pool
downsamplings, 3 nearest upsamplings) ending in ConvBN + sigmoid, so masks
and patterns lie in [0, 1].
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import torch
import torch.nn as nn

from .netbuilder import InitSpec, init_parameters


@dataclass
class GeneratorConfig:
    input_shape: tuple[int, int, int] = (8, 8, 3)
    encoder_widths: tuple[int, ...] = (32, 64, 128)
    middle_width: int = 128
    pooling_stages: int = 3

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        self.encoder_widths = tuple(int(v) for v in self.encoder_widths)
        if len(self.encoder_widths) != self.pooling_stages:
            raise ValueError("need one encoder width per pooling stage")
        h, w, _ = self.input_shape
        div = 2**self.pooling_stages
        if h % div or w % div:
            raise ValueError(f"input {h}x{w} not divisible by {div}")


class TriggerBatch(NamedTuple):
    mask: torch.Tensor  # (B, H, W, 1)
    pattern: torch.Tensor  # (B, H, W, 3)


def conv_bn_relu(c_in: int, c_out: int, relu: bool = True) -> list[nn.Module]:
    layers = [nn.Conv2d(c_in, c_out, 3, padding=1, bias=False), nn.BatchNorm2d(c_out)]
    if relu:
        layers.append(nn.ReLU())
    return layers


class EncoderDecoder(nn.Module):
    def __init__(self, cfg: GeneratorConfig, out_channels: int):
        super().__init__()
        c_in = cfg.input_shape[2]
        layers: list[nn.Module] = []
        c = c_in
        for w in cfg.encoder_widths:
            layers += conv_bn_relu(c, w) + conv_bn_relu(w, w) + [nn.MaxPool2d(2)]
            c = w
        layers += conv_bn_relu(c, cfg.middle_width)
        c = cfg.middle_width
        widths = list(cfg.encoder_widths[::-1])
        for k, w in enumerate(widths):
            nxt = widths[k + 1] if k + 1 < len(widths) else out_channels
            last = k + 1 == len(widths)
            layers += [nn.Upsample(scale_factor=2)]
            layers += conv_bn_relu(c, w) + conv_bn_relu(w, nxt, relu=not last)
            c = nxt
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        # x: (B, H, W, C) -> (B, H, W, out)
        return torch.sigmoid(self.net(x.permute(0, 3, 1, 2))).permute(0, 2, 3, 1)


class TriggerGenerator(nn.Module):
    def __init__(self, cfg: GeneratorConfig, init: InitSpec):
        super().__init__()
        self.cfg = cfg
        self.init = init
        self.mask_net = EncoderDecoder(cfg, 1)
        self.mark_net = EncoderDecoder(cfg, cfg.input_shape[2])
        self.frozen_mask = False
        init_parameters(self, init)

    def freeze_mask(self) -> None:
        self.frozen_mask = True
        for p in self.mask_net.parameters():
            p.requires_grad_(False)
        self.mask_net.eval()

    def train(self, mode: bool = True):
        super().train(mode)
        if self.frozen_mask:
            self.mask_net.eval()
        return self

    def check_input(self, x: torch.Tensor) -> None:
        if x.dim() != 4 or tuple(x.shape[1:]) != self.cfg.input_shape:
            raise ValueError(f"expected input (B, {self.cfg.input_shape}), got {tuple(x.shape)}")

    def forward(self, x: torch.Tensor) -> TriggerBatch:
        self.check_input(x)
        return TriggerBatch(self.mask_net(x), self.mark_net(x))


GeneratorInstance = TriggerGenerator


def build_generator(cfg: GeneratorConfig, init: InitSpec) -> TriggerGenerator:
    return TriggerGenerator(cfg, init)


def generate_trigger(gen: TriggerGenerator, x: torch.Tensor) -> TriggerBatch:
    return gen(x.to(next(gen.parameters()).dtype))


def apply_trigger(x: torch.Tensor, r: TriggerBatch) -> torch.Tensor:
    """Blend ``x*(1-m) + p*m``; the mask broadcasts over channels."""
    m, p = r.mask, r.pattern
    if m.shape[:-1] != x.shape[:-1] or p.shape != x.shape or m.shape[-1] != 1:
        raise ValueError(f"trigger shapes {tuple(m.shape)}/{tuple(p.shape)} do not match {tuple(x.shape)}")
    return x * (1 - m) + p * m


def _pair_norm(a: torch.Tensor) -> torch.Tensor:
    return a.flatten(1).norm(dim=1)


def diversity_loss(
    x1: torch.Tensor,
    x2: torch.Tensor,
    t1: TriggerBatch,
    t2: TriggerBatch,
    component: str = "both",
    eps: float = 1e-6,
) -> torch.Tensor:
    """Mean over pairs of ||x1 - x2|| / max(||r1 - r2||, eps).

    ``component`` selects which part of the trigger enters the denominator:
    ``"mask"``, ``"pattern"`` or ``"both"`` (mask and pattern concatenated).
    """
    if x1.shape != x2.shape:
        raise ValueError("x1 and x2 must have the same shape")
    if component == "mask":
        d = t1.mask - t2.mask
    elif component == "pattern":
        d = t1.pattern - t2.pattern
    elif component == "both":
        d = torch.cat([t1.mask - t2.mask, t1.pattern - t2.pattern], dim=-1)
    else:
        raise ValueError(f"unknown component {component!r}")
    num = _pair_norm(x1 - x2)
    den = _pair_norm(d).clamp_min(eps)
    return (num / den).mean()


def shifted(t: torch.Tensor | TriggerBatch, shift: int = 1):
    """Cyclic shift along the batch axis (the pairing used for diversity and cross triggers)."""
    if isinstance(t, TriggerBatch):
        return TriggerBatch(*(torch.roll(v, shift, dims=0) for v in t))
    return torch.roll(t, shift, dims=0)


def mask_density(m: torch.Tensor) -> torch.Tensor:
    return m.mean()


def generator_parameters(gen: TriggerGenerator) -> list[tuple[str, torch.Tensor]]:
    """Named parameters of both heads (the generator's full parameter vector)."""
    return list(gen.named_parameters())
