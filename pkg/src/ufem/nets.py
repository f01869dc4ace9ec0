"""Feature-space generators and PatchGAN discriminators.

All generators are residual around their input, so a zeroed output layer
gives the exact identity map.
"""

from __future__ import annotations

import math
import os
from contextlib import nullcontext
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn as nn

from . import tensorio

GENERATOR_ARCHITECTURES = ("flat_residual", "unet")
GENERATOR_INITS = ("near_identity", "identity", "standard")
OUT_ACTIVATIONS = ("none", "relu")


class NetSpecError(ValueError):
    pass


@dataclass(frozen=True)
class GeneratorSpec:
    architecture: str = "flat_residual"
    in_channels: int = 16
    base_width: int = 64
    residual_blocks: int = 4
    down_levels: int = 2
    init: str = "near_identity"
    # spatial size of the features the generator will see; enables build-time checks
    feature_size: int | None = None
    # "relu" keeps outputs in the non-negative domain of post-ReLU taps
    out_activation: str = "none"

    def __post_init__(self):
        if self.architecture not in GENERATOR_ARCHITECTURES:
            raise NetSpecError(f"unknown generator architecture {self.architecture!r}")
        if self.init not in GENERATOR_INITS:
            raise NetSpecError(f"unknown init {self.init!r}")
        if self.out_activation not in OUT_ACTIVATIONS:
            raise NetSpecError(f"unknown out_activation {self.out_activation!r}")
        if self.in_channels < 1 or self.base_width < 1:
            raise NetSpecError("channel counts must be positive")
        if self.architecture == "unet" and not 1 <= self.down_levels <= 3:
            raise NetSpecError(f"down_levels must be in 1..3, got {self.down_levels}")


@dataclass(frozen=True)
class DiscriminatorSpec:
    in_channels: int = 16
    layers: int = 3
    base_width: int = 64
    feature_size: int | None = None

    def __post_init__(self):
        if self.layers < 1:
            raise NetSpecError("a discriminator needs at least one layer")


def _conv3(cin, cout):
    return nn.Conv2d(cin, cout, 3, padding=1, padding_mode="replicate")


class ResidualBlock(nn.Module):
    def __init__(self, channels: int, width: int):
        super().__init__()
        self.body = nn.Sequential(
            _conv3(channels, width), nn.InstanceNorm2d(width, affine=True), nn.ReLU(),
            _conv3(width, channels),
        )

    @property
    def out_layer(self) -> nn.Conv2d:
        return self.body[-1]

    def forward(self, x):
        return x + self.body(x)


class FlatResidualGenerator(nn.Module):
    """Stack of residual blocks at full resolution, no down-sampling."""

    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        self.spec = spec
        self.blocks = nn.Sequential(*[ResidualBlock(spec.in_channels, spec.base_width)
                                      for _ in range(spec.residual_blocks)])

    def output_layers(self):
        return [b.out_layer for b in self.blocks]

    def forward(self, x):
        y = self.blocks(x)
        return torch.relu(y) if self.spec.out_activation == "relu" else y


def _cin(cin, cout):
    return nn.Sequential(_conv3(cin, cout), nn.InstanceNorm2d(cout, affine=True), nn.ReLU())


class UNetGenerator(nn.Module):
    """Encoder-decoder with skip connections and a global residual."""

    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        self.spec = spec
        w = spec.base_width
        widths = [w * 2 ** k for k in range(spec.down_levels + 1)]
        self.stem = _cin(spec.in_channels, widths[0])
        self.down = nn.ModuleList([
            nn.Sequential(nn.Conv2d(widths[k], widths[k + 1], 4, stride=2, padding=1, padding_mode="replicate"),
                          nn.InstanceNorm2d(widths[k + 1], affine=True), nn.ReLU())
            for k in range(spec.down_levels)
        ])
        self.up = nn.ModuleList([
            nn.Sequential(nn.Upsample(scale_factor=2, mode="nearest"), _cin(widths[k + 1], widths[k]))
            for k in reversed(range(spec.down_levels))
        ])
        self.fuse = nn.ModuleList([_cin(2 * widths[k], widths[k]) for k in reversed(range(spec.down_levels))])
        self.out = nn.Conv2d(widths[0], spec.in_channels, 1)

    def output_layers(self):
        return [self.out]

    def forward(self, x):
        step = 2 ** self.spec.down_levels
        if x.shape[-1] % step or x.shape[-2] % step:
            raise NetSpecError(f"spatial size {tuple(x.shape[-2:])} not divisible by {step}")
        h = self.stem(x)
        skips = []
        for d in self.down:
            skips.append(h)
            h = d(h)
        for up, fuse, s in zip(self.up, self.fuse, reversed(skips)):
            h = fuse(torch.cat([up(h), s], dim=1))
        y = x + self.out(h)
        return torch.relu(y) if self.spec.out_activation == "relu" else y


def _init_generator(g: nn.Module, mode: str):
    if mode == "standard":
        return
    with torch.no_grad():
        for layer in g.output_layers():
            if mode == "identity":
                layer.weight.zero_()
            else:
                layer.weight.normal_(0.0, 1e-5)
            layer.bias.zero_()


def build_generator(spec: GeneratorSpec, seed: int | None = None) -> nn.Module:
    if spec.architecture == "unet" and spec.feature_size is not None:
        step = 2 ** spec.down_levels
        if spec.feature_size < step:
            raise NetSpecError(f"{spec.down_levels} down-sampling levels reduce a "
                               f"{spec.feature_size}x{spec.feature_size} feature below 1x1")
        if spec.feature_size % step:
            raise NetSpecError(f"feature size {spec.feature_size} not divisible by {step}")
    ctx = torch.random.fork_rng(devices=[]) if seed is not None else nullcontext()
    with ctx:
        if seed is not None:
            torch.manual_seed(seed)
        cls = FlatResidualGenerator if spec.architecture == "flat_residual" else UNetGenerator
        g = cls(spec)
        _init_generator(g, spec.init)
    return g


class PatchDiscriminator(nn.Module):
    """PatchGAN: strided 4x4 convs, raw patch logits out (no final activation)."""

    def __init__(self, spec: DiscriminatorSpec):
        super().__init__()
        self.spec = spec
        layers: list[nn.Module] = []
        cin, size = spec.in_channels, spec.feature_size
        for k in range(spec.layers):
            cout = spec.base_width * min(2 ** k, 8)
            layers.append(nn.Conv2d(cin, cout, 4, stride=2, padding=1, padding_mode="replicate"))
            size = None if size is None else size // 2
            # instance norm is meaningless on a single position
            if k > 0 and size is not None and size > 1:
                layers.append(nn.InstanceNorm2d(cout, affine=True))
            layers.append(nn.LeakyReLU(0.2))
            cin = cout
        layers.append(nn.Conv2d(cin, 1, 3, padding=1, padding_mode="replicate"))
        self.model = nn.Sequential(*layers)

    def forward(self, x):
        return self.model(x)


def max_patch_layers(feature_size: int, cap: int = 3) -> int:
    return max(1, min(cap, int(math.log2(feature_size))))


def build_discriminator(spec: DiscriminatorSpec, seed: int | None = None) -> PatchDiscriminator:
    if spec.feature_size is not None and spec.feature_size // 2 ** spec.layers < 1:
        raise NetSpecError(f"{spec.layers} layers reduce a {spec.feature_size}x{spec.feature_size} "
                           f"feature below 1x1")
    ctx = torch.random.fork_rng(devices=[]) if seed is not None else nullcontext()
    with ctx:
        if seed is not None:
            torch.manual_seed(seed)
        return PatchDiscriminator(spec)


def _check_channels(net: nn.Module, x: torch.Tensor):
    want = net.spec.in_channels
    if x.dim() != 4 or x.shape[1] != want:
        raise NetSpecError(f"expected (B,{want},H,W) features, got {tuple(x.shape)}")


def generator_forward(g: nn.Module, f) -> torch.Tensor:
    x = f if isinstance(f, torch.Tensor) else f.data
    _check_channels(g, x)
    return g(x)


def discriminator_forward(d: PatchDiscriminator, f) -> torch.Tensor:
    x = f if isinstance(f, torch.Tensor) else f.data
    _check_channels(d, x)
    return d(x)


def parameter_count(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())


def spec_from_dict(d: dict):
    kind = d.pop("kind")
    return GeneratorSpec(**d) if kind == "generator" else DiscriminatorSpec(**d)


def spec_to_dict(spec) -> dict:
    kind = "generator" if isinstance(spec, GeneratorSpec) else "discriminator"
    return {"kind": kind, **asdict(spec)}


def save_net(net: nn.Module, path: str | os.PathLike, meta: dict | None = None) -> Path:
    info = {"spec": spec_to_dict(net.spec), **(meta or {})}
    return tensorio.save(path, net.state_dict(), "ufem-net", meta=info)


def load_net(path: str | os.PathLike) -> nn.Module:
    tensors, manifest = tensorio.load(path)
    spec = spec_from_dict(dict(manifest["meta"]["spec"]))
    net = build_generator(spec) if isinstance(spec, GeneratorSpec) else build_discriminator(spec)
    net.load_state_dict(tensors)
    return net

