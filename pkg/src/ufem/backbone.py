"""Frozen classifier backbones split into named tap points.

A backbone is a sequence of stages, each ending at a tap point (right after
the stage's nonlinearity, or after a max-pool that follows it), followed by a
classification head. Everything before the insertion tap is the shallow part
(SPL), everything after it the deep part (DPL).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Sequence

import torch
import torch.nn as nn

from . import tensorio

FEATURE_DOMAINS = ("clear", "degraded", "enhanced_stage1", "enhanced_stage2")


class BackboneError(ValueError):
    pass


@dataclass(frozen=True)
class TapPoint:
    name: str
    index: int
    output_shape: tuple[int, int, int]

    def __post_init__(self):
        if min(self.output_shape) < 1:
            raise BackboneError(f"tap {self.name}: invalid output shape {self.output_shape}")

    def __lt__(self, other: "TapPoint") -> bool:
        return self.index < other.index

    def __le__(self, other: "TapPoint") -> bool:
        return self.index <= other.index

    @property
    def channels(self) -> int:
        return self.output_shape[0]

    @property
    def spatial(self) -> tuple[int, int]:
        return self.output_shape[1], self.output_shape[2]


@dataclass
class FeatureMap:
    data: torch.Tensor
    tap: TapPoint
    domain_tag: str = "clear"

    def __post_init__(self):
        if self.domain_tag not in FEATURE_DOMAINS:
            raise ValueError(f"unknown feature domain {self.domain_tag!r}")
        if self.data.dim() == 3:
            self.data = self.data.unsqueeze(0)
        if not torch.isfinite(self.data).all():
            raise ValueError(f"non-finite entries in features at {self.tap.name}")


class StagedNet(nn.Module):
    """Sequential stages ending at taps, then a classification head."""

    def __init__(self, stages: Sequence[nn.Module], tap_names: Sequence[str], head: nn.Module,
                 mean=(0.5, 0.5, 0.5), std=(0.25, 0.25, 0.25)):
        super().__init__()
        assert len(stages) == len(tap_names)
        self.stages = nn.ModuleList(stages)
        self.tap_names = list(tap_names)
        self.head = head
        self.register_buffer("mean", torch.tensor(mean).view(1, 3, 1, 1), persistent=False)
        self.register_buffer("std", torch.tensor(std).view(1, 3, 1, 1), persistent=False)

    def run(self, x: torch.Tensor, start: int = 0, stop: int | None = None,
            logits: bool = True) -> torch.Tensor:
        """Apply stages[start:stop]; the head too when ``stop`` is None and ``logits``."""
        if start == 0:
            x = (x - self.mean) / self.std
        end = len(self.stages) if stop is None else stop
        for stage in self.stages[start:end]:
            x = stage(x)
        if stop is None and logits:
            x = self.head(x)
        return x

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.run(x)


def _vgg_block(cin: int, cout: int, convs: int) -> nn.Sequential:
    layers: list[nn.Module] = []
    for k in range(convs):
        layers += [nn.Conv2d(cin if k == 0 else cout, cout, 3, padding=1), nn.ReLU()]
    layers.append(nn.MaxPool2d(2))
    return nn.Sequential(*layers)


def tinyvgg(num_classes: int = 10, widths=(16, 32, 64, 128), convs=(1, 2, 2, 2)) -> StagedNet:
    stages = []
    cin = 3
    for w, n in zip(widths, convs):
        stages.append(_vgg_block(cin, w, n))
        cin = w
    head = nn.Sequential(nn.AdaptiveAvgPool2d(1), nn.Flatten(), nn.Linear(cin, num_classes))
    return StagedNet(stages, [f"block{i + 1}" for i in range(len(stages))], head)


def vgg16(num_classes: int = 1000) -> StagedNet:
    """torchvision VGG16 re-cut at every conv ReLU (conv1_1 ... conv5_3)."""
    from torchvision.models import vgg16 as tv_vgg16

    tv = tv_vgg16(weights=None, num_classes=num_classes)
    stages, names, pending = [], [], []
    block, conv = 1, 0
    for layer in tv.features:
        pending.append(layer)
        if isinstance(layer, nn.MaxPool2d):
            block, conv = block + 1, 0
        elif isinstance(layer, nn.ReLU):
            conv += 1
            stages.append(nn.Sequential(*pending))
            names.append(f"conv{block}_{conv}")
            pending = []
    head = nn.Sequential(*pending, tv.avgpool, nn.Flatten(), tv.classifier)
    return StagedNet(stages, names, head, mean=(0.485, 0.456, 0.406), std=(0.229, 0.224, 0.225))


ARCHITECTURES: dict[str, Callable[..., StagedNet]] = {"tinyvgg": tinyvgg, "vgg16": vgg16}
DEFAULT_CLASSES = {"tinyvgg": 10, "vgg16": 1000}
DEFAULT_RESOLUTION = {"tinyvgg": 32, "vgg16": 224}


@dataclass
class BackboneHandle:
    architecture_id: str
    net: StagedNet
    tap_points: list[TapPoint]
    class_count: int
    input_resolution: tuple[int, int]
    frozen: bool = True
    meta: dict = field(default_factory=dict)

    def tap(self, name: str | TapPoint) -> TapPoint:
        if isinstance(name, TapPoint):
            if name not in self.tap_points:
                raise BackboneError(f"tap {name.name!r} does not belong to {self.architecture_id}")
            return name
        for t in self.tap_points:
            if t.name == name:
                return t
        raise BackboneError(f"unknown tap {name!r} for {self.architecture_id}; "
                            f"available: {[t.name for t in self.tap_points]}")

    def successors(self, tap: str | TapPoint) -> list[TapPoint]:
        t = self.tap(tap)
        return [p for p in self.tap_points if p.index > t.index]

    def default_insertion_tap(self) -> TapPoint:
        half = min(self.input_resolution) / 2
        for t in self.tap_points:
            if max(t.spatial) <= half:
                return t
        return self.tap_points[0]

    def parameters_digest(self) -> str:
        return tensorio.state_digest(self.net.state_dict())

    @torch.no_grad()
    def forward(self, images: torch.Tensor) -> torch.Tensor:
        self._check_images(images)
        return self.net(images)

    def _check_images(self, images: torch.Tensor):
        if images.dim() != 4 or images.shape[1] != 3:
            raise BackboneError(f"expected (B,3,H,W) images, got {tuple(images.shape)}")
        if tuple(images.shape[-2:]) != self.input_resolution:
            raise BackboneError(
                f"wrong input resolution {tuple(images.shape[-2:])}, "
                f"backbone declared {self.input_resolution}")

    def state_dict(self):
        return self.net.state_dict()

    def save(self, path: str | os.PathLike, meta: dict | None = None) -> Path:
        info = {"class_count": self.class_count, "input_resolution": list(self.input_resolution)}
        info.update(meta or {})
        return tensorio.save(path, self.net.state_dict(), self.architecture_id, meta=info)


def bundled_weights_path(architecture_id: str) -> Path:
    return Path(str(resources.files("ufem") / "weights" / f"{architecture_id}.ufnt"))


def _freeze(net: nn.Module) -> None:
    net.eval()
    for p in net.parameters():
        p.requires_grad_(False)


def _apply_weights(net: nn.Module, tensors, architecture_id: str, manifest: dict) -> None:
    if manifest.get("architecture_id") != architecture_id:
        raise BackboneError(
            f"weights are for {manifest.get('architecture_id')!r}, not {architecture_id!r}")
    own = net.state_dict()
    for name, ref in own.items():
        if name not in tensors:
            raise BackboneError(f"weight file is missing tensor {name!r}")
        if tuple(tensors[name].shape) != tuple(ref.shape):
            raise BackboneError(
                f"shape mismatch for tensor {name!r}: file has {tuple(tensors[name].shape)}, "
                f"architecture expects {tuple(ref.shape)}")
    extra = [k for k in tensors if k not in own]
    if extra:
        raise BackboneError(f"weight file has unexpected tensor {extra[0]!r}")
    net.load_state_dict(tensors)


def load_backbone(
    architecture_id: str,
    weights_source: str | os.PathLike | None = "bundled",
    input_resolution: int | tuple[int, int] | None = None,
    class_count: int | None = None,
    seed: int = 0,
    frozen: bool = True,
) -> BackboneHandle:
    """Build a backbone and load its weights.

    ``weights_source`` is ``"bundled"`` (the weights shipped with the
    package), ``"init"``/``None`` (seeded random initialization), or a path to
    a named-tensor file.
    """
    if architecture_id not in ARCHITECTURES:
        raise BackboneError(f"unknown architecture_id {architecture_id!r}; "
                            f"known: {sorted(ARCHITECTURES)}")
    res = input_resolution or DEFAULT_RESOLUTION[architecture_id]
    res = (res, res) if isinstance(res, int) else tuple(res)

    tensors = manifest = None
    if weights_source not in (None, "init"):
        path = bundled_weights_path(architecture_id) if weights_source == "bundled" else Path(weights_source)
        if not path.exists():
            raise BackboneError(f"weights not found: {path}")
        tensors, manifest = tensorio.load(path)
        if class_count is None:
            class_count = manifest.get("meta", {}).get("class_count")
    class_count = class_count or DEFAULT_CLASSES[architecture_id]

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = ARCHITECTURES[architecture_id](num_classes=class_count)
    if tensors is not None:
        _apply_weights(net, tensors, architecture_id, manifest)
    if frozen:
        _freeze(net)
    else:
        net.eval()

    taps = []
    with torch.no_grad():
        x = torch.zeros(1, 3, *res)
        x = (x - net.mean) / net.std
        for i, (name, stage) in enumerate(zip(net.tap_names, net.stages)):
            x = stage(x)
            taps.append(TapPoint(name, i, tuple(x.shape[1:])))
    meta = dict(manifest.get("meta", {})) if manifest else {}
    return BackboneHandle(architecture_id, net, taps, class_count, res, frozen, meta)


def _as_tensor(features: FeatureMap | torch.Tensor) -> torch.Tensor:
    return features.data if isinstance(features, FeatureMap) else features


def extract_features(handle: BackboneHandle, images: torch.Tensor, tap: str | TapPoint,
                     domain_tag: str = "clear", grad: bool = False) -> FeatureMap:
    t = handle.tap(tap)
    handle._check_images(images)
    with torch.set_grad_enabled(grad):
        data = handle.net.run(images, 0, t.index + 1)
    return FeatureMap(data, t, domain_tag)


def forward_from(handle: BackboneHandle, features: FeatureMap | torch.Tensor,
                 from_tap: str | TapPoint, to: str | TapPoint = "logits") -> torch.Tensor:
    """Run the frozen suffix starting right after ``from_tap``.

    Differentiable with respect to ``features``; backbone parameters stay
    frozen.
    """
    src = handle.tap(from_tap)
    if isinstance(features, FeatureMap) and features.tap != src:
        raise BackboneError(f"features were tapped at {features.tap.name}, not {src.name}")
    x = _as_tensor(features)
    if tuple(x.shape[1:]) != src.output_shape:
        raise BackboneError(f"feature shape {tuple(x.shape[1:])} does not match tap "
                            f"{src.name} {src.output_shape}")
    if isinstance(to, str) and to == "logits":
        return handle.net.run(x, src.index + 1, None)
    dst = handle.tap(to)
    if dst.index <= src.index:
        raise BackboneError(f"tap ordering violated: {src.name} -> {dst.name}")
    return handle.net.run(x, src.index + 1, dst.index + 1)


class AugmentedBackbone(nn.Module):
    """DPL(enhancer(SPL(x))): a frozen backbone with a module spliced in at a tap."""

    def __init__(self, handle: BackboneHandle, enhancer: nn.Module | Callable, tap: TapPoint):
        super().__init__()
        self.handle = handle
        self.enhancer = enhancer
        self.tap = tap

    def enhance(self, images: torch.Tensor) -> torch.Tensor:
        f = self.handle.net.run(images, 0, self.tap.index + 1)
        return self.enhancer(f)

    @torch.no_grad()
    def forward(self, images: torch.Tensor) -> torch.Tensor:
        self.handle._check_images(images)
        return self.handle.net.run(self.enhance(images), self.tap.index + 1, None)


def insert_module(handle: BackboneHandle, enhancer, tap: str | TapPoint | None = None) -> AugmentedBackbone:
    t = handle.default_insertion_tap() if tap is None else handle.tap(tap)
    if isinstance(enhancer, nn.Module):
        enhancer.eval()
    probe = torch.zeros(1, *t.output_shape)
    with torch.no_grad():
        out = enhancer(probe)
    if tuple(out.shape) != tuple(probe.shape):
        raise BackboneError(f"enhancer changes feature shape at {t.name}: "
                            f"{tuple(probe.shape[1:])} -> {tuple(out.shape[1:])}")
    return AugmentedBackbone(handle, enhancer, t)
