"""Frozen UFEM composition, checkpoints, and the classification harness."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import tensorio
from .backbone import BackboneHandle, insert_module, load_backbone
from .data import DatasetManifest, DegradationSpec, degrade_batch
from .nets import GeneratorSpec, build_generator
from .stage1 import Stage1Checkpoint
from .stage2 import Stage2Checkpoint
from .training import set_requires_grad


class CompositionError(ValueError):
    pass


# --------------------------------------------------------------------------- backbone training

@dataclass
class BackboneRecipe:
    architecture_id: str = "tinyvgg"
    epochs: int = 12
    batch: int = 64
    lr: float = 2e-3
    seed: int = 0


def train_backbone(images: torch.Tensor, labels: torch.Tensor, recipe: BackboneRecipe = BackboneRecipe(),
                   log=None) -> BackboneHandle:
    """Train a backbone from scratch on clean images; returns it frozen."""
    handle = load_backbone(recipe.architecture_id, "init", tuple(images.shape[-2:]),
                           class_count=int(labels.max()) + 1 if labels.numel() else None,
                           seed=recipe.seed, frozen=False)
    net = handle.net
    set_requires_grad([net], True)
    net.train()
    opt = torch.optim.Adam(net.parameters(), lr=recipe.lr)
    gen = torch.Generator().manual_seed(recipe.seed)
    for epoch in range(recipe.epochs):
        perm = torch.randperm(len(images), generator=gen)
        total = 0.0
        for i in range(0, len(images), recipe.batch):
            idx = perm[i:i + recipe.batch]
            opt.zero_grad(set_to_none=True)
            loss = F.cross_entropy(net(images[idx]), labels[idx])
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
        if log is not None:
            log(epoch, total / len(images))
    net.eval()
    set_requires_grad([net], False)
    handle.frozen = True
    return handle


BUNDLED_TRAIN = {"n_per_class": 600, "seed": 1}


def train_bundled_tinyvgg(path=None, recipe: BackboneRecipe = BackboneRecipe(), log=None) -> BackboneHandle:
    """Rebuild the shipped tinyvgg weights: the fixed recipe on synthetic shapes10 train images."""
    from . import synth
    from .data import to_tensor

    images, labels = synth.make_dataset(**BUNDLED_TRAIN)
    handle = train_backbone(to_tensor(images), torch.as_tensor(labels), recipe, log)
    if path is not None:
        handle.save(path, meta={"recipe": recipe.__dict__, "data": {"dataset": "shapes10", **BUNDLED_TRAIN}})
    return handle


# --------------------------------------------------------------------------- UFEM

class UFEM(nn.Module):
    def __init__(self, g_d2c: nn.Module | None, g_e2c: nn.Module | None):
        super().__init__()
        self.g_d2c = g_d2c if g_d2c is not None else nn.Identity()
        self.g_e2c = g_e2c if g_e2c is not None else nn.Identity()

    def forward(self, f):
        return self.g_e2c(self.g_d2c(f))


@dataclass
class UFEMCheckpoint:
    g_d2c: nn.Module
    g_e2c: nn.Module
    enhancement_tap: str
    architecture_id: str
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        for g in (self.g_d2c, self.g_e2c):
            g.eval()
            set_requires_grad([g], False)

    @property
    def enhancer(self) -> UFEM:
        return UFEM(self.g_d2c, self.g_e2c).eval()

    def digest(self) -> str:
        return tensorio.state_digest(self._tensors())

    def _tensors(self):
        out = {f"g_d2c.{k}": v for k, v in self.g_d2c.state_dict().items()}
        out.update({f"g_e2c.{k}": v for k, v in self.g_e2c.state_dict().items()})
        return out

    def save(self, path, byteorder: str = "little") -> Path:
        meta = {
            "kind": "ufem",
            "enhancement_tap": self.enhancement_tap,
            "backbone": self.architecture_id,
            "g_d2c_spec": dict(self.g_d2c.spec.__dict__),
            "g_e2c_spec": dict(self.g_e2c.spec.__dict__),
            "provenance": self.provenance,
        }
        return tensorio.save(path, self._tensors(), "ufem", meta=meta, byteorder=byteorder)


def save_checkpoint(c: UFEMCheckpoint, path, byteorder: str = "little") -> Path:
    return c.save(path, byteorder)


def load_checkpoint(path) -> UFEMCheckpoint:
    tensors, manifest = tensorio.load(path)
    meta = manifest.get("meta", {})
    if meta.get("kind") != "ufem":
        raise tensorio.ContainerError(f"{path} is not a UFEM checkpoint")
    g1 = build_generator(GeneratorSpec(**meta["g_d2c_spec"]))
    g2 = build_generator(GeneratorSpec(**meta["g_e2c_spec"]))
    g1.load_state_dict({k[6:]: v for k, v in tensors.items() if k.startswith("g_d2c.")})
    g2.load_state_dict({k[6:]: v for k, v in tensors.items() if k.startswith("g_e2c.")})
    return UFEMCheckpoint(g1, g2, meta["enhancement_tap"], meta["backbone"], meta.get("provenance", {}))


def identity_generator(channels: int) -> nn.Module:
    return build_generator(GeneratorSpec(in_channels=channels, residual_blocks=1, base_width=1, init="identity"))


def compose_ufem(s1: Stage1Checkpoint, s2: Stage2Checkpoint, provenance: dict | None = None) -> UFEMCheckpoint:
    if s1.architecture_id != s2.architecture_id:
        raise CompositionError(f"backbone mismatch: {s1.architecture_id} vs {s2.architecture_id}")
    if s1.enhancement_tap != s2.enhancement_tap:
        raise CompositionError(f"tap mismatch: {s1.enhancement_tap} vs {s2.enhancement_tap}")
    prov = {"stage1": s1.config.to_dict(), "stage2": s2.config.to_dict(),
            "stage1_steps": s1.step, "stage2_steps": s2.step}
    prov.update(provenance or {})
    return UFEMCheckpoint(s1.g_d2c, s2.g_e2c, s1.enhancement_tap, s1.architecture_id, prov)


# --------------------------------------------------------------------------- evaluation

@dataclass
class EvalReport:
    top1: float
    per_class: list[float | None]
    class_counts: list[int]
    n_images: int
    condition: dict
    predictions: list[int] = field(default_factory=list, repr=False)

    def to_json(self) -> str:
        d = {"condition": self.condition, "n_images": self.n_images, "top1": self.top1,
             "per_class": self.per_class, "class_counts": self.class_counts}
        return json.dumps(d, sort_keys=False, indent=1)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json() + "\n", encoding="utf-8")
        return path


def report_from_predictions(pred, labels, class_count: int, condition: dict | None = None) -> EvalReport:
    pred = np.asarray(pred)
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("cannot evaluate an empty set")
    correct = pred == labels
    counts = np.bincount(labels, minlength=class_count)
    hits = np.bincount(labels, weights=correct, minlength=class_count)
    per_class = [float(h / c) if c else None for h, c in zip(hits, counts)]
    return EvalReport(float(correct.mean()), per_class, counts.tolist(), int(len(labels)),
                      dict(condition or {}), pred.tolist())


def report_from_logits(logits, labels, class_count: int | None = None, condition=None) -> EvalReport:
    logits = torch.as_tensor(logits)
    return report_from_predictions(logits.argmax(dim=1).numpy(), labels,
                                   class_count or logits.shape[1], condition)


def _enhancer_of(ufem):
    if ufem is None:
        return None
    if isinstance(ufem, UFEMCheckpoint):
        return ufem.enhancer, ufem.enhancement_tap
    return ufem


@torch.no_grad()
def evaluate_classification(handle: BackboneHandle, ufem, source, labels=None,
                            degradation: DegradationSpec | None = None, batch: int = 250,
                            tap=None) -> EvalReport:
    """Top-1 accuracy of the backbone, optionally with an enhancer spliced in.

    ``ufem`` is None (baseline), a UFEMCheckpoint, or any shape-preserving
    module (inserted at ``tap``). ``source`` is a manifest or an image tensor
    with ``labels``. ``degradation`` is applied on the fly, image ``i``
    seeded from ``degradation.seed`` and ``i``.
    """
    if isinstance(source, DatasetManifest):
        images, labels = source.load(), source.labels
    else:
        images, labels = source, torch.as_tensor(labels)
    if len(images) == 0:
        raise ValueError("cannot evaluate an empty set")
    if int(labels.max()) >= handle.class_count:
        raise ValueError(f"label {int(labels.max())} outside backbone class_count {handle.class_count}")
    if degradation is not None:
        images = degrade_batch(images, degradation)

    enh = _enhancer_of(ufem)
    if enh is None:
        model = handle.forward
    elif isinstance(enh, tuple):
        model = insert_module(handle, enh[0], enh[1])
    else:
        model = insert_module(handle, enh, tap)
    logits = torch.cat([model(images[i:i + batch]) for i in range(0, len(images), batch)])
    condition = {
        "degradation": None if degradation is None else
        {"kind": degradation.kind, "severity": degradation.severity, "seed": degradation.seed},
        "enhancer": enh is not None,
    }
    return report_from_logits(logits, labels.numpy(), handle.class_count, condition)


@dataclass
class AblationTable:
    rows: list[tuple[str, float]]
    condition: dict

    def row(self, name: str) -> float:
        return dict(self.rows)[name]

    def to_text(self) -> str:
        lines = ["variant\ttop1"] + [f"{n}\t{v * 100:.2f}" for n, v in self.rows]
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps({"condition": self.condition, "rows": [{"variant": n, "top1": v} for n, v in self.rows]},
                          indent=1)


def ablation_report(handle: BackboneHandle, source, s1: Stage1Checkpoint, s2: Stage2Checkpoint,
                    labels=None, degradation: DegradationSpec | None = None) -> AblationTable:
    """Baseline vs stage-1 only vs stage-2 only vs both, on the same images."""
    if s1.enhancement_tap != s2.enhancement_tap or s1.architecture_id != s2.architecture_id:
        raise CompositionError("stage checkpoints do not share backbone and tap")
    tap = s1.enhancement_tap
    variants = [
        ("baseline", None),
        ("S1 only", UFEM(s1.g_d2c, None)),
        ("S2 only", UFEM(None, s2.g_e2c)),
        ("S1+S2", UFEM(s1.g_d2c, s2.g_e2c)),
    ]
    rows, cond = [], {}
    for name, enh in variants:
        rep = evaluate_classification(handle, enh, source, labels, degradation, tap=tap)
        rows.append((name, rep.top1))
        cond = rep.condition
    cond = {"degradation": cond.get("degradation"), "tap": tap, "n_images": rep.n_images}
    return AblationTable(rows, cond)
