"""Stage 2: modulate channel correlations of stage-1 output toward clear statistics.

G_E2C refines EF = G_D2C(SPL(degraded)). Its output is pushed through the
frozen backbone; the Gram matrices at several taps are pulled toward the
batch-mean Gram of unpaired clear features, while a deep content term keeps
it close to EF and a single discriminator at the enhancement tap judges it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn as nn

from . import losses, tensorio
from .backbone import BackboneError, BackboneHandle, TapPoint
from .data import UnpairedSampler, as_images
from .dcp import gram_matrix
from .nets import DiscriminatorSpec, GeneratorSpec, build_discriminator, build_generator, max_patch_layers
from .stage1 import push, tap_features
from .training import (SCHEDULES, FeatureHistory, LossLog, TrainingError, augment_images,
                       check_finite, config_from_dict, config_to_dict, diagnose_batch, lr_lambda,
                       modules_digest, pack_modules, set_requires_grad, unpack_modules)

CONTENT_ANCHORS = ("stage1", "clear")


@dataclass
class Stage2Config:
    lambda_corr: float = 1000.0
    lambda_adv: float = 5.0
    lambda_content: float = 10.0
    layer_weights: tuple[float, ...] = (1.0, 2.0, 3.0, 4.0)
    # None: the enhancement tap and the taps after it, one per layer weight
    correlation_taps: tuple[str, ...] | None = None
    # None: the deepest correlation tap
    content_tap: str | None = None
    content_anchor: str = "stage1"
    correlation_mode: str = "l1"
    gram_normalization: str = "raw"
    # "batch_mean": clear target is the batch-mean Gram; "paired": sample i vs clear sample i
    gram_target: str = "batch_mean"
    gan_mode: str = "least_squares"
    lr_G: float = 2e-4
    lr_D: float = 1e-4
    betas: tuple[float, float] = (0.5, 0.999)
    epochs: int = 200
    batch: int = 5
    schedule: str = "linear_decay"
    decay_start: float = 0.5
    history_buffer: int = 50
    seed: int = 0
    g_architecture: str = "flat_residual"
    g_base_width: int = 64
    g_residual_blocks: int = 4
    g_down_levels: int = 2
    g_init: str = "near_identity"
    g_out_activation: str = "relu"
    d_base_width: int = 64
    d_layers: int = 3
    augment: bool = True
    augment_shift: int = 4
    checkpoint_every: int = 0

    def __post_init__(self):
        self.layer_weights = tuple(float(w) for w in self.layer_weights)
        self.betas = tuple(self.betas)
        if self.correlation_taps is not None:
            self.correlation_taps = tuple(self.correlation_taps)
            if len(self.correlation_taps) != len(self.layer_weights):
                raise ValueError("one layer weight per correlation tap is required")
        if min(self.lambda_corr, self.lambda_adv, self.lambda_content) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.content_anchor not in CONTENT_ANCHORS:
            raise ValueError(f"content_anchor must be one of {CONTENT_ANCHORS}")
        if self.correlation_mode not in losses.CORRELATION_MODES:
            raise ValueError(f"unknown correlation_mode {self.correlation_mode!r}")
        if self.gram_target not in ("batch_mean", "paired"):
            raise ValueError(f"unknown gram_target {self.gram_target!r}")
        if self.gan_mode not in losses.GAN_MODES:
            raise ValueError(f"unknown gan_mode {self.gan_mode!r}")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.epochs < 0 or self.batch < 1:
            raise ValueError("epochs must be >= 0 and batch >= 1")

    def generator_spec(self, tap: TapPoint) -> GeneratorSpec:
        return GeneratorSpec(self.g_architecture, tap.channels, self.g_base_width,
                             self.g_residual_blocks, self.g_down_levels, self.g_init,
                             feature_size=min(tap.spatial), out_activation=self.g_out_activation)

    def resolve_taps(self, handle: BackboneHandle, enhancement_tap) -> tuple[list[TapPoint], TapPoint]:
        t0 = handle.tap(enhancement_tap)
        if self.correlation_taps is None:
            taps = [t0] + handle.successors(t0)
            if len(taps) < len(self.layer_weights):
                raise BackboneError(f"need {len(self.layer_weights)} correlation taps from {t0.name}, "
                                    f"backbone has {len(taps)}")
            taps = taps[:len(self.layer_weights)]
        else:
            taps = [handle.tap(n) for n in self.correlation_taps]
        if any(b.index <= a.index for a, b in zip(taps, taps[1:])):
            raise BackboneError("correlation taps must be strictly increasing in depth")
        if taps[0].index < t0.index:
            raise BackboneError("correlation taps cannot precede the enhancement tap")
        content = taps[-1] if self.content_tap is None else handle.tap(self.content_tap)
        if content.index < t0.index:
            raise BackboneError("content tap cannot precede the enhancement tap")
        return taps, content

    def to_dict(self) -> dict:
        return config_to_dict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Stage2Config":
        return config_from_dict(cls, d)


@dataclass
class Stage2Breakdown:
    step: int
    epoch: int
    corr: float
    corr_layers: list[float]
    adv: float
    content: float
    total_G: float
    total_D: float

    def record(self) -> dict:
        return dict(self.__dict__)


@dataclass
class Stage2Checkpoint:
    config: Stage2Config
    architecture_id: str
    enhancement_tap: str
    correlation_taps: tuple[str, ...]
    content_tap: str
    g_e2c: nn.Module
    d_clear: nn.Module
    step: int = 0
    log: list[dict] = field(default_factory=list, repr=False)

    def modules(self) -> dict[str, nn.Module]:
        return {"g_e2c": self.g_e2c, "d_clear": self.d_clear}

    def digest(self) -> str:
        return modules_digest(self.modules())

    def save(self, path) -> Path:
        meta = {
            "kind": "stage2",
            "config": self.config.to_dict(),
            "backbone": self.architecture_id,
            "enhancement_tap": self.enhancement_tap,
            "correlation_taps": list(self.correlation_taps),
            "content_tap": self.content_tap,
            "step": self.step,
            "g_spec": dict(self.g_e2c.spec.__dict__),
            "d_spec": dict(self.d_clear.spec.__dict__),
        }
        return tensorio.save(path, pack_modules(self.modules()), "ufem-stage2", meta=meta)

    @classmethod
    def load(cls, path) -> "Stage2Checkpoint":
        tensors, manifest = tensorio.load(path)
        meta = manifest["meta"]
        if meta.get("kind") != "stage2":
            raise ValueError(f"{path} is not a stage-2 checkpoint")
        ck = cls(Stage2Config.from_dict(meta["config"]), meta["backbone"], meta["enhancement_tap"],
                 tuple(meta["correlation_taps"]), meta["content_tap"],
                 build_generator(GeneratorSpec(**meta["g_spec"])),
                 build_discriminator(DiscriminatorSpec(**meta["d_spec"])), meta["step"])
        unpack_modules(tensors, ck.modules())
        return ck


def init_stage2(cfg: Stage2Config, handle: BackboneHandle, enhancement_tap) -> Stage2Checkpoint:
    t0 = handle.tap(enhancement_tap)
    taps, content = cfg.resolve_taps(handle, t0)
    base = cfg.seed * 100 + 50
    size = min(t0.spatial)
    dspec = DiscriminatorSpec(t0.channels, min(cfg.d_layers, max_patch_layers(size)), cfg.d_base_width, size)
    return Stage2Checkpoint(cfg, handle.architecture_id, t0.name, tuple(t.name for t in taps), content.name,
                            build_generator(cfg.generator_spec(t0), seed=base + 1),
                            build_discriminator(dspec, seed=base + 2))


def _walk(handle: BackboneHandle, x: torch.Tensor, src: TapPoint, taps: list[TapPoint]) -> list[torch.Tensor]:
    """Features at each of ``taps`` (increasing depth), reusing the previous segment."""
    out, cur, at = [], x, src
    for t in taps:
        cur = push(handle, cur, at, t)
        at = t
        out.append(cur)
    return out


def stage2_generator_losses(ck: Stage2Checkpoint, handle: BackboneHandle, ef: torch.Tensor,
                            clear_targets: list[torch.Tensor], anchor_content: torch.Tensor) -> dict:
    cfg = ck.config
    t0 = handle.tap(ck.enhancement_tap)
    taps = [handle.tap(n) for n in ck.correlation_taps]
    content_tap = handle.tap(ck.content_tap)
    ef_t = ck.g_e2c(ef)
    walk_taps = sorted(set(taps) | {content_tap})
    feats = dict(zip(walk_taps, _walk(handle, ef_t, t0, walk_taps)))
    grams = [gram_matrix(feats[t], cfg.gram_normalization) for t in taps]
    per_layer = [losses.correlation_loss([g], [c], [1.0], cfg.correlation_mode)
                 for g, c in zip(grams, clear_targets)]
    corr = sum(w * l for w, l in zip(cfg.layer_weights, per_layer))
    content = losses.content_loss(anchor_content, feats[content_tap])
    adv = losses.generator_adv_loss(ck.d_clear(ef_t), cfg.gan_mode)
    total = losses.stage2_objective(corr, adv, content, (cfg.lambda_corr, cfg.lambda_adv, cfg.lambda_content))
    return {"ef_t": ef_t, "corr": corr, "corr_layers": per_layer, "adv": adv,
            "content": content, "total": total}


def train_stage2(config: Stage2Config, clear, degraded, handle: BackboneHandle, g_d2c: nn.Module,
                 enhancement_tap=None, log_path=None, checkpoint_dir=None,
                 init: Stage2Checkpoint | None = None, on_epoch=None) -> Stage2Checkpoint:
    cfg = config
    t0 = handle.default_insertion_tap() if enhancement_tap is None else handle.tap(enhancement_tap)
    ck = init or init_stage2(cfg, handle, t0)
    taps = [handle.tap(n) for n in ck.correlation_taps]
    content_tap = handle.tap(ck.content_tap)
    backbone_digest = handle.parameters_digest()
    g_d2c_digest = tensorio.state_digest(g_d2c.state_dict())
    g_d2c.eval()
    set_requires_grad([g_d2c], False)

    img_clear, img_deg = as_images(clear), as_images(degraded)

    def prepare(xc, xd):
        with torch.no_grad():
            ef = g_d2c(xd)
            grams = [gram_matrix(f, cfg.gram_normalization) for f in _walk(handle, xc, t0, taps)]
            ef_content = push(handle, ef, t0, content_tap)
            clear_content = push(handle, xc, t0, content_tap)
        return xc, ef, grams, ef_content, clear_content

    if not cfg.augment:
        fixed = prepare(tap_features(handle, img_clear, t0), tap_features(handle, img_deg, t0))
    aug_gen = torch.Generator().manual_seed(cfg.seed * 1000 + 29)

    def batch_features(ic, idg):
        if not cfg.augment:
            xc, ef, grams, efc, cc = fixed
            return xc[ic], ef[idg], [g[ic] for g in grams], efc[idg], cc[ic]
        xc = tap_features(handle, augment_images(img_clear[ic], aug_gen, cfg.augment_shift), t0)
        xd = tap_features(handle, augment_images(img_deg[idg], aug_gen, cfg.augment_shift), t0)
        return prepare(xc, xd)

    opt_g = torch.optim.Adam(ck.g_e2c.parameters(), lr=cfg.lr_G, betas=cfg.betas)
    opt_d = torch.optim.Adam(ck.d_clear.parameters(), lr=cfg.lr_D, betas=cfg.betas)
    sched = [torch.optim.lr_scheduler.LambdaLR(o, lr_lambda(cfg.schedule, cfg.epochs, cfg.decay_start))
             for o in (opt_g, opt_d)]
    sampler = UnpairedSampler(len(img_clear), len(img_deg), cfg.batch, cfg.seed)
    pool = FeatureHistory(cfg.history_buffer, seed=cfg.seed * 7 + 3)
    steps_per_epoch = math.ceil(max(len(img_clear), len(img_deg)) / cfg.batch)
    log = LossLog(log_path)

    set_requires_grad([ck.g_e2c, ck.d_clear], True)
    ck.g_e2c.train()
    ck.d_clear.train()
    step = ck.step
    try:
        for epoch in range(cfg.epochs):
            for _ in range(steps_per_epoch):
                ic, idg = sampler.next()
                x_c, ef, grams, ef_content, clear_content = batch_features(ic, idg)
                if cfg.gram_target == "batch_mean":
                    targets = [g.mean(dim=0) for g in grams]
                else:
                    targets = grams
                anchor = ef_content if cfg.content_anchor == "stage1" else clear_content

                set_requires_grad([ck.d_clear], False)
                opt_g.zero_grad(set_to_none=True)
                with diagnose_batch(step + 1, (ic.tolist(), idg.tolist())):
                    g = stage2_generator_losses(ck, handle, ef, targets, anchor)
                g["total"].backward()
                opt_g.step()

                set_requires_grad([ck.d_clear], True)
                opt_d.zero_grad(set_to_none=True)
                fake = pool.push_and_pop(g["ef_t"])
                loss_d = losses.discriminator_loss(ck.d_clear(x_c), ck.d_clear(fake), cfg.gan_mode)
                loss_d.backward()
                opt_d.step()

                step += 1
                rec = Stage2Breakdown(step, epoch, _f(g["corr"]), [_f(v) for v in g["corr_layers"]],
                                      _f(g["adv"]), _f(g["content"]), _f(g["total"]), _f(loss_d)).record()
                check_finite(rec, step, (ic.tolist(), idg.tolist()))
                log.append(rec)
            for s in sched:
                s.step()
            if on_epoch is not None:
                on_epoch(epoch, ck)
            if checkpoint_dir and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                ck.step = step
                ck.save(Path(checkpoint_dir) / f"stage2_epoch{epoch + 1:04d}.ufnt")
    finally:
        log.close()
        ck.g_e2c.eval()
        ck.d_clear.eval()
        set_requires_grad([ck.g_e2c, ck.d_clear], False)

    if handle.parameters_digest() != backbone_digest:
        raise TrainingError("backbone parameters changed during stage-2 training")
    if tensorio.state_digest(g_d2c.state_dict()) != g_d2c_digest:
        raise TrainingError("G_D2C parameters changed during stage-2 training")
    ck.step = step
    ck.log = log.records
    return ck


def _f(t) -> float:
    return float(t.detach()) if isinstance(t, torch.Tensor) else float(t)
