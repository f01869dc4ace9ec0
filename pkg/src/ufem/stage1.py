"""Stage 1: unpaired dual-learning translation of shallow features.

G_D2C maps degraded features to clear-like ones and G_C2D maps back. The
clear-side discriminator is applied at the enhancement tap and at the two
taps that follow it, with generated features pushed through the frozen
backbone to reach them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn as nn

from . import losses, tensorio
from .backbone import BackboneError, BackboneHandle, TapPoint, forward_from
from .data import UnpairedSampler, as_images
from .nets import (DiscriminatorSpec, GeneratorSpec, build_discriminator, build_generator,
                   max_patch_layers)
from .training import (SCHEDULES, FeatureHistory, LossLog, TrainingError, augment_images,
                       check_finite, config_from_dict, config_to_dict, diagnose_batch, lr_lambda,
                       modules_digest, pack_modules, set_requires_grad, unpack_modules)


@dataclass
class Stage1Config:
    lambda_mul_adv: float = 5.0
    lambda_cyc: float = 10.0
    lambda_idt: float = 5.0
    adv_weights: tuple[float, ...] = (0.5, 0.3, 0.2)
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
    # generators
    g_architecture: str = "flat_residual"
    g_base_width: int = 64
    g_residual_blocks: int = 4
    g_down_levels: int = 2
    g_init: str = "near_identity"
    g_out_activation: str = "relu"
    # discriminators
    d_base_width: int = 64
    d_layers: int = 3
    # loss directions
    identity_directions: tuple[str, ...] = ("c2d", "d2c")
    backward_cycle: bool = True
    multiscale_degraded: bool = False
    augment: bool = True
    augment_shift: int = 4
    checkpoint_every: int = 0

    def __post_init__(self):
        self.adv_weights = tuple(float(w) for w in self.adv_weights)
        self.betas = tuple(self.betas)
        self.identity_directions = tuple(self.identity_directions)
        if any(w < 0 for w in self.adv_weights) or abs(sum(self.adv_weights) - 1.0) > 1e-9:
            raise ValueError(f"adv_weights must be non-negative and sum to 1, got {self.adv_weights}")
        if min(self.lambda_mul_adv, self.lambda_cyc, self.lambda_idt) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.gan_mode not in losses.GAN_MODES:
            raise ValueError(f"unknown gan_mode {self.gan_mode!r}")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if set(self.identity_directions) - {"c2d", "d2c"}:
            raise ValueError(f"identity_directions must be drawn from c2d/d2c")
        if self.epochs < 0 or self.batch < 1:
            raise ValueError("epochs must be >= 0 and batch >= 1")

    def generator_spec(self, tap: TapPoint) -> GeneratorSpec:
        return GeneratorSpec(self.g_architecture, tap.channels, self.g_base_width,
                             self.g_residual_blocks, self.g_down_levels, self.g_init,
                             feature_size=min(tap.spatial), out_activation=self.g_out_activation)

    def to_dict(self) -> dict:
        return config_to_dict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Stage1Config":
        return config_from_dict(cls, d)


@dataclass
class LossBreakdown:
    step: int
    epoch: int
    adv_d2c: list[float]
    adv_c2d: list[float]
    mul_adv: float
    cyc: float
    idt: float
    total_G: float
    d_clear: list[float]
    d_degraded: list[float]
    total_D: float

    def record(self) -> dict:
        return dict(self.__dict__)


def discriminator_taps(handle: BackboneHandle, enhancement_tap) -> tuple[TapPoint, TapPoint, TapPoint]:
    t = handle.tap(enhancement_tap)
    nxt = handle.successors(t)
    if len(nxt) < 2:
        raise BackboneError(f"tap {t.name} has {len(nxt)} successor(s); multi-scale "
                            f"discrimination needs two")
    return t, nxt[0], nxt[1]


def push(handle: BackboneHandle, features: torch.Tensor, src: TapPoint, dst: TapPoint) -> torch.Tensor:
    """Features at ``dst`` obtained by running the frozen layers between the taps."""
    return features if dst == src else forward_from(handle, features, src, dst)


@torch.no_grad()
def tap_features(handle: BackboneHandle, images: torch.Tensor, tap: TapPoint, chunk: int = 200) -> torch.Tensor:
    handle._check_images(images)
    return torch.cat([handle.net.run(images[i:i + chunk], 0, tap.index + 1)
                      for i in range(0, len(images), chunk)])


@dataclass
class Stage1Checkpoint:
    config: Stage1Config
    architecture_id: str
    taps: tuple[str, str, str]
    g_d2c: nn.Module
    g_c2d: nn.Module
    d_clear: nn.ModuleList
    d_degraded: nn.ModuleList
    step: int = 0
    log: list[dict] = field(default_factory=list, repr=False)

    @property
    def enhancement_tap(self) -> str:
        return self.taps[0]

    def modules(self) -> dict[str, nn.Module]:
        return {"g_d2c": self.g_d2c, "g_c2d": self.g_c2d,
                "d_clear": self.d_clear, "d_degraded": self.d_degraded}

    def digest(self) -> str:
        return modules_digest(self.modules())

    def save(self, path) -> Path:
        meta = {
            "kind": "stage1",
            "config": self.config.to_dict(),
            "backbone": self.architecture_id,
            "taps": list(self.taps),
            "step": self.step,
            "g_spec": _spec_dict(self.g_d2c.spec),
            "d_clear_specs": [_spec_dict(d.spec) for d in self.d_clear],
            "d_degraded_specs": [_spec_dict(d.spec) for d in self.d_degraded],
        }
        return tensorio.save(path, pack_modules(self.modules()), "ufem-stage1", meta=meta)

    @classmethod
    def load(cls, path) -> "Stage1Checkpoint":
        tensors, manifest = tensorio.load(path)
        meta = manifest["meta"]
        if meta.get("kind") != "stage1":
            raise ValueError(f"{path} is not a stage-1 checkpoint")
        gspec = GeneratorSpec(**meta["g_spec"])
        ck = cls(Stage1Config.from_dict(meta["config"]), meta["backbone"], tuple(meta["taps"]),
                 build_generator(gspec), build_generator(gspec),
                 nn.ModuleList([build_discriminator(DiscriminatorSpec(**s)) for s in meta["d_clear_specs"]]),
                 nn.ModuleList([build_discriminator(DiscriminatorSpec(**s)) for s in meta["d_degraded_specs"]]),
                 meta["step"])
        unpack_modules(tensors, ck.modules())
        return ck


def _spec_dict(spec) -> dict:
    return dict(spec.__dict__)


def _disc(tap: TapPoint, cfg, seed: int):
    size = min(tap.spatial)
    spec = DiscriminatorSpec(tap.channels, min(cfg.d_layers, max_patch_layers(size)), cfg.d_base_width, size)
    return build_discriminator(spec, seed=seed)


def init_stage1(cfg: Stage1Config, handle: BackboneHandle, enhancement_tap) -> Stage1Checkpoint:
    taps = discriminator_taps(handle, enhancement_tap)
    gspec = cfg.generator_spec(taps[0])
    base = cfg.seed * 100
    d_clear = nn.ModuleList([_disc(t, cfg, base + 10 + i) for i, t in enumerate(taps)])
    d_taps = taps if cfg.multiscale_degraded else taps[:1]
    d_deg = nn.ModuleList([_disc(t, cfg, base + 20 + i) for i, t in enumerate(d_taps)])
    return Stage1Checkpoint(cfg, handle.architecture_id, tuple(t.name for t in taps),
                            build_generator(gspec, seed=base + 1), build_generator(gspec, seed=base + 2),
                            d_clear, d_deg)


def stage1_generator_losses(ck: Stage1Checkpoint, handle: BackboneHandle, x_c: torch.Tensor,
                            x_d: torch.Tensor) -> dict[str, torch.Tensor | list]:
    """All generator-side loss terms for one batch, as differentiable tensors."""
    cfg = ck.config
    taps = [handle.tap(n) for n in ck.taps]
    mode = cfg.gan_mode
    fake_c = ck.g_d2c(x_d)
    fake_d = ck.g_c2d(x_c)
    adv_d2c = [losses.generator_adv_loss(d(push(handle, fake_c, taps[0], t)), mode)
               for d, t in zip(ck.d_clear, taps)]
    adv_c2d = [losses.generator_adv_loss(d(push(handle, fake_d, taps[0], t)), mode)
               for d, t in zip(ck.d_degraded, taps)]
    w = cfg.adv_weights
    mul_adv = losses.multi_adversarial_loss(adv_d2c, w)
    mul_adv = mul_adv + losses.multi_adversarial_loss(adv_c2d, w if len(adv_c2d) == len(w) else (1.0,))
    cyc = losses.cycle_loss(x_d, ck.g_c2d(fake_c))
    if cfg.backward_cycle:
        cyc = cyc + losses.cycle_loss(x_c, ck.g_d2c(fake_d))
    idt = torch.zeros((), dtype=x_c.dtype)
    if "c2d" in cfg.identity_directions:
        idt = idt + losses.identity_loss(x_d, ck.g_c2d(x_d))
    if "d2c" in cfg.identity_directions:
        idt = idt + losses.identity_loss(x_c, ck.g_d2c(x_c))
    total = losses.stage1_objective(mul_adv, cyc, idt, (cfg.lambda_mul_adv, cfg.lambda_cyc, cfg.lambda_idt))
    return {"fake_c": fake_c, "fake_d": fake_d, "adv_d2c": adv_d2c, "adv_c2d": adv_c2d,
            "mul_adv": mul_adv, "cyc": cyc, "idt": idt, "total": total}


def train_stage1(config: Stage1Config, clear, degraded, handle: BackboneHandle, enhancement_tap=None,
                 log_path=None, checkpoint_dir=None, init: Stage1Checkpoint | None = None, on_epoch=None) -> Stage1Checkpoint:
    """Alternate generator and discriminator updates on unpaired batches.

    ``clear``/``degraded`` are manifests or (N,3,H,W) image tensors.
    """
    cfg = config
    tap0 = handle.default_insertion_tap() if enhancement_tap is None else handle.tap(enhancement_tap)
    ck = init or init_stage1(cfg, handle, tap0)
    taps = [handle.tap(n) for n in ck.taps]
    backbone_digest = handle.parameters_digest()

    img_clear, img_deg = as_images(clear), as_images(degraded)
    n_dd = len(ck.d_degraded)
    if not cfg.augment:
        x_clear = tap_features(handle, img_clear, taps[0])
        x_deg = tap_features(handle, img_deg, taps[0])
        with torch.no_grad():
            real_clear = [push(handle, x_clear, taps[0], t) for t in taps]
            real_deg = [push(handle, x_deg, taps[0], t) for t in taps[:n_dd]]
    aug_gen = torch.Generator().manual_seed(cfg.seed * 1000 + 17)

    def batch_features(ic, idg):
        if not cfg.augment:
            return (x_clear[ic], x_deg[idg], [r[ic] for r in real_clear], [r[idg] for r in real_deg])
        x_c = tap_features(handle, augment_images(img_clear[ic], aug_gen, cfg.augment_shift), taps[0])
        x_d = tap_features(handle, augment_images(img_deg[idg], aug_gen, cfg.augment_shift), taps[0])
        with torch.no_grad():
            rc = [push(handle, x_c, taps[0], t) for t in taps]
            rd = [push(handle, x_d, taps[0], t) for t in taps[:n_dd]]
        return x_c, x_d, rc, rd

    gens = [ck.g_d2c, ck.g_c2d]
    discs = list(ck.d_clear) + list(ck.d_degraded)
    opt_g = torch.optim.Adam([p for g in gens for p in g.parameters()], lr=cfg.lr_G, betas=cfg.betas)
    opt_d = torch.optim.Adam([p for d in discs for p in d.parameters()], lr=cfg.lr_D, betas=cfg.betas)
    sched = [torch.optim.lr_scheduler.LambdaLR(o, lr_lambda(cfg.schedule, cfg.epochs, cfg.decay_start))
             for o in (opt_g, opt_d)]
    sampler = UnpairedSampler(len(img_clear), len(img_deg), cfg.batch, cfg.seed)
    pool_c = FeatureHistory(cfg.history_buffer, seed=cfg.seed * 7 + 1)
    pool_d = FeatureHistory(cfg.history_buffer, seed=cfg.seed * 7 + 2)
    steps_per_epoch = math.ceil(max(len(img_clear), len(img_deg)) / cfg.batch)
    log = LossLog(log_path)
    mode = cfg.gan_mode

    set_requires_grad(gens + discs, True)
    for m in gens + discs:
        m.train()
    step = ck.step
    try:
        for epoch in range(cfg.epochs):
            for _ in range(steps_per_epoch):
                ic, idg = sampler.next()
                x_c, x_d, r_c, r_d = batch_features(ic, idg)

                set_requires_grad(discs, False)
                opt_g.zero_grad(set_to_none=True)
                with diagnose_batch(step + 1, (ic.tolist(), idg.tolist())):
                    g = stage1_generator_losses(ck, handle, x_c, x_d)
                g["total"].backward()
                opt_g.step()

                set_requires_grad(discs, True)
                opt_d.zero_grad(set_to_none=True)
                with torch.no_grad():
                    fc = pool_c.push_and_pop(g["fake_c"])
                    fd = pool_d.push_and_pop(g["fake_d"])
                    fake_c = [push(handle, fc, taps[0], t) for t in taps]
                    fake_d = [push(handle, fd, taps[0], t) for t in taps]
                d_c = [losses.discriminator_loss(d(r), d(f), mode)
                       for d, r, f in zip(ck.d_clear, r_c, fake_c)]
                d_d = [losses.discriminator_loss(d(r), d(f), mode)
                       for d, r, f in zip(ck.d_degraded, r_d, fake_d)]
                total_d = sum(d_c) + sum(d_d)
                total_d.backward()
                opt_d.step()

                step += 1
                rec = LossBreakdown(step, epoch, [_f(v) for v in g["adv_d2c"]],
                                    [_f(v) for v in g["adv_c2d"]], _f(g["mul_adv"]),
                                    _f(g["cyc"]), _f(g["idt"]), _f(g["total"]),
                                    [_f(v) for v in d_c], [_f(v) for v in d_d],
                                    _f(total_d)).record()
                check_finite(rec, step, (ic.tolist(), idg.tolist()))
                log.append(rec)
            for s in sched:
                s.step()
            if on_epoch is not None:
                on_epoch(epoch, ck)
            if checkpoint_dir and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                ck.step = step
                ck.save(Path(checkpoint_dir) / f"stage1_epoch{epoch + 1:04d}.ufnt")
    finally:
        log.close()
        for m in gens + discs:
            m.eval()
        set_requires_grad(gens + discs, False)

    if handle.parameters_digest() != backbone_digest:
        raise TrainingError("backbone parameters changed during stage-1 training")
    ck.step = step
    ck.log = log.records
    return ck


def _f(t) -> float:
    return float(t.detach()) if isinstance(t, torch.Tensor) else float(t)
