"""Loss terms for the two training stages.

All L1 terms are mean-reduced so the default weights carry over between taps
of different size.
"""

from __future__ import annotations

from typing import Sequence

import torch
import torch.nn.functional as F

GAN_MODES = ("least_squares", "vanilla_log")
CORRELATION_MODES = ("l1", "kl", "cosine")


def _finite(*tensors: torch.Tensor):
    for t in tensors:
        if t is not None and torch.isnan(t).any():
            raise ValueError("NaN logits")


def adversarial_loss(real_logits: torch.Tensor | None, fake_logits: torch.Tensor,
                     mode: str = "least_squares") -> tuple[torch.Tensor | None, torch.Tensor]:
    """(loss_D, loss_G) for raw patch logits.

    ``loss_D`` is None when no real logits are given (generator-only call).
    """
    _finite(real_logits, fake_logits)
    if mode == "least_squares":
        loss_g = ((fake_logits - 1) ** 2).mean()
        loss_d = None if real_logits is None else ((real_logits - 1) ** 2).mean() + (fake_logits ** 2).mean()
    elif mode == "vanilla_log":
        loss_g = -F.logsigmoid(fake_logits).mean()
        loss_d = None if real_logits is None else (
            -F.logsigmoid(real_logits).mean() - F.logsigmoid(-fake_logits).mean())
    else:
        raise ValueError(f"unknown gan mode {mode!r}")
    return loss_d, loss_g


def discriminator_loss(real_logits, fake_logits, mode="least_squares") -> torch.Tensor:
    return adversarial_loss(real_logits, fake_logits, mode)[0]


def generator_adv_loss(fake_logits, mode="least_squares") -> torch.Tensor:
    return adversarial_loss(None, fake_logits, mode)[1]


def _tensor(x) -> torch.Tensor:
    # FeatureMap carries its tensor in .data; on a plain tensor .data would detach
    return x if isinstance(x, torch.Tensor) else x.data


def _l1(a, b) -> torch.Tensor:
    a, b = _tensor(a), _tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a - b).abs().mean()


def cycle_loss(x, x_rec) -> torch.Tensor:
    return _l1(x, x_rec)


def identity_loss(x, g_of_x) -> torch.Tensor:
    return _l1(x, g_of_x)


def multi_adversarial_loss(per_layer: Sequence, weights: Sequence[float]) -> torch.Tensor:
    if len(per_layer) != len(weights):
        raise ValueError(f"{len(per_layer)} layer losses but {len(weights)} weights")
    return sum(w * l for w, l in zip(weights, per_layer))


def stage1_objective(mul_adv, cyc, idt, lambdas=(5.0, 10.0, 5.0)):
    l_adv, l_cyc, l_idt = lambdas
    return l_adv * mul_adv + l_cyc * cyc + l_idt * idt


def _row_distributions(g: torch.Tensor, eps: float) -> torch.Tensor:
    a = g.abs() + eps
    return a / a.sum(dim=-1, keepdim=True)


def _layer_distance(gen: torch.Tensor, target: torch.Tensor, mode: str, eps: float = 1e-8) -> torch.Tensor:
    if gen.shape[-2:] != target.shape[-2:]:
        raise ValueError(f"Gram shape mismatch {tuple(gen.shape)} vs {tuple(target.shape)}")
    if mode == "l1":
        return (gen - target).abs().mean()
    if mode == "kl":
        # rows as distributions (absolute-value row sums); KL(target || generated)
        p = _row_distributions(target, eps)
        q = _row_distributions(gen, eps)
        return (p * (p.log() - q.log())).sum(dim=-1).mean()
    if mode == "cosine":
        a = gen.flatten(-2)
        b = target.flatten(-2).expand_as(a)
        return (1.0 - F.cosine_similarity(a, b, dim=-1, eps=eps)).mean()
    raise ValueError(f"unknown correlation mode {mode!r}")


def correlation_loss(grams_generated: Sequence[torch.Tensor], grams_target: Sequence[torch.Tensor],
                     layer_weights: Sequence[float] = (1, 2, 3, 4), mode: str = "l1") -> torch.Tensor:
    """Weighted sum over taps of the per-layer Gram distance.

    Targets may be batched like the generated Grams or a single (C, C)
    matrix broadcast over the batch (the clear batch mean).
    """
    if not len(grams_generated) == len(grams_target) == len(layer_weights):
        raise ValueError("generated, target and weight lists must have equal length")
    return sum(w * _layer_distance(g, t, mode)
               for g, t, w in zip(grams_generated, grams_target, layer_weights))


def content_loss(anchor, generated) -> torch.Tensor:
    return _l1(anchor, generated)


def stage2_objective(corr, adv, content, lambdas=(1000.0, 5.0, 10.0)):
    l_corr, l_adv, l_content = lambdas
    return l_corr * corr + l_adv * adv + l_content * content
