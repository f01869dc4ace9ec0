"""Pieces shared by both trainers: history buffer, schedules, logging, checkpoint io."""

from __future__ import annotations

import json
import math
import random
from contextlib import contextmanager
from dataclasses import asdict, fields
from pathlib import Path
from typing import Iterable

import torch
import torch.nn as nn

from . import tensorio

SCHEDULES = ("linear_decay", "step", "constant")


class TrainingError(RuntimeError):
    pass


class FeatureHistory:
    """Pool of past generated features fed to the discriminator.

    Once full, each incoming sample is either returned as-is or swapped with
    a random stored one (probability 1/2 each).
    """

    def __init__(self, max_size: int = 50, seed: int = 0):
        self.max_size = max_size
        self.items: list[torch.Tensor] = []
        self._rng = random.Random(seed)

    def push_and_pop(self, batch: torch.Tensor) -> torch.Tensor:
        if self.max_size <= 0:
            return batch
        out = []
        for x in batch.detach():
            x = x.unsqueeze(0)
            if len(self.items) < self.max_size:
                self.items.append(x)
                out.append(x)
            elif self._rng.random() > 0.5:
                i = self._rng.randrange(self.max_size)
                out.append(self.items[i].clone())
                self.items[i] = x
            else:
                out.append(x)
        return torch.cat(out)


def lr_lambda(schedule: str, epochs: int, decay_start: float = 0.5, step_every: int = 10, gamma: float = 0.1):
    """Epoch -> multiplier. ``linear_decay`` stays flat for ``decay_start`` of the run, then falls to 0."""
    if schedule == "constant":
        return lambda e: 1.0
    if schedule == "step":
        return lambda e: gamma ** (e // step_every)
    if schedule == "linear_decay":
        start = int(round(epochs * decay_start))
        span = max(1, epochs - start)
        return lambda e: max(0.0, 1.0 - max(0, e - start) / span)
    raise ValueError(f"unknown schedule {schedule!r}")


def set_requires_grad(nets: Iterable[nn.Module], flag: bool):
    for n in nets:
        for p in n.parameters():
            p.requires_grad_(flag)


def check_finite(record: dict, step: int, batch_seed) -> None:
    for k, v in record.items():
        vals = v if isinstance(v, list) else [v]
        for x in vals:
            if isinstance(x, float) and not math.isfinite(x):
                raise TrainingError(f"non-finite {k} at step {step}; batch indices {batch_seed}")


@contextmanager
def diagnose_batch(step: int, batch_seed):
    """Turn a NaN surfacing inside a loss into a TrainingError naming the batch."""
    try:
        yield
    except ValueError as e:
        if "NaN" not in str(e):
            raise
        raise TrainingError(f"non-finite loss at step {step} ({e}); batch indices {batch_seed}") from None


class LossLog:
    """One JSON record per step, kept in memory and optionally streamed to disk."""

    def __init__(self, path: str | Path | None = None):
        self.records: list[dict] = []
        self._fh = None
        if path is not None:
            Path(path).parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(path, "w", encoding="utf-8")

    def append(self, record: dict):
        self.records.append(record)
        if self._fh:
            self._fh.write(json.dumps(record, sort_keys=True) + "\n")

    def close(self):
        if self._fh:
            self._fh.close()
            self._fh = None


def config_to_dict(cfg) -> dict:
    d = asdict(cfg)
    for k, v in d.items():
        if isinstance(v, tuple):
            d[k] = list(v)
    return d


def config_from_dict(cls, d: dict):
    names = {f.name: f for f in fields(cls)}
    unknown = set(d) - set(names)
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kw = {}
    for k, v in d.items():
        kw[k] = tuple(v) if isinstance(v, list) else v
    return cls(**kw)


def pack_modules(modules: dict[str, nn.Module]) -> dict[str, torch.Tensor]:
    out = {}
    for prefix, m in modules.items():
        for k, v in m.state_dict().items():
            out[f"{prefix}.{k}"] = v
    return out


def unpack_modules(tensors: dict[str, torch.Tensor], modules: dict[str, nn.Module]):
    for prefix, m in modules.items():
        sd = {k[len(prefix) + 1:]: v for k, v in tensors.items() if k.startswith(prefix + ".")}
        m.load_state_dict(sd)


def modules_digest(modules: dict[str, nn.Module]) -> str:
    return tensorio.state_digest(pack_modules(modules))


def augment_images(images: torch.Tensor, gen: torch.Generator, shift: int = 4, flip: bool = True) -> torch.Tensor:
    """Random horizontal flips and reflect-padded translations, one draw per image."""
    n, _, h, w = images.shape
    out = images
    if flip:
        mask = torch.rand(n, generator=gen) < 0.5
        out = torch.where(mask[:, None, None, None], out.flip(-1), out)
    if shift > 0:
        padded = torch.nn.functional.pad(out, (shift,) * 4, mode="reflect")
        dy = torch.randint(0, 2 * shift + 1, (n,), generator=gen)
        dx = torch.randint(0, 2 * shift + 1, (n,), generator=gen)
        out = torch.stack([padded[i, :, dy[i]:dy[i] + h, dx[i]:dx[i] + w] for i in range(n)])
    return out
