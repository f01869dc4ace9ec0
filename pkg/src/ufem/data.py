"""Dataset manifests, unpaired sampling and synthetic degradations.

Images are float arrays in [0, 1], channel-last (H, W, 3) on the numpy side
and channel-first (B, 3, H, W) once batched as tensors.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from PIL import Image
from scipy import ndimage

log = logging.getLogger(__name__)

DEGRADATION_KINDS = ("fog", "motion_blur", "low_light")
FOG_TRANSMISSION = (0.85, 0.70, 0.55, 0.40, 0.25)
BLUR_LENGTH = (3, 5, 9, 15, 21)
LOW_LIGHT_GAMMA = (1.5, 2.0, 2.5, 3.0, 3.5)
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".ppm")
MANIFEST_FORMAT = "ufem-manifest/1"


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class DegradationSpec:
    kind: str
    severity: int
    seed: int = 0

    def __post_init__(self):
        if self.kind not in DEGRADATION_KINDS:
            raise DataError(f"unknown degradation kind {self.kind!r}")
        if not 1 <= int(self.severity) <= 5:
            raise DataError(f"severity must be in 1..5, got {self.severity}")

    def with_seed(self, seed: int) -> "DegradationSpec":
        return DegradationSpec(self.kind, self.severity, int(seed))


def derive_seed(base: int, index: int) -> int:
    """Per-item seed from a base seed; stable across platforms."""
    return int(np.random.SeedSequence([int(base), int(index)]).generate_state(1)[0])


# --------------------------------------------------------------------------- degradations

def apply_fog(image: np.ndarray, spec: DegradationSpec) -> np.ndarray:
    t = FOG_TRANSMISSION[spec.severity - 1]
    airlight = 1.0
    return np.clip(t * image + (1.0 - t) * airlight, 0.0, 1.0)


def motion_blur_kernel(length: int, angle_deg: float) -> np.ndarray:
    """Normalized line kernel of ``length`` taps through the centre."""
    k = np.zeros((length, length))
    c = (length - 1) / 2
    theta = np.deg2rad(angle_deg)
    for s in np.linspace(-c, c, length):
        col = int(np.round(c + s * np.cos(theta)))
        row = int(np.round(c - s * np.sin(theta)))
        k[row, col] += 1.0
    return k / k.sum()


def blur_angle(spec: DegradationSpec) -> float:
    return float(np.random.default_rng(spec.seed).uniform(0.0, 180.0))


def apply_motion_blur(image: np.ndarray, spec: DegradationSpec, angle: float | None = None) -> np.ndarray:
    if angle is None:
        angle = blur_angle(spec)
    kernel = motion_blur_kernel(BLUR_LENGTH[spec.severity - 1], angle)
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        out = ndimage.convolve(img, kernel, mode="reflect")
    else:
        out = np.stack([ndimage.convolve(img[..., c], kernel, mode="reflect")
                        for c in range(img.shape[-1])], axis=-1)
    return np.clip(out, 0.0, 1.0)


def apply_low_light(image: np.ndarray, spec: DegradationSpec) -> np.ndarray:
    gamma = LOW_LIGHT_GAMMA[spec.severity - 1]
    return np.clip(np.power(np.clip(image, 0.0, 1.0), gamma), 0.0, 1.0)


_OPERATORS = {"fog": apply_fog, "motion_blur": apply_motion_blur, "low_light": apply_low_light}


def degrade(image: np.ndarray, spec: DegradationSpec) -> np.ndarray:
    return _OPERATORS[spec.kind](image, spec)


def degrade_batch(images: torch.Tensor, spec: DegradationSpec, seeds: Sequence[int] | None = None) -> torch.Tensor:
    """Degrade a (B,3,H,W) tensor; image i uses ``seeds[i]`` (default: derived from spec.seed)."""
    arr = images.detach().cpu().numpy().transpose(0, 2, 3, 1).astype(np.float64)
    if seeds is None:
        seeds = [derive_seed(spec.seed, i) for i in range(len(arr))]
    out = np.stack([degrade(a, spec.with_seed(s)) for a, s in zip(arr, seeds)])
    return torch.from_numpy(out.transpose(0, 3, 1, 2).astype(np.float32))


# --------------------------------------------------------------------------- image io

def load_image(path: str | os.PathLike) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def save_image(path: str | os.PathLike, image: np.ndarray) -> None:
    arr = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    # no timestamps or other metadata, so reruns are byte-identical
    Image.fromarray(arr, "RGB").save(path, format="PNG", optimize=False, compress_level=6)


def to_tensor(images: Iterable[np.ndarray]) -> torch.Tensor:
    arr = np.stack([np.asarray(i, dtype=np.float32) for i in images])
    return torch.from_numpy(arr.transpose(0, 3, 1, 2).copy())


# --------------------------------------------------------------------------- manifests

@dataclass(frozen=True)
class ManifestEntry:
    path: str
    label: int
    domain: str = "clear"
    kind: str | None = None
    severity: int | None = None
    seed: int | None = None
    # True: the file already holds the degraded image; kind/severity/seed are provenance.
    # False with kind set: the degradation is applied when the image is loaded.
    rendered: bool = False

    @property
    def degradation(self) -> DegradationSpec | None:
        if self.kind is None:
            return None
        return DegradationSpec(self.kind, self.severity, self.seed or 0)


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    root: Path
    skipped: int = 0

    def __post_init__(self):
        self.root = Path(self.root)
        if not self.entries:
            raise DataError(f"empty manifest for {self.root}")

    def __len__(self):
        return len(self.entries)

    @property
    def labels(self) -> torch.Tensor:
        return torch.tensor([e.label for e in self.entries], dtype=torch.long)

    def resolve(self, entry: ManifestEntry) -> Path:
        p = Path(entry.path)
        return p if p.is_absolute() else self.root / p

    def load(self, indices: Sequence[int] | None = None) -> torch.Tensor:
        idx = range(len(self.entries)) if indices is None else indices
        imgs = []
        for i in idx:
            e = self.entries[i]
            img = load_image(self.resolve(e))
            if e.kind is not None and not e.rendered:
                img = degrade(img, e.degradation).astype(np.float32)
            imgs.append(img)
        return to_tensor(imgs)

    def to_lines(self, root: str | None = None) -> str:
        header = {"format": MANIFEST_FORMAT, "root": str(self.root) if root is None else root}
        lines = [json.dumps(header, sort_keys=True)]
        lines += [json.dumps(asdict(e), sort_keys=True) for e in self.entries]
        return "\n".join(lines) + "\n"

    def save(self, path: str | os.PathLike) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        # the root is stored relative to the manifest file, which is how read() interprets it
        root = Path(os.path.relpath(self.root.resolve(), path.parent.resolve())).as_posix()
        path.write_text(self.to_lines(root), encoding="utf-8")
        return path

    @classmethod
    def read(cls, path: str | os.PathLike) -> "DatasetManifest":
        path = Path(path)
        lines = [ln for ln in path.read_text(encoding="utf-8").splitlines() if ln.strip()]
        if not lines:
            raise DataError(f"empty manifest file {path}")
        header = json.loads(lines[0])
        if header.get("format") != MANIFEST_FORMAT:
            raise DataError(f"{path}: not a {MANIFEST_FORMAT} file")
        root = Path(header["root"])
        if not root.is_absolute():
            root = path.parent / root
        entries = [ManifestEntry(**json.loads(ln)) for ln in lines[1:]]
        missing = [e.path for e in entries if not (Path(e.path) if Path(e.path).is_absolute() else root / e.path).exists()]
        if missing:
            raise DataError(f"{path}: image does not exist: {missing[0]}")
        return cls(entries, root)

    def digest(self) -> str:
        import hashlib
        return hashlib.sha256(self.to_lines().encode("utf-8")).hexdigest()


def _readable(path: Path) -> bool:
    try:
        with Image.open(path) as im:
            im.verify()
        return True
    except Exception:
        return False


def build_manifest(root: str | os.PathLike, domain_tag: str = "clear",
                   degradation: DegradationSpec | None = None, rendered: bool = False,
                   class_count: int | None = None) -> DatasetManifest:
    """Index an image tree.

    Labels come from ``labels.txt`` (lines ``relative/path label``) when
    present, otherwise from the class subdirectory names: integer names are
    used as labels directly, anything else is numbered in sorted order. When
    ``degradation`` is given every entry gets its own seed derived from
    ``degradation.seed`` and its position.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"not a directory: {root}")
    label_file = root / "labels.txt"
    pairs: list[tuple[str, int]] = []
    if label_file.exists():
        for ln in label_file.read_text(encoding="utf-8").splitlines():
            if ln.strip():
                rel, lab = ln.rsplit(maxsplit=1)
                pairs.append((rel, int(lab)))
    else:
        classes = sorted(d.name for d in root.iterdir() if d.is_dir())
        numeric = all(c.isdigit() for c in classes)
        for k, c in enumerate(classes):
            lab = int(c) if numeric else k
            for f in (root / c).rglob("*"):
                if f.is_file() and f.suffix.lower() in IMAGE_SUFFIXES:
                    pairs.append((f.relative_to(root).as_posix(), lab))
    pairs.sort()
    skipped = 0
    entries = []
    for rel, lab in pairs:
        if class_count is not None and not 0 <= lab < class_count:
            raise DataError(f"label {lab} of {rel} outside 0..{class_count - 1}")
        if not _readable(root / rel):
            skipped += 1
            continue
        spec = {}
        if degradation is not None:
            spec = dict(kind=degradation.kind, severity=degradation.severity,
                        seed=derive_seed(degradation.seed, len(entries)), rendered=rendered)
        entries.append(ManifestEntry(rel, lab, domain_tag, **spec))
    if skipped:
        log.warning("skipped %d unreadable image(s) under %s", skipped, root)
    if not entries:
        raise DataError(f"no images found under {root}")
    return DatasetManifest(entries, root, skipped)


# --------------------------------------------------------------------------- unpaired sampling

class UnpairedSampler:
    """Independent seeded index streams for the clear and degraded sides.

    The clear stream depends only on (seed, clear size), so nothing about the
    degraded set can leak into which clear images are drawn.
    """

    def __init__(self, n_clear: int, n_degraded: int, batch: int, seed: int, replace: bool = True):
        if n_clear < 1 or n_degraded < 1:
            raise DataError("both sides need at least one image")
        if not replace and batch > min(n_clear, n_degraded):
            raise DataError(f"batch {batch} exceeds manifest size {min(n_clear, n_degraded)} "
                            f"with replacement disabled")
        self.n_clear, self.n_degraded, self.batch, self.replace = n_clear, n_degraded, batch, replace
        self._rc = np.random.default_rng([seed, 0])
        self._rd = np.random.default_rng([seed, 1])

    def _draw(self, rng, n):
        if self.replace:
            return rng.integers(0, n, size=self.batch)
        return rng.choice(n, size=self.batch, replace=False)

    def next(self) -> tuple[np.ndarray, np.ndarray]:
        return self._draw(self._rc, self.n_clear), self._draw(self._rd, self.n_degraded)


@dataclass
class UnpairedBatch:
    clear_images: torch.Tensor
    degraded_images: torch.Tensor
    clear_indices: np.ndarray = field(repr=False, default=None)
    degraded_indices: np.ndarray = field(repr=False, default=None)


def as_images(source) -> torch.Tensor:
    if isinstance(source, DatasetManifest):
        return source.load()
    if isinstance(source, torch.Tensor):
        return source
    raise TypeError(f"expected a DatasetManifest or image tensor, got {type(source).__name__}")


def sample_unpaired_batch(clear, degraded, batch: int, seed: int, replace: bool = True) -> UnpairedBatch:
    n_c = len(clear)
    n_d = len(degraded)
    ic, idg = UnpairedSampler(n_c, n_d, batch, seed, replace).next()

    def take(src, idx):
        if isinstance(src, DatasetManifest):
            return src.load(idx.tolist())
        return src[torch.as_tensor(idx)]

    return UnpairedBatch(take(clear, ic), take(degraded, idg), ic, idg)
