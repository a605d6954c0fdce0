"""Datasets, AWGN synthesis, augmentation, quadrant splitting and batching.

All randomness is derived from explicit integer seeds. A batch is a pure
function of (seed, noise seed, epoch, batch index), which is what makes
mid-epoch resumption replayable.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .netpbm import ImageBuffer, load_image, save_image
from .tensor import ShapeError, Tensor

MANIFEST = "manifest.txt"


class DataError(RuntimeError):
    """Dataset missing, empty or unreadable."""


@dataclass(frozen=True)
class NoiseSpec:
    sigma: float  # on the 0-255 scale
    seed: int = 0

    def __post_init__(self) -> None:
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")

    @property
    def std(self) -> float:
        return self.sigma / 255.0


@dataclass
class Dataset:
    names: list[str]
    images: list[np.ndarray]  # (C, H, W) float32 in [0, 1]

    def __len__(self) -> int:
        return len(self.images)

    @property
    def channels(self) -> int:
        return self.images[0].shape[0]


def load_dataset(root: str | Path) -> Dataset:
    """Read every image listed in ``manifest.txt`` (or all .pgm/.ppm files, sorted)."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset directory {root} does not exist")
    manifest = root / MANIFEST
    if manifest.exists():
        rels = [ln.strip() for ln in manifest.read_text().splitlines() if ln.strip() and not ln.startswith("#")]
    else:
        rels = sorted(p.name for p in root.iterdir() if p.suffix.lower() in (".pgm", ".ppm"))
    if not rels:
        raise DataError(f"dataset {root} is empty")
    images = []
    for rel in rels:
        try:
            images.append(load_image(root / rel).to_float())
        except (OSError, ValueError) as exc:
            raise DataError(f"cannot read {root / rel}: {exc}") from exc
    if len({im.shape[0] for im in images}) != 1:
        raise DataError("dataset mixes gray and color images")
    return Dataset(rels, images)


def save_dataset(ds: Dataset, root: str | Path) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for name, img in zip(ds.names, ds.images):
        save_image(ImageBuffer.from_float(img), root / name)
    (root / MANIFEST).write_text("".join(n + "\n" for n in ds.names))


# --- noise -------------------------------------------------------------------


def awgn_field(shape: tuple[int, ...], spec: NoiseSpec, *stream: int) -> np.ndarray:
    """Seeded i.i.d. N(0, (sigma/255)^2) field; ``stream`` selects an independent substream."""
    rng = np.random.default_rng([spec.seed, *stream])
    return (rng.standard_normal(shape) * spec.std).astype(np.float32)


def add_awgn(clean: Tensor | np.ndarray, spec: NoiseSpec, *stream: int) -> Tensor:
    """noisy = clean + n, unclipped, in the normalized [0, 1] domain."""
    arr = clean.data if isinstance(clean, Tensor) else np.asarray(clean, dtype=np.float32)
    if spec.sigma == 0:
        return Tensor(arr.copy())
    return Tensor(arr + awgn_field(arr.shape, spec, *stream))


# --- augmentation ------------------------------------------------------------


@dataclass(frozen=True)
class Augment:
    top: int
    left: int
    hflip: bool
    vflip: bool

    @classmethod
    def draw(cls, rng: np.random.Generator, height: int, width: int, size: int) -> "Augment":
        top = int(rng.integers(0, height - size + 1))
        left = int(rng.integers(0, width - size + 1))
        hflip, vflip = (bool(b) for b in rng.random(2) < 0.5)
        return cls(top, left, hflip, vflip)

    def apply(self, img: np.ndarray, size: int) -> np.ndarray:
        out = img[:, self.top:self.top + size, self.left:self.left + size]
        if self.hflip:
            out = out[:, :, ::-1]
        if self.vflip:
            out = out[:, ::-1, :]
        return np.ascontiguousarray(out)


def pad_to(img: np.ndarray, size: int) -> np.ndarray:
    _, h, w = img.shape
    ph, pw = max(0, size - h), max(0, size - w)
    if ph or pw:
        img = np.pad(img, ((0, 0), (0, ph), (0, pw)), mode="reflect")
    return img


def augment_crop_flip(clean: np.ndarray, noisy: np.ndarray | None, rng: np.random.Generator,
                      size: int = 128) -> tuple[np.ndarray, np.ndarray | None]:
    """Random aligned ``size``x``size`` crop with independent h/v flips (p = 1/2 each)."""
    clean = pad_to(clean, size)
    noisy = pad_to(noisy, size) if noisy is not None else None
    aug = Augment.draw(rng, clean.shape[1], clean.shape[2], size)
    return aug.apply(clean, size), (aug.apply(noisy, size) if noisy is not None else None)


# --- quadrants ---------------------------------------------------------------


def quadrant_split(patch: Tensor | np.ndarray) -> list[Tensor]:
    """Top-left, top-right, bottom-left, bottom-right."""
    arr = patch.data if isinstance(patch, Tensor) else np.asarray(patch)
    h, w = arr.shape[-2:]
    if h % 2 or w % 2:
        raise ShapeError(f"quadrant_split needs even spatial dims, got {h}x{w}")
    hh, hw = h // 2, w // 2
    return [Tensor(np.ascontiguousarray(arr[..., r:r + hh, c:c + hw]))
            for r, c in ((0, 0), (0, hw), (hh, 0), (hh, hw))]


def reassemble(quads: list[Tensor]) -> Tensor:
    q = [t.data if isinstance(t, Tensor) else t for t in quads]
    top = np.concatenate([q[0], q[1]], axis=-1)
    bottom = np.concatenate([q[2], q[3]], axis=-1)
    return Tensor(np.concatenate([top, bottom], axis=-2))


# --- batching ----------------------------------------------------------------


@dataclass
class SampleBatch:
    noisy_patches: Tensor
    clean_patches: Tensor
    quadrants: list[Tensor]
    clean_quadrants: list[Tensor]
    epoch: int
    index: int


def epoch_order(n_items: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n_items)


def batches_per_epoch(ds: Dataset, batch: int, patches_per_image: int = 1) -> int:
    return -(-len(ds) * patches_per_image // batch)


def make_batch(ds: Dataset, spec: NoiseSpec, batch: int, seed: int, epoch: int, index: int,
               patch_size: int = 128, patches_per_image: int = 1) -> SampleBatch:
    n_items = len(ds) * patches_per_image
    order = epoch_order(n_items, seed, epoch)
    picks = order[index * batch:(index + 1) * batch]
    if len(picks) == 0:
        raise IndexError(f"batch {index} is past the end of epoch {epoch}")
    rng = np.random.default_rng([seed, epoch, index, 1])
    clean = np.stack([augment_crop_flip(ds.images[i % len(ds)], None, rng, patch_size)[0] for i in picks])
    noise = awgn_field(clean.shape, spec, epoch, index)
    clean_t = Tensor(clean)
    noisy_t = Tensor(clean + noise)
    return SampleBatch(noisy_t, clean_t, quadrant_split(noisy_t), quadrant_split(clean_t), epoch, index)


def batch_iter(ds: Dataset, spec: NoiseSpec, batch: int = 64, seed: int = 0, *, patch_size: int = 128,
               patches_per_image: int = 1, start_epoch: int = 0, start_index: int = 0,
               epochs: int | None = None) -> Iterator[SampleBatch]:
    """Deterministic stream of batches, one shuffled pass over the items per epoch.

    Fresh crops, flips and noise every epoch. The last batch of an epoch may be short.
    """
    if len(ds) == 0:
        raise DataError("cannot iterate an empty dataset")
    per_epoch = batches_per_epoch(ds, batch, patches_per_image)
    epoch, index = start_epoch, start_index
    while epochs is None or epoch < start_epoch + epochs:
        for j in range(index, per_epoch):
            yield make_batch(ds, spec, batch, seed, epoch, j, patch_size, patches_per_image)
        epoch, index = epoch + 1, 0
