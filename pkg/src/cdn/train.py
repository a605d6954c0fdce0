"""Training loop, checkpoint resume and PSNR/SSIM evaluation."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import DataError, Dataset, NoiseSpec, SampleBatch, awgn_field, batches_per_epoch, make_batch
from .losses import LossToggles, composite_loss
from .metrics import psnr, ssim_global_metric, ssim_metric
from .model import CdnModel, ModelConfig
from .optim import Adam, lr_at
from .tensor import Tensor, backward, dump_tensor, use_tape

log = logging.getLogger(__name__)

# Noise substream tag for evaluation, disjoint from the (epoch, batch) training streams.
EVAL_STREAM = 0x4556414C


class NumericalError(RuntimeError):
    """A non-finite loss was produced during training."""


@dataclass
class TrainConfig:
    lr0: float = 2e-4
    weight_decay: float = 1e-4
    batch: int = 64
    epochs: int = 1
    max_steps: int | None = None
    lr_factor: float = 0.5
    lr_every: int = 30
    decoupled_wd: bool = False
    seed: int = 0
    sigma: float = 25.0
    ssim_loss: bool = True
    kld_loss: bool = True
    patch_size: int = 128
    patches_per_image: int = 1
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self) -> None:
        if isinstance(self.model, dict):
            self.model = ModelConfig(**self.model)
        if self.lr0 < 0:
            raise ValueError("lr0 must be non-negative")
        if self.batch < 1:
            raise ValueError("batch must be at least 1")
        if not 0 < self.lr_factor <= 1:
            raise ValueError("lr_factor must lie in (0, 1]")
        if self.lr_every < 1:
            raise ValueError("lr_every must be at least 1")
        div = 2 * 2 ** self.model.depth
        if self.patch_size % div:
            raise ValueError(f"patch_size must be a multiple of {div} for this IDM depth")

    @property
    def toggles(self) -> LossToggles:
        return LossToggles(ssim=self.ssim_loss, kld=self.kld_loss)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


class Trainer:
    """Owns model, optimizer and the position in the deterministic batch stream."""

    def __init__(self, cfg: TrainConfig, dataset: Dataset, model: CdnModel | None = None,
                 diag_dir: str | Path | None = None):
        if len(dataset) == 0:
            raise DataError("training set is empty")
        if dataset.channels != cfg.model.channels:
            raise DataError(f"dataset has {dataset.channels} channels, model expects {cfg.model.channels}")
        self.cfg = cfg
        self.dataset = dataset
        self.model = model or CdnModel(cfg.model, seed=cfg.seed)
        self.optim = Adam(self.model.named_parameters(), lr=cfg.lr0, weight_decay=cfg.weight_decay,
                          decoupled=cfg.decoupled_wd)
        self.noise = NoiseSpec(cfg.sigma, cfg.seed)
        self.epoch = 0
        self.index = 0  # next batch within the epoch
        self.step = 0
        self.history: list[dict] = []
        self.diag_dir = Path(diag_dir) if diag_dir is not None else None
        self.per_epoch = batches_per_epoch(dataset, cfg.batch, cfg.patches_per_image)

    # -- one step ------------------------------------------------------------

    def next_batch(self) -> SampleBatch:
        cfg = self.cfg
        return make_batch(self.dataset, self.noise, cfg.batch, cfg.seed, self.epoch, self.index,
                          cfg.patch_size, cfg.patches_per_image)

    def train_step(self, batch: SampleBatch) -> dict:
        model = self.model
        model.train()
        lr = lr_at(self.epoch, self.cfg.lr0, self.cfg.lr_factor, self.cfg.lr_every)
        with use_tape():
            out = model.forward_train(batch.quadrants)
            terms = composite_loss(out.denoised, out.x_c, out.dists, batch.clean_quadrants[0],
                                   self.cfg.toggles)
            record = {"step": self.step, "epoch": self.epoch, "batch": self.index, "lr": lr,
                      **terms.values()}
            if not math.isfinite(record["total"]):
                self._dump_diagnostics(batch, record)
                raise NumericalError(f"non-finite loss at step {self.step}: {record}")
            backward(terms.total, self.optim.params.values())
        self.optim.step(lr)
        self.history.append(record)
        self.step += 1
        self.index += 1
        if self.index >= self.per_epoch:
            self.epoch, self.index = self.epoch + 1, 0
        return record

    def _dump_diagnostics(self, batch: SampleBatch, record: dict) -> None:
        if self.diag_dir is None:
            return
        self.diag_dir.mkdir(parents=True, exist_ok=True)
        stem = self.diag_dir / f"nan_step{self.step}"
        dump_tensor(batch.noisy_patches, f"{stem}_noisy.cdnt")
        dump_tensor(batch.clean_patches, f"{stem}_clean.cdnt")
        save_checkpoint(self.checkpoint(), f"{stem}.cdnc")
        log.error("non-finite loss %s; diagnostics written to %s*", record, stem)

    # -- loop ------------------------------------------------------------------

    def run(self, steps: int | None = None, checkpoint_path: str | Path | None = None,
            on_step: Callable[[dict], None] | None = None) -> list[dict]:
        """Train for ``steps`` more steps (default: until cfg.epochs / cfg.max_steps).

        Saves a checkpoint at every epoch boundary and at the end.
        """
        cfg = self.cfg
        limit = cfg.epochs * self.per_epoch
        if cfg.max_steps is not None:
            limit = min(limit, cfg.max_steps)
        if steps is not None:
            limit = min(limit, self.step + steps)
        start = len(self.history)
        while self.step < limit:
            epoch = self.epoch
            record = self.train_step(self.next_batch())
            if on_step is not None:
                on_step(record)
            if checkpoint_path is not None and self.epoch != epoch:
                save_checkpoint(self.checkpoint(), checkpoint_path)
        if checkpoint_path is not None:
            save_checkpoint(self.checkpoint(), checkpoint_path)
        return self.history[start:]

    # -- persistence -------------------------------------------------------------

    def checkpoint(self) -> Checkpoint:
        st = self.optim.state
        opt = {f"m.{k}": a for k, a in st.m.items()}
        opt.update({f"v.{k}": a for k, a in st.v.items()})
        opt["t"] = np.array([st.t], dtype=np.float32)
        meta = {"config": self.cfg.to_dict(), "epoch": self.epoch, "batch": self.index,
                "step": self.step, "adam_t": st.t, "seed": self.cfg.seed, "noise_seed": self.noise.seed}
        return Checkpoint(self.model.state_dict(), opt, meta)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint | str | Path, dataset: Dataset,
                        **overrides) -> "Trainer":
        """Rebuild a trainer that continues exactly where the checkpoint stopped.

        ``overrides`` replace TrainConfig fields (e.g. ``epochs``, ``max_steps``).
        """
        if not isinstance(ckpt, Checkpoint):
            ckpt = load_checkpoint(ckpt)
        cfg_dict = dict(ckpt.meta["config"])
        cfg_dict.update(overrides)
        cfg = TrainConfig.from_dict(cfg_dict)
        trainer = cls(cfg, dataset)
        trainer.model.load_state_dict(ckpt.model)
        st = trainer.optim.state
        for k in st.m:
            st.m[k][...] = ckpt.optimizer[f"m.{k}"].reshape(st.m[k].shape)
            st.v[k][...] = ckpt.optimizer[f"v.{k}"].reshape(st.v[k].shape)
        st.t = int(ckpt.meta["adam_t"])
        trainer.epoch = int(ckpt.meta["epoch"])
        trainer.index = int(ckpt.meta["batch"])
        trainer.step = int(ckpt.meta["step"])
        return trainer


def train(cfg: TrainConfig, dataset: Dataset, checkpoint_path: str | Path | None = None,
          on_step: Callable[[dict], None] | None = None) -> tuple[CdnModel, list[dict]]:
    """Train from scratch; returns the model and the per-step loss records."""
    trainer = Trainer(cfg, dataset)
    history = trainer.run(checkpoint_path=checkpoint_path, on_step=on_step)
    return trainer.model, history


def load_model(path: str | Path) -> CdnModel:
    """Model (eval mode) from a checkpoint file."""
    ckpt = load_checkpoint(path)
    model = CdnModel(ModelConfig(**ckpt.meta["config"]["model"]))
    model.load_state_dict(ckpt.model)
    return model.eval()


def smoothed(values: list[float], window: int = 50) -> np.ndarray:
    """Trailing moving average (valid part only)."""
    v = np.asarray(values, dtype=np.float64)
    if len(v) < window:
        return v.mean(keepdims=True) if len(v) else v
    c = np.concatenate([[0.0], np.cumsum(v)])
    return (c[window:] - c[:-window]) / window


# --- evaluation --------------------------------------------------------------------


@dataclass
class ImageMetrics:
    name: str
    psnr_db: float
    ssim: float
    ssim_global: float
    noisy_psnr_db: float
    noisy_ssim: float


@dataclass
class MetricReport:
    sigma: float
    per_image: list[ImageMetrics]

    def _mean(self, key: str) -> float:
        return float(np.mean([getattr(m, key) for m in self.per_image]))

    @property
    def psnr_db(self) -> float:
        return self._mean("psnr_db")

    @property
    def ssim(self) -> float:
        return self._mean("ssim")

    @property
    def ssim_global(self) -> float:
        return self._mean("ssim_global")

    @property
    def noisy_psnr_db(self) -> float:
        return self._mean("noisy_psnr_db")

    @property
    def noisy_ssim(self) -> float:
        return self._mean("noisy_ssim")

    def format(self) -> str:
        head = f"{'image':<24}{'PSNR':>9}{'SSIM(11x11)':>13}{'SSIM(global)':>14}{'noisy PSNR':>12}"
        rows = [f"{m.name:<24}{m.psnr_db:>9.3f}{m.ssim:>13.4f}{m.ssim_global:>14.4f}{m.noisy_psnr_db:>12.3f}"
                for m in self.per_image]
        tail = (f"{'mean':<24}{self.psnr_db:>9.3f}{self.ssim:>13.4f}{self.ssim_global:>14.4f}"
                f"{self.noisy_psnr_db:>12.3f}")
        return "\n".join([f"sigma = {self.sigma:g}", head, *rows, tail])


def noisy_test_image(clean: np.ndarray, sigma: float, seed: int, index: int) -> np.ndarray:
    return clean + awgn_field(clean.shape, NoiseSpec(sigma, seed), EVAL_STREAM, index)


def evaluate(model: CdnModel, dataset: Dataset, sigma: float, seed: int = 0) -> MetricReport:
    """Seeded AWGN on every test image, whole-image denoising, metrics against clean."""
    if len(dataset) == 0:
        raise DataError("test set is empty")
    was_training = model.training
    model.eval()
    rows = []
    try:
        for i, (name, clean) in enumerate(zip(dataset.names, dataset.images)):
            noisy = noisy_test_image(clean, sigma, seed, i)
            denoised = model.forward_eval(Tensor(noisy[None])).data[0]
            rows.append(ImageMetrics(
                name=name,
                psnr_db=psnr(denoised, clean),
                ssim=ssim_metric(denoised, clean),
                ssim_global=ssim_global_metric(denoised, clean),
                noisy_psnr_db=psnr(noisy, clean),
                noisy_ssim=ssim_metric(noisy, clean),
            ))
    finally:
        model.train(was_training)
    rows.sort(key=lambda m: m.name)
    return MetricReport(sigma, rows)
