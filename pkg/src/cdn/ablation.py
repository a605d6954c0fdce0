"""Ablation matrix: retrained path removals, loss toggles and inference-time path cut-offs."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .data import Dataset
from .model import zero_path_ablation
from .train import MetricReport, TrainConfig, Trainer, evaluate

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Variant:
    name: str
    use_iip: bool = True
    use_nep: bool = True
    ssim_loss: bool = True
    kld_loss: bool = True

    def apply(self, cfg: TrainConfig) -> TrainConfig:
        model = replace(cfg.model, use_iip=self.use_iip, use_nep=self.use_nep)
        return replace(cfg, model=model, ssim_loss=self.ssim_loss, kld_loss=self.kld_loss)


VARIANTS = {
    v.name: v
    for v in (
        Variant("CDN"),
        Variant("CDN-IIP(R)", use_iip=False),
        Variant("CDN-NEP(R)", use_nep=False),
        Variant("CDN-SSIM", ssim_loss=False),
        Variant("CDN-KLD", kld_loss=False),
        Variant("CDN-SSIM-KLD", ssim_loss=False, kld_loss=False),
    )
}
# Inference-time cut-offs of the trained full model.
CUTOFFS = {"CDN cut-IIP": "iip", "CDN cut-NEP": "nep"}


@dataclass
class AblationRow:
    variant: str
    seed: int
    report: MetricReport
    losses: list[float] = field(default_factory=list)  # per-step total loss; empty for cut-offs


@dataclass
class AblationTable:
    rows: list[AblationRow]

    def get(self, variant: str, seed: int) -> MetricReport:
        for r in self.rows:
            if r.variant == variant and r.seed == seed:
                return r.report
        raise KeyError((variant, seed))

    def loss_curve(self, variant: str, seed: int) -> list[float]:
        for r in self.rows:
            if r.variant == variant and r.seed == seed:
                return r.losses
        raise KeyError((variant, seed))

    def variants(self) -> list[str]:
        return list(dict.fromkeys(r.variant for r in self.rows))

    def seeds(self) -> list[int]:
        return sorted({r.seed for r in self.rows})

    def format(self) -> str:
        seeds = self.seeds()
        head = f"{'variant':<16}" + "".join(f"{'seed ' + str(s):>16}" for s in seeds) + f"{'mean PSNR/SSIM':>20}"
        lines = [head, "-" * len(head)]
        for v in self.variants():
            cells, ps, ss = [], [], []
            for s in seeds:
                try:
                    r = self.get(v, s)
                except KeyError:
                    cells.append(f"{'-':>16}")
                    continue
                ps.append(r.psnr_db)
                ss.append(r.ssim)
                cells.append(f"{r.psnr_db:>9.2f}/{r.ssim:.4f}")
            mean = f"{np.mean(ps):>12.2f}/{np.mean(ss):.4f}"
            lines.append(f"{v:<16}" + "".join(cells) + mean)
        return "\n".join(lines)


def run_ablation(
    cfg: TrainConfig,
    train_set: Dataset,
    test_set: Dataset,
    seeds: Sequence[int] = (0, 1, 2),
    variants: Sequence[str] = tuple(VARIANTS),
    cutoffs: bool = True,
    eval_seed: int = 0,
) -> AblationTable:
    """Train each variant for each seed and evaluate it at ``cfg.sigma``.

    Cut-off rows reuse the trained full model, so they need "CDN" in ``variants``.
    """
    rows = []
    for seed in seeds:
        for name in variants:
            vcfg = replace(VARIANTS[name].apply(cfg), seed=seed)
            trainer = Trainer(vcfg, train_set)
            trainer.run()
            report = evaluate(trainer.model, test_set, cfg.sigma, eval_seed)
            rows.append(AblationRow(name, seed, report, [h["total"] for h in trainer.history]))
            log.info("%s seed %d: %.2f dB", name, seed, report.psnr_db)
            if cutoffs and name == "CDN":
                for cut_name, path in CUTOFFS.items():
                    cut = zero_path_ablation(trainer.model, path)
                    rows.append(AblationRow(cut_name, seed, evaluate(cut, test_set, cfg.sigma, eval_seed)))
    return AblationTable(rows)
