"""Training objective: 1 - global SSIM, pairwise KL self-similarity, L1 on the output."""

from __future__ import annotations

from dataclasses import dataclass
from itertools import permutations

import numpy as np

from . import ops
from .tensor import Tensor


@dataclass(frozen=True)
class SsimConstants:
    c1: float = 0.01 ** 2
    c2: float = 0.03 ** 2

    def __post_init__(self) -> None:
        if self.c1 <= 0 or self.c2 <= 0:
            raise ValueError("SSIM stabilizers must be positive")


DEFAULT_SSIM = SsimConstants()


def ssim_global(a: Tensor, b: Tensor, k: SsimConstants = DEFAULT_SSIM) -> Tensor:
    return ops.ssim_global(a, b, k.c1, k.c2)


def loss_ssim(x_c: Tensor, y: Tensor, k: SsimConstants = DEFAULT_SSIM) -> Tensor:
    return ops.add_scalar(ops.scale(ssim_global(x_c, y, k), -1.0), 1.0)


def kl_divergence(p: Tensor, q: Tensor) -> Tensor:
    return ops.kl_divergence(p, q)


def loss_kld(dists: list[Tensor]) -> Tensor:
    """Sum of D_KL(p_i || p_j) over the 12 ordered pairs i != j."""
    if len(dists) != 4:
        raise ValueError("self-similarity loss needs four distributions")
    if len({d.shape for d in dists}) != 1:
        raise ValueError("distributions must have equal length")
    return ops.sum_scalars([ops.kl_divergence(dists[i], dists[j]) for i, j in permutations(range(4), 2)])


def loss_l1(x: Tensor, y: Tensor) -> Tensor:
    return ops.mean(ops.abs_(ops.sub(x, y)))


@dataclass
class LossTerms:
    l_ssim: Tensor
    l_kld: Tensor
    l1: Tensor
    total: Tensor

    def values(self) -> dict[str, float]:
        return {"l_ssim": self.l_ssim.item(), "l_kld": self.l_kld.item(),
                "l1": self.l1.item(), "total": self.total.item()}


@dataclass(frozen=True)
class LossToggles:
    ssim: bool = True
    kld: bool = True


@dataclass(frozen=True)
class LossWeights:
    ssim: float = 1.0
    kld: float = 1.0
    l1: float = 1.0


def composite_loss(
    denoised: Tensor,
    x_c: Tensor | None,
    dists: list[Tensor],
    y: Tensor,
    toggles: LossToggles = LossToggles(),
    weights: LossWeights = LossWeights(),
    k: SsimConstants = DEFAULT_SSIM,
) -> LossTerms:
    """Unweighted sum by default. Disabled or inapplicable terms report 0 and stay off the graph."""
    zero = Tensor(np.zeros((), dtype=denoised.dtype))
    l1 = loss_l1(denoised, y)
    terms = [ops.scale(l1, weights.l1) if weights.l1 != 1.0 else l1]
    l_ssim = l_kld = zero
    if toggles.ssim and x_c is not None:
        l_ssim = loss_ssim(x_c, y, k)
        terms.append(ops.scale(l_ssim, weights.ssim) if weights.ssim != 1.0 else l_ssim)
    if toggles.kld and dists:
        l_kld = loss_kld(dists)
        terms.append(ops.scale(l_kld, weights.kld) if weights.kld != 1.0 else l_kld)
    total = ops.sum_scalars(terms) if len(terms) > 1 else terms[0]
    return LossTerms(l_ssim, l_kld, l1, total)
