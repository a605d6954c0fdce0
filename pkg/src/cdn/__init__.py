"""Compositional denoising network built on a small numpy autodiff core."""

import os

# Pin BLAS threads before numpy loads so GEMM reduction order is reproducible.
_threads = os.environ.get("CDN_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[_var] = _threads

from .losses import LossTerms, LossToggles, composite_loss  # noqa: E402
from .model import CdnModel, ModelConfig, zero_path_ablation  # noqa: E402
from .tensor import Param, Tensor, backward, no_grad  # noqa: E402

__all__ = [
    "CdnModel",
    "LossTerms",
    "LossToggles",
    "ModelConfig",
    "Param",
    "Tensor",
    "backward",
    "composite_loss",
    "no_grad",
    "zero_path_ablation",
]
