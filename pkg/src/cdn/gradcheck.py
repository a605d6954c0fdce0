"""Central-difference checks of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import ops
from .tensor import Tensor, backward, no_grad, use_tape


class NondeterminismError(RuntimeError):
    """Two forward evaluations at the same point disagreed."""


@dataclass
class GradCheckReport:
    max_rel_err: float
    max_abs_err: float
    worst: tuple[int, int, float, float]  # (input index, flat element, analytic, numeric)
    checked: int
    skipped: int  # elements still straddling a kink at the smallest step
    passed: bool

    def __str__(self) -> str:
        i, k, a, n = self.worst
        state = "pass" if self.passed else "FAIL"
        return (f"{state}: max_rel_err={self.max_rel_err:.3e} max_abs_err={self.max_abs_err:.3e} "
                f"over {self.checked} elements ({self.skipped} at kinks); "
                f"worst input {i}[{k}] analytic={a:.6e} numeric={n:.6e}")


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    tol: float = 1e-3,
    step: float = 1e-3,
    atol: float = 1e-5,
    max_elements: int | None = 64,
    seed: int = 0,
    max_halvings: int = 10,
    max_skip_fraction: float = 0.1,
) -> GradCheckReport:
    """Compare tape gradients of scalar ``fn(*inputs)`` with central differences.

    Inputs should be float64 leaves with ``requires_grad``. An element passes
    if its relative error is within ``tol`` or its absolute error within
    ``atol``; ``max_rel_err`` only counts elements above ``atol``. At most
    ``max_elements`` elements per input are sampled.

    When the +/- step evaluations take a different relu/prelu/abs branch
    than the base point, the difference quotient straddles a kink. The step
    is then halved (up to ``max_halvings`` times); elements that still
    straddle one are skipped. The check fails if more than
    ``max_skip_fraction`` of the elements are skipped.
    """
    for t in inputs:
        t.zero_grad()
    with use_tape():
        loss = fn(*inputs)
        backward(loss)
    analytic = [t.grad.copy() for t in inputs]

    def value() -> tuple[float, list[np.ndarray]]:
        with no_grad(), ops.record_branches() as masks:
            return fn(*inputs).item(), masks

    base, base_masks = value()
    if value()[0] != base or base != loss.item():
        raise NondeterminismError("repeated forward passes disagree")

    def same_branches(masks: list[np.ndarray]) -> bool:
        return len(masks) == len(base_masks) and all(
            np.array_equal(a, b) for a, b in zip(masks, base_masks))

    def central(flat: np.ndarray, k: int) -> float | None:
        orig = flat[k]
        h = step
        for _ in range(max_halvings + 1):
            flat[k] = orig + h
            fp, mp = value()
            flat[k] = orig - h
            fm, mm = value()
            flat[k] = orig
            if same_branches(mp) and same_branches(mm):
                return (fp - fm) / (2 * h)
            h /= 2
        return None

    rng = np.random.default_rng(seed)
    worst = (0, 0, 0.0, 0.0)
    max_rel = max_abs = 0.0
    checked = skipped = 0
    for i, t in enumerate(inputs):
        flat = t.data.reshape(-1)
        if not np.shares_memory(flat, t.data):
            raise ValueError("grad_check needs contiguous inputs")
        idx = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            idx = np.sort(rng.choice(flat.size, max_elements, replace=False))
        grad = analytic[i].reshape(-1)
        for k in idx:
            checked += 1
            num = central(flat, k)
            if num is None:
                skipped += 1
                continue
            ana = float(grad[k])
            abs_err = abs(ana - num)
            # Below atol the element passes outright; its relative error is not meaningful.
            rel_err = abs_err / max(abs(ana), abs(num)) if abs_err > atol else 0.0
            if rel_err >= max_rel:
                max_rel, worst = rel_err, (i, int(k), ana, num)
            max_abs = max(max_abs, abs_err)
    passed = max_rel <= tol and skipped <= max_skip_fraction * checked
    return GradCheckReport(max_rel, max_abs, worst, checked, skipped, bool(passed))


# --- the standard suite ------------------------------------------------------------

F64 = np.float64
# (label, scalar function, inputs, relative tolerance, elements sampled per input)
Check = tuple[str, Callable[..., Tensor], list[Tensor], float, int]


def _leaf(rng: np.random.Generator, shape, lo: float = -1.0, hi: float = 1.0) -> Tensor:
    return Tensor(rng.uniform(lo, hi, shape), requires_grad=True, dtype=F64)


def _away_from_zero(rng: np.random.Generator, shape, margin: float = 0.1) -> Tensor:
    mag = rng.uniform(margin, 1.0, shape)
    return Tensor(mag * rng.choice([-1.0, 1.0], shape), requires_grad=True, dtype=F64)


def _weighted_sum(out: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar probe sum(out * weights), so every output element matters."""
    return ops.sum_(ops.mul(out, Tensor(weights.reshape(out.shape), dtype=F64)))


def _probe(rng: np.random.Generator, out_shape) -> np.ndarray:
    return rng.standard_normal(out_shape)


def tensor_checks(rng: np.random.Generator) -> list[Check]:
    x = _leaf(rng, (2, 3, 6, 6))
    w = _leaf(rng, (4, 3, 3, 3), -0.5, 0.5)
    b = _leaf(rng, (4,))
    r_conv = _probe(rng, (2, 4, 6, 6))

    xb = _leaf(rng, (4, 3, 4, 4), -2.0, 2.0)
    gamma = _leaf(rng, (3,), 0.5, 1.5)
    beta = _leaf(rng, (3,))
    r_bn = _probe(rng, (4, 3, 4, 4))

    def bn(x, g, bt):
        rm, rv = np.zeros(3), np.ones(3)
        return _weighted_sum(ops.batch_norm2d(x, g, bt, rm, rv, training=True, groups=2), r_bn)

    xp = _away_from_zero(rng, (2, 3, 4, 4))
    slope = _leaf(rng, (3,), 0.1, 0.4)
    xr = _away_from_zero(rng, (2, 3, 4, 4))
    r_act = _probe(rng, (2, 3, 4, 4))
    xs = _leaf(rng, (2, 8, 3, 3))
    r_ps = _probe(rng, (2, 2, 6, 6))
    xa = _leaf(rng, (2, 3, 4, 6))
    r_pool = _probe(rng, (2, 3, 2, 3))
    xm = _leaf(rng, (3, 1, 4, 4))
    r_sm = _probe(rng, (3, 16))
    a, c = _leaf(rng, (2, 2, 3, 3)), _leaf(rng, (2, 2, 3, 3))
    return [
        ("conv2d", lambda x, w, b: _weighted_sum(ops.conv2d(x, w, b), r_conv), [x, w, b], 1e-3, 16),
        ("batch_norm2d (train)", bn, [xb, gamma, beta], 1e-3, 16),
        ("prelu", lambda x, s: _weighted_sum(ops.prelu(x, s), r_act), [xp, slope], 1e-3, 16),
        ("relu", lambda x: _weighted_sum(ops.relu(x), r_act), [xr], 1e-4, 16),
        ("pixel_shuffle", lambda x: _weighted_sum(ops.pixel_shuffle(x, 2), r_ps), [xs], 1e-3, 16),
        ("avg_pool2", lambda x: _weighted_sum(ops.avg_pool2(x), r_pool), [xa], 1e-3, 16),
        ("softmax_flat", lambda x: _weighted_sum(ops.softmax_flat(x), r_sm), [xm], 1e-3, 16),
        ("mul + sum", lambda a, c: ops.sum_(ops.mul(a, c)), [a, c], 1e-3, 16),
    ]


def loss_checks(rng: np.random.Generator) -> list[Check]:
    from . import losses

    a, b = _leaf(rng, (2, 1, 8, 8), 0, 1), _leaf(rng, (2, 1, 8, 8), 0, 1)
    logits = [_leaf(rng, (2, 1, 4, 4), -2, 2) for _ in range(4)]
    d = _away_from_zero(rng, (2, 1, 8, 8), 0.05)
    y = Tensor(rng.uniform(0, 1, (2, 1, 8, 8)), dtype=F64)
    yd = Tensor(y.data + d.data, requires_grad=True, dtype=F64)

    def kld(*zs):
        return losses.loss_kld([ops.softmax_flat(z) for z in zs])

    def kl_pair(p, q):
        return losses.kl_divergence(ops.softmax_flat(p), ops.softmax_flat(q))

    return [
        ("ssim_global", lambda a, b: losses.ssim_global(a, b), [a, b], 1e-3, 16),
        ("loss_ssim", lambda a: losses.loss_ssim(a, b.detach().astype(F64)), [a], 1e-3, 16),
        ("kl_divergence(softmax, softmax)", kl_pair, logits[:2], 1e-3, 16),
        ("loss_kld (12 pairs)", kld, logits, 1e-3, 16),
        ("loss_l1", lambda x: losses.loss_l1(x, y), [yd], 1e-3, 16),
    ]


def _tiny_model(seed: int):
    from .model import CdnModel, ModelConfig

    return CdnModel(ModelConfig(features=8, idm_widths=(8, 8, 8)), seed=seed).astype(F64)


def model_checks(rng: np.random.Generator, per_submodule: int = 24) -> list[Check]:
    from .losses import composite_loss
    from .model import DBlock

    block = DBlock(4, np.random.default_rng(int(rng.integers(1 << 31)))).astype(F64)
    xb = _leaf(rng, (1, 4, 8, 8))
    r_block = _probe(rng, (1, 4, 8, 8))

    def dblock(x, *params):
        return _weighted_sum(block(x), r_block)

    model = _tiny_model(int(rng.integers(1 << 31)))
    patches = [Tensor(rng.uniform(0, 1, (2, 1, 8, 8)), dtype=F64) for _ in range(4)]
    y = Tensor(rng.uniform(0, 1, (2, 1, 8, 8)), dtype=F64)

    def full_loss(*params):
        out = model.forward_train(patches)
        return composite_loss(out.denoised, out.x_c, out.dists, y).total

    checks = [("dblock_forward", dblock, [xb, *block.parameters()], 1e-3, 16)]
    for sub in ("iip", "nep", "heads", "idm"):
        params = getattr(model, sub).parameters()
        picks = rng.choice(len(params), size=min(len(params), per_submodule), replace=False)
        chosen = [params[i] for i in sorted(picks)]
        limit = -(-per_submodule // len(chosen)) + 1  # slack for 1-element bias tensors
        checks.append((f"composite loss / {sub} params", full_loss, chosen, 1e-3, limit))
    return checks


SUITES = {"tensor": tensor_checks, "losses": loss_checks, "model": model_checks}


def run_suite(module: str = "all", seed: int = 0) -> list[tuple[str, GradCheckReport]]:
    """Gradient checks for the kernels, the losses and the assembled model."""
    names = list(SUITES) if module == "all" else [module]
    results = []
    for name in names:
        if name not in SUITES:
            raise ValueError(f"unknown grad-check module {name!r}")
        rng = np.random.default_rng([seed, list(SUITES).index(name)])
        for label, fn, inputs, tol, limit in SUITES[name](rng):
            results.append((label, grad_check(fn, inputs, tol=tol, max_elements=limit)))
    return results
