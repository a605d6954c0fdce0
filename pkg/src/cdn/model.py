"""The compositional denoising network.

Two feature paths look at the noisy input: the image-information path (IIP),
supervised image-to-image through a 1x1 head, and the noise-estimation path
(NEP), supervised by the cross-patch divergence of its noise distributions.
A U-shaped integration module (IDM) fuses them into a noise map that is
subtracted from the input.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import ops
from .nn import BatchNorm2d, Conv2d, Module, PReLU
from .tensor import ShapeError, Tensor, no_grad

NUM_DBLOCKS = 7


@dataclass
class ModelConfig:
    channels: int = 1
    features: int = 64
    idm_widths: tuple[int, ...] = (64, 128, 256)
    use_iip: bool = True
    use_nep: bool = True
    # Start from a zero noise estimate; a random output layer makes early
    # training collapse to predicting no noise at all.
    idm_zero_init: bool = True

    def __post_init__(self) -> None:
        self.idm_widths = tuple(int(w) for w in self.idm_widths)
        if self.channels not in (1, 3):
            raise ValueError("channels must be 1 (gray) or 3 (color)")
        if len(self.idm_widths) < 2:
            raise ValueError("IDM needs at least one encoder level and a bottleneck")
        if not (self.use_iip or self.use_nep):
            raise ValueError("at least one of IIP/NEP must be present")

    @property
    def depth(self) -> int:
        return len(self.idm_widths) - 1

    def to_dict(self) -> dict:
        return {"channels": self.channels, "features": self.features,
                "idm_widths": list(self.idm_widths), "use_iip": self.use_iip,
                "use_nep": self.use_nep, "idm_zero_init": self.idm_zero_init}


class DBlock(Module):
    """conv-BN-PReLU-conv-BN, identity shortcut, ReLU. Shape preserving."""

    def __init__(self, width: int, rng: np.random.Generator):
        super().__init__()
        self.conv1 = Conv2d(width, width, rng=rng)
        self.bn1 = BatchNorm2d(width)
        self.act = PReLU(width)
        self.conv2 = Conv2d(width, width, rng=rng)
        self.bn2 = BatchNorm2d(width)

    def forward(self, x: Tensor, groups: int = 1) -> Tensor:
        h = self.bn1(self.conv1(x), groups)
        h = self.bn2(self.conv2(self.act(h)), groups)
        return ops.relu(ops.add(h, x))


class PathNet(Module):
    """Lifting conv followed by seven DBlocks (layout shared by IIP and NEP)."""

    def __init__(self, cin: int, width: int, rng: np.random.Generator):
        super().__init__()
        self.lift = Conv2d(cin, width, rng=rng)
        self.blocks = [DBlock(width, rng) for _ in range(NUM_DBLOCKS)]

    def forward(self, x: Tensor, groups: int = 1) -> Tensor:
        """``groups`` > 1 runs that many stacked inputs as independent passes."""
        h = self.lift(x)
        for block in self.blocks:
            h = block(h, groups)
        return h


class HeadConvs(Module):
    def __init__(self, channels: int, features: int, rng: np.random.Generator):
        super().__init__()
        self.conv_img = Conv2d(features, channels, kernel=1, rng=rng)
        self.conv_lift = Conv2d(channels, features, kernel=1, rng=rng)


class IdmNet(Module):
    """U-net over the concatenated path features.

    Encoder levels are DBlocks followed by 2x2 average pooling and a widening
    conv; the decoder upsamples with conv + pixel shuffle, concatenates the
    same-resolution skip, merges with a conv and refines with a DBlock.
    """

    def __init__(self, cin: int, cout: int, widths: tuple[int, ...], rng: np.random.Generator,
                 zero_init_out: bool = False):
        super().__init__()
        self.entry = Conv2d(cin, widths[0], rng=rng)
        depth = len(widths) - 1
        self.enc_blocks = [DBlock(widths[i], rng) for i in range(depth)]
        self.down = [Conv2d(widths[i], widths[i + 1], rng=rng) for i in range(depth)]
        self.bottleneck = DBlock(widths[-1], rng)
        self.up = [Conv2d(widths[i + 1], 4 * widths[i], rng=rng) for i in range(depth)]
        self.merge = [Conv2d(2 * widths[i], widths[i], rng=rng) for i in range(depth)]
        self.dec_blocks = [DBlock(widths[i], rng) for i in range(depth)]
        self.out = Conv2d(widths[0], cout, rng=rng, zero_init=zero_init_out)
        self.depth = depth

    def forward(self, x: Tensor) -> Tensor:
        h = self.entry(x)
        skips = []
        for i in range(self.depth):
            h = self.enc_blocks[i](h)
            skips.append(h)
            h = self.down[i](ops.avg_pool2(h))
        h = self.bottleneck(h)
        for i in reversed(range(self.depth)):
            h = ops.pixel_shuffle(self.up[i](h), 2)
            h = self.merge[i](ops.concat_channels(h, skips[i]))
            h = self.dec_blocks[i](h)
        return self.out(h)


class IipOutput(NamedTuple):
    feat: Tensor
    x_c: Tensor
    x_n: Tensor


class NepOutput(NamedTuple):
    feat: Tensor
    p: Tensor


class TrainOutput(NamedTuple):
    denoised: Tensor
    x_c: Tensor | None
    dists: list[Tensor]
    noise: Tensor


class CdnModel(Module):
    """IIP + NEP + IDM. Set ``use_iip``/``use_nep`` False for the retrained ablations."""

    def __init__(self, config: ModelConfig | None = None, seed: int = 0):
        super().__init__()
        self.config = cfg = config or ModelConfig()
        rng = np.random.default_rng(seed)
        f = cfg.features
        self.iip = PathNet(cfg.channels, f, rng) if cfg.use_iip else None
        self.nep = PathNet(cfg.channels, f, rng) if cfg.use_nep else None
        self.heads = HeadConvs(cfg.channels, f, rng) if cfg.use_iip else None
        n_paths = int(cfg.use_iip) + int(cfg.use_nep)
        self.idm = IdmNet(n_paths * f, cfg.channels, cfg.idm_widths, rng, cfg.idm_zero_init)
        # Ablation switches: replace a path's output by zeros at inference.
        self.cut_iip = False
        self.cut_nep = False
        names = [n for n, _ in self.named_parameters()]
        assert len(names) == len(set(names)), "parameter names must be unique"

    # -- paths ---------------------------------------------------------------

    def iip_forward(self, x: Tensor) -> IipOutput:
        self._check_input(x)
        feat = self.iip(x)
        x_c = self.heads.conv_img(feat)
        x_n = ops.sub(self.heads.conv_lift(x), feat)
        if self.cut_iip:
            x_n = ops.zeros_like(x_n)
        return IipOutput(feat, x_c, x_n)

    def nep_forward(self, x: Tensor, groups: int = 1) -> NepOutput:
        self._check_input(x)
        feat = self.nep(x, groups)
        p = ops.softmax_flat(ops.channel_mean(feat))
        if self.cut_nep:
            feat, p = ops.zeros_like(feat), ops.zeros_like(p)
        return NepOutput(feat, p)

    def idm_forward(self, x_n: Tensor | None, nep_feat: Tensor | None) -> Tensor:
        parts = [t for t in (x_n, nep_feat) if t is not None]
        if len(parts) == 2:
            if x_n.shape != nep_feat.shape:
                raise ShapeError(f"idm: path outputs disagree {x_n.shape} vs {nep_feat.shape}")
            h = ops.concat_channels(x_n, nep_feat)
        else:
            (h,) = parts
        div = 2 ** self.config.depth
        if h.shape[2] % div or h.shape[3] % div:
            raise ShapeError(f"idm: spatial dims {h.shape[2:]} must be divisible by {div}")
        return self.idm(h)

    # -- procedures ------------------------------------------------------------

    def forward_train(self, patches: list[Tensor]) -> TrainOutput:
        """Training pass over the four quadrants; ``patches[0]`` is the one denoised."""
        if len(patches) != 4:
            raise ValueError("training uses exactly four patches")
        shape = patches[0].shape
        if any(p.shape != shape for p in patches):
            raise ShapeError("all four patches must share one shape")
        x1 = patches[0]
        x_c = x_n = nep_feat = None
        dists: list[Tensor] = []
        if self.iip is not None:
            x_c, x_n = self.iip_forward(x1)[1:]
        if self.nep is not None:
            # One stacked pass; batch norm keeps per-patch statistics.
            b = shape[0]
            feat, p = self.nep_forward(ops.concat_batch(patches), groups=4)
            nep_feat = ops.batch_slice(feat, 0, b)
            dists = [ops.batch_slice(p, i * b, (i + 1) * b) for i in range(4)]
        noise = self.idm_forward(x_n, nep_feat)
        return TrainOutput(ops.sub(x1, noise), x_c, dists, noise)

    def estimate_noise(self, x: Tensor) -> Tensor:
        x_n = self.iip_forward(x).x_n if self.iip is not None else None
        nep_feat = self.nep_forward(x).feat if self.nep is not None else None
        return self.idm_forward(x_n, nep_feat)

    def forward_eval(self, x: Tensor, return_noise: bool = False):
        """Denoise whole images (reflect-pad to the IDM grid, crop back).

        With ``return_noise`` also returns the residual actually removed,
        ``x - denoised`` in float64, so ``denoised + noise == x`` exactly.
        """
        self._check_input(x)
        n, c, h, w = x.shape
        div = 2 ** self.config.depth
        ph, pw = (-h) % div, (-w) % div
        with no_grad():
            xp = x.data
            if ph or pw:
                xp = np.pad(xp, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="reflect")
            noise = self.estimate_noise(Tensor(xp)).data[:, :, :h, :w]
            denoised = (x.data - noise).astype(x.dtype)
        if return_noise:
            exact = x.data.astype(np.float64) - denoised.astype(np.float64)
            return Tensor(denoised), exact
        return Tensor(denoised)

    def _check_input(self, x: Tensor) -> None:
        if x.data.ndim != 4 or x.shape[1] != self.config.channels:
            raise ShapeError(f"expected (n, {self.config.channels}, h, w) input, got {x.shape}")


def zero_path_ablation(model: CdnModel, path: str) -> CdnModel:
    """Shallow copy of ``model`` sharing its parameters, with one path's output zeroed."""
    if path not in ("iip", "nep", "both"):
        raise ValueError("path must be 'iip', 'nep' or 'both'")
    wrapped = object.__new__(CdnModel)
    wrapped.__dict__.update(model.__dict__)
    wrapped.cut_iip = model.cut_iip or path in ("iip", "both")
    wrapped.cut_nep = model.cut_nep or path in ("nep", "both")
    return wrapped
