"""Command-line entry point: ``cdn train | denoise | eval | ablate | gradcheck | smoke-data``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
Settings come from flags, then an optional ``--config`` file of
``key = value`` lines (keys are the long flag names), then defaults.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .ablation import VARIANTS, run_ablation
from .checkpoint import load_checkpoint
from .data import DataError, Dataset, load_dataset, save_dataset
from .gradcheck import SUITES, run_suite
from .model import ModelConfig
from .netpbm import ImageBuffer, ImageFormatError, load_image, save_image
from .tensor import Tensor
from .textures import smoke_dataset
from .train import NumericalError, TrainConfig, Trainer, evaluate, load_model, noisy_test_image

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("cdn")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit with status 2
        raise UsageError(message)


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(","))


def _float_list(text: str) -> list[float]:
    return [float(v) for v in text.split(",")]


def read_config(path: str | Path) -> dict[str, str]:
    """``key = value`` lines; '#' starts a comment. Keys use flag spelling (dashes or underscores)."""
    out = {}
    for n, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"{path}:{n}: expected 'key = value'")
        out[key.strip().lstrip("-").replace("-", "_")] = value.strip()
    return out


def _apply_config(parser: argparse.ArgumentParser, path: str) -> None:
    """Install config-file values as parser defaults, so explicit flags still win."""
    actions = {a.dest: a for a in parser._actions}
    defaults = {}
    for key, value in read_config(path).items():
        action = actions.get(key)
        if action is None or key in ("help", "config", "command"):
            raise UsageError(f"unknown config key {key!r}")
        if action.nargs == 0:  # store_true / store_false
            truthy = value.lower() in ("1", "true", "yes", "on")
            defaults[key] = truthy if action.const is True else not truthy
        else:
            defaults[key] = action.type(value) if action.type else value
        action.required = False  # satisfied by the file
    parser.set_defaults(**defaults)


def _add_training_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="directory of .pgm/.ppm images (manifest.txt optional)")
    p.add_argument("--sigma", type=float, default=25.0, help="noise level on the 0-255 scale")
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--max-steps", type=int, default=None)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--lr", type=float, default=2e-4)
    p.add_argument("--weight-decay", type=float, default=1e-4)
    p.add_argument("--decoupled-wd", action="store_true", help="AdamW-style decay instead of L2")
    p.add_argument("--lr-factor", type=float, default=0.5)
    p.add_argument("--lr-every", type=int, default=30, help="epochs between learning-rate decays")
    p.add_argument("--patch-size", type=int, default=128)
    p.add_argument("--patches-per-image", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--f-width", type=int, default=64, help="feature width F of IIP/NEP")
    p.add_argument("--idm-widths", type=_int_list, default=(64, 128, 256))
    p.add_argument("--no-ssim-loss", action="store_true")
    p.add_argument("--no-kld-loss", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cdn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a model")
    _add_training_flags(p)
    p.add_argument("--out", required=True, help="checkpoint path (.cdnc)")
    p.add_argument("--drop-path", choices=("iip", "nep"), help="train without this path")
    p.add_argument("--resume", help="continue from this checkpoint")
    p.add_argument("--log", help="write per-step loss terms to this CSV file")
    p.add_argument("--config")

    p = sub.add_parser("denoise", help="denoise one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--sigma", type=float, help="noise level of the input (checked against the model)")
    p.add_argument("--add-noise", action="store_true", help="synthesize AWGN at --sigma before denoising")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config")

    p = sub.add_parser("eval", help="PSNR/SSIM on a test set")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--sigma", type=_float_list, default=[15.0, 25.0, 50.0])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report")
    p.add_argument("--config")

    p = sub.add_parser("ablate", help="train and evaluate the ablation matrix")
    _add_training_flags(p)
    p.add_argument("--test-data", help="held-out images (default: last quarter of --data)")
    p.add_argument("--out", required=True, help="text table path")
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--variants", type=lambda s: s.split(","), default=list(VARIANTS))
    p.add_argument("--config")

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--module", choices=("all", *SUITES), default="all")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config")

    p = sub.add_parser("smoke-data", help="write the procedural texture benchmark")
    p.add_argument("--out", required=True, help="directory; train/ and test/ are created inside")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--test-count", type=int, default=4)
    p.add_argument("--config")
    return parser


def parse_args(argv: list[str] | None = None) -> argparse.Namespace:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, rest = pre.parse_known_args(argv)
    command = next((a for a in rest if a in COMMANDS), None)
    if known.config and command is not None:
        subparsers = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
        _apply_config(subparsers.choices[command], known.config)
    return parser.parse_args(argv)


def _train_config(args: argparse.Namespace) -> TrainConfig:
    drop = getattr(args, "drop_path", None)
    model = ModelConfig(
        channels=1,  # fixed up from the dataset by the caller
        features=args.f_width,
        idm_widths=args.idm_widths,
        use_iip=drop != "iip",
        use_nep=drop != "nep",
    )
    return TrainConfig(
        lr0=args.lr, weight_decay=args.weight_decay, batch=args.batch, epochs=args.epochs,
        max_steps=args.max_steps, lr_factor=args.lr_factor, lr_every=args.lr_every,
        decoupled_wd=args.decoupled_wd, seed=args.seed, sigma=args.sigma,
        ssim_loss=not args.no_ssim_loss, kld_loss=not args.no_kld_loss,
        patch_size=args.patch_size, patches_per_image=args.patches_per_image, model=model,
    )


def _with_channels(cfg: TrainConfig, ds: Dataset) -> TrainConfig:
    return replace(cfg, model=replace(cfg.model, channels=ds.channels))


def cmd_train(args) -> int:
    ds = load_dataset(args.data)
    if args.resume:
        trainer = Trainer.from_checkpoint(args.resume, ds, epochs=args.epochs, max_steps=args.max_steps)
    else:
        trainer = Trainer(_with_channels(_train_config(args), ds), ds, diag_dir=Path(args.out).parent)
    writer = None
    fh = open(args.log, "w", newline="") if args.log else None
    try:
        def on_step(rec: dict) -> None:
            nonlocal writer
            if fh is not None:
                if writer is None:
                    writer = csv.DictWriter(fh, fieldnames=list(rec))
                    writer.writeheader()
                writer.writerow(rec)
            if rec["step"] % 50 == 0:
                log.info("step %d epoch %d lr %.2e loss %.5f (ssim %.4f kld %.5f l1 %.5f)", rec["step"],
                         rec["epoch"], rec["lr"], rec["total"], rec["l_ssim"], rec["l_kld"], rec["l1"])

        trainer.run(checkpoint_path=args.out, on_step=on_step)
    finally:
        if fh is not None:
            fh.close()
    print(f"trained {trainer.step} steps; checkpoint written to {args.out}")
    return EXIT_OK


def cmd_denoise(args) -> int:
    model = load_model(args.ckpt)
    trained_sigma = load_checkpoint(args.ckpt).meta["config"].get("sigma")
    if args.sigma is not None and trained_sigma is not None and args.sigma != trained_sigma:
        log.warning("model was trained at sigma %g, input declared at sigma %g", trained_sigma, args.sigma)
    img = load_image(args.input).to_float()
    if img.shape[0] != model.config.channels:
        raise DataError(f"image has {img.shape[0]} channels, model expects {model.config.channels}")
    if args.add_noise:
        if args.sigma is None:
            raise UsageError("--add-noise needs --sigma")
        img = noisy_test_image(img, args.sigma, args.seed, 0)
    out = model.forward_eval(Tensor(img[None])).data[0]
    save_image(ImageBuffer.from_float(out), args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = load_model(args.ckpt)
    ds = load_dataset(args.data)
    text = "\n\n".join(evaluate(model, ds, s, args.seed).format() for s in args.sigma)
    print(text)
    if args.report:
        Path(args.report).write_text(text + "\n")
    return EXIT_OK


def cmd_ablate(args) -> int:
    ds = load_dataset(args.data)
    if args.test_data:
        train_set, test_set = ds, load_dataset(args.test_data)
    else:
        k = max(1, len(ds) - max(1, len(ds) // 4))
        if k == len(ds):
            raise DataError("need at least two images to hold one out for testing")
        train_set = Dataset(ds.names[:k], ds.images[:k])
        test_set = Dataset(ds.names[k:], ds.images[k:])
    unknown = [v for v in args.variants if v not in VARIANTS]
    if unknown:
        raise UsageError(f"unknown variants {unknown}; choose from {list(VARIANTS)}")
    cfg = _with_channels(_train_config(args), ds)
    table = run_ablation(cfg, train_set, test_set, seeds=range(args.seeds), variants=args.variants)
    text = f"sigma = {cfg.sigma:g}  (PSNR dB / windowed SSIM)\n" + table.format()
    print(text)
    Path(args.out).write_text(text + "\n")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    ok = True
    for name, report in run_suite(args.module, args.seed):
        print(f"{name:<36} {report}")
        ok &= report.passed
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_smoke_data(args) -> int:
    train_set, test_set = smoke_dataset(args.seed, args.count, args.size, args.test_count)
    out = Path(args.out)
    save_dataset(train_set, out / "train")
    save_dataset(test_set, out / "test")
    print(f"wrote {len(train_set)} training and {len(test_set)} test images under {out}")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "denoise": cmd_denoise,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
    "smoke-data": cmd_smoke_data,
}


def main(argv: list[str] | None = None) -> int:
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(f"cdn: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"cdn: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s")
    np.seterr(all="ignore")  # non-finite values are detected explicitly
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"cdn: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ImageFormatError, FileNotFoundError) as exc:
        print(f"cdn: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"cdn: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError) as exc:
        print(f"cdn: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
