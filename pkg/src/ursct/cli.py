"""``ursct`` command line: train, enhance, eval, ablate, gradcheck.

Failures print one line to stderr::

    error category=<usage|config|data|numeric> exit=<code> message=<text>
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from .errors import ConfigError, DataError, NumericError, UrsctError, UsageError

log = logging.getLogger("ursct")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ursct", description="Underwater image enhancement with a Swin-Convs transformer U-Net.")
    p.add_argument("--threads", type=int, default=1, help="BLAS/numeric threads (default 1 for determinism)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    t = sub.add_parser("train", help="train a model from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    t.add_argument("--out", default="runs/train", help="directory for checkpoints and train_log.csv")
    t.add_argument("--resume", help="checkpoint to continue from")

    e = sub.add_parser("enhance", help="enhance an image file or a directory of images")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--input", required=True)
    e.add_argument("--output", required=True)

    v = sub.add_parser("eval", help="score a checkpoint on a dataset")
    v.add_argument("--checkpoint", required=True)
    v.add_argument("--dataset", required=True, help="directory with raw/ and optionally reference/")
    mode = v.add_mutually_exclusive_group(required=True)
    mode.add_argument("--full-reference", action="store_true")
    mode.add_argument("--no-reference", action="store_true")
    v.add_argument("--report", required=True, help="CSV output path")
    v.add_argument("--ms-ssim-scales", type=int, default=5)

    a = sub.add_parser("ablate", help="run the module x loss ablation")
    a.add_argument("--config", required=True)
    a.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    a.add_argument("--out", required=True)

    g = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    g.add_argument("--module", choices=("all", "tensor", "model", "losses"), default="all")
    g.add_argument("--probes", type=int, default=10)
    return p


def _load_config(args):
    from .config import dump_config, load_config

    cfg = load_config(args.config, args.set, seed_env=os.environ.get("URSCT_SEED"))
    for line in dump_config(cfg).splitlines():
        log.info("config %s", line)
    return cfg


def cmd_train(args) -> int:
    from .trainer import train

    cfg = _load_config(args)
    result = train(cfg, out_dir=args.out, resume=args.resume)
    final = result.log[-1]["L_sum"] if result.log else float("nan")
    print(f"trained {result.checkpoint.epoch} epochs, {result.checkpoint.step} steps; final L_sum={final:.6f}")
    print(f"checkpoint: {Path(args.out) / 'last.ckpt'}")
    return 0


def _image_paths(path: Path) -> list[Path]:
    from .data import IMAGE_SUFFIXES

    if path.is_file():
        return [path]
    if path.is_dir():
        found = sorted(p for p in path.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)
        if not found:
            raise DataError(f"no images in {path}")
        return found
    raise DataError(f"input not found: {path}")


def cmd_enhance(args) -> int:
    from .checkpoint import load_checkpoint
    from .data import load_image, resize_bilinear, save_image
    from .metrics import enhance
    from .trainer import model_from_checkpoint

    model = model_from_checkpoint(load_checkpoint(args.checkpoint))
    h, w = model.cfg.image_size
    paths = _image_paths(Path(args.input))
    stems = [p.stem for p in paths]
    if len(set(stems)) != len(stems):
        raise DataError("input images share a filename stem; outputs would collide")
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    for p in paths:
        img = resize_bilinear(load_image(p), h, w)
        save_image(enhance(model, img), out / f"{p.stem}.png")
        log.info("enhanced %s", p.name)
    print(f"wrote {len(paths)} images to {out}")
    return 0


def cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint
    from .data import scan_dataset_root
    from .metrics import evaluate_dataset
    from .trainer import model_from_checkpoint

    model = model_from_checkpoint(load_checkpoint(args.checkpoint))
    full = bool(args.full_reference)
    index = scan_dataset_root(args.dataset, model.cfg.image_size, full_reference=full)
    mode = "full_reference" if full else "no_reference"
    report = evaluate_dataset(model, index, mode, args.ms_ssim_scales)
    report.to_csv(args.report)
    means = report.means
    print(" ".join(f"{k}={v:.6f}" for k, v in means.items()) + f" (n={report.count})")
    return 0


def cmd_ablate(args) -> int:
    from .ablation import ablate

    cfg = _load_config(args)
    result = ablate(cfg, out_dir=args.out)
    print(result.to_text(), end="")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    if args.probes < 1:
        raise UsageError("--probes must be >= 1")
    reports = run_suite(args.module, probes=args.probes)
    for r in reports:
        print(r.line())
    failed = [r.name for r in reports if not r.passed]
    print(f"{len(reports) - len(failed)}/{len(reports)} passed")
    if failed:
        raise NumericError(f"gradcheck failed for {', '.join(failed)}")
    return 0


COMMANDS = {
    "train": cmd_train,
    "enhance": cmd_enhance,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
}


def _report(exc: UrsctError) -> int:
    msg = " ".join(str(exc).split())
    print(f"error category={exc.category} exit={exc.exit_code} message={msg}", file=sys.stderr)
    return exc.exit_code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("missing subcommand (train, enhance, eval, ablate, gradcheck)")
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        logging.basicConfig(
            level=logging.INFO if args.verbose or args.command in ("train", "ablate") else logging.WARNING,
            format="%(levelname)s %(name)s: %(message)s",
            stream=sys.stderr,
        )
        with threadpool_limits(args.threads):
            return COMMANDS[args.command](args)
    except UrsctError as exc:
        return _report(exc)
    except ValueError as exc:
        # stray validation errors from library code map to config failures
        return _report(ConfigError(str(exc)))


if __name__ == "__main__":
    sys.exit(main())
