"""Command line entry point: ``medenoise {addnoise,denoise,metrics,bench}``.

Exit codes: 0 success, 2 bad arguments, 3 file errors, 4 numeric failures.
Failures also print one ``medenoise-error code=N type=... message=...`` line
on stderr.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import io
from .bench import DEFAULT_SIZES, PHANTOMS, run_bench
from .core import ConfigError, DenoiseConfig, DenoiseError
from .metrics import evaluate
from .noise import add_noise
from .pipeline import denoise_volume

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _fail(code: int, exc) -> int:
    msg = " ".join(str(exc).split())
    kind = type(exc).__name__ if isinstance(exc, BaseException) else "Error"
    print(f"medenoise-error code={code} type={kind} message={msg}", file=sys.stderr)
    return code


def _levels(text: str):
    try:
        vals = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad level list {text!r}")
    if not vals or any(not (math.isfinite(v) and v > 0) for v in vals):
        raise argparse.ArgumentTypeError(f"levels must be positive numbers, got {text!r}")
    return vals


def _size(text: str):
    try:
        dims = tuple(int(x) for x in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad size {text!r}, expected e.g. 128x128 or 64x64x16")
    if len(dims) == 2:
        dims = dims + (1,)
    if len(dims) != 3 or min(dims) < 1:
        raise argparse.ArgumentTypeError(f"bad size {text!r}")
    return dims


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="medenoise", description="Dictionary + residual-network denoising of CT/MRI volumes.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    a = sub.add_parser("addnoise", help="add Rician or Poisson noise to a volume")
    a.add_argument("--model", required=True, choices=("rician", "poisson"))
    a.add_argument("--level", required=True, type=float, help="noise level in percent")
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("input")
    a.add_argument("output")

    d = sub.add_parser("denoise", help="run the full denoising pipeline")
    d.add_argument("--config", help="flat key = value file; missing keys use defaults")
    d.add_argument("--report", help="write the pipeline report here")
    d.add_argument("input")
    d.add_argument("output")

    m = sub.add_parser("metrics", help="PSNR, SSIM and RMSE of test against ref")
    m.add_argument("ref")
    m.add_argument("test")

    b = sub.add_parser("bench", help="noise sweep on a synthetic phantom")
    b.add_argument("--phantom", choices=PHANTOMS, default="shepp")
    b.add_argument("--levels", type=_levels, default=[5.0, 10.0, 15.0])
    b.add_argument("--model", choices=("rician", "poisson"))
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", required=True)
    b.add_argument("--workers", type=int, default=1, help="rows run in parallel")
    b.add_argument("--size", type=_size, help="phantom size, e.g. 128x128 or 64x64x16")
    b.add_argument("--config", help="override the desk configuration")
    b.add_argument("--no-figures", action="store_true")
    return p


def cmd_addnoise(args) -> int:
    if not (math.isfinite(args.level) and args.level > 0):
        raise UsageError(f"--level must be > 0, got {args.level}")
    clean = io.read_volume(args.input)
    noisy = add_noise(clean, args.model, args.level, args.seed)
    io.write_volume(args.output, noisy)
    diff = noisy.data - clean.data
    print(f"noise_mean {float(np.mean(diff)):.3f}")
    print(f"noise_std {float(np.std(diff)):.3f}")
    for line in evaluate(clean, noisy).lines():
        print(line)
    return EXIT_OK


def cmd_denoise(args) -> int:
    cfg = io.read_config(args.config) if args.config else DenoiseConfig()
    vol = io.read_volume(args.input)
    out, report = denoise_volume(vol, cfg)
    io.write_volume(args.output, out)
    text = report.to_text()
    if args.report:
        Path(args.report).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_metrics(args) -> int:
    ref = io.read_volume(args.ref)
    test = io.read_volume(args.test)
    for line in evaluate(ref, test).lines():
        print(line)
    return EXIT_OK


def cmd_bench(args) -> int:
    if args.workers < 1:
        raise UsageError("--workers must be >= 1")
    cfg = io.read_config(args.config) if args.config else None
    size = args.size
    if size is not None and args.phantom == "shepp" and size[2] != 1:
        raise UsageError("the shepp phantom is 2D; use --size NXxNY")
    table = run_bench(args.phantom, args.levels, args.model, args.seed, args.out, args.workers,
                      size or DEFAULT_SIZES[args.phantom], cfg, figures=not args.no_figures)
    sys.stdout.write(table.to_text())
    return EXIT_OK if all(r.ok for r in table.rows) else EXIT_NUMERIC


COMMANDS = {"addnoise": cmd_addnoise, "denoise": cmd_denoise, "metrics": cmd_metrics, "bench": cmd_bench}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _fail(EXIT_USAGE, exc)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError, io.ConfigSyntaxError) as exc:
        return _fail(EXIT_USAGE, exc)
    except (OSError, io.FormatError) as exc:
        return _fail(EXIT_IO, exc)
    except (DenoiseError, ValueError, FloatingPointError, ArithmeticError) as exc:
        return _fail(EXIT_NUMERIC, exc)


if __name__ == "__main__":
    sys.exit(main())
