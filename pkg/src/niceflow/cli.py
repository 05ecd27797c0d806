"""``nice`` command line: train, eval, sample, inpaint, spectrum, manifold, whiten.

Exit codes: 0 success, 1 usage or config error, 2 data/format error,
3 numeric failure. Failures print one diagnostic line on stderr.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import math
import os
import sys

import numpy as np

from . import persistence
from .data import (
    apply_whitening,
    approx_whitening_fit,
    load_matrix,
    load_mnist_idx,
    save_matrix,
    save_whitening,
    zca_fit,
)
from .errors import (
    ConfigError,
    DimensionError,
    DomainError,
    FormatError,
    NumericOverflowError,
    SingularityError,
)
from .inference import (
    image_grid,
    inpaint,
    read_task_file,
    sample_model,
    spectrum,
    spectrum_rows,
    sphere_manifold,
    task_for_row,
    write_pgm,
)
from .numeric import RngStream
from .trainer import TrainConfig, build_dataset, evaluate, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _config_epilog() -> str:
    lines = ["config keys (section.key = default):"]
    for name, f in TrainConfig.keys().items():
        lines.append(f"  {f.metadata['section']}.{name} = {f.default!r}  -- {f.metadata['help']}")
    return "\n".join(lines)


def _build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter

    class Fmt(argparse.ArgumentDefaultsHelpFormatter, fmt):
        pass

    ap = _Parser(prog="nice", description="Additive coupling flows (NICE) toolkit.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a model", epilog=_config_epilog(), formatter_class=Fmt)
    p.add_argument("--config", help="INI config file")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("--seed", type=int, help="top-level seed (overrides train.seed)")
    p.add_argument("--out", help="run directory (overrides train.checkpoint_dir)")
    p.add_argument("--workers", type=int,
                   help="loss-evaluation threads (default: $NICE_NUM_WORKERS or train.workers)")

    p = sub.add_parser("eval", help="mean log-likelihood of data under a checkpoint",
                       epilog=_config_epilog(), formatter_class=Fmt)
    p.add_argument("checkpoint")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--data", help="NICEMAT1/CSV matrix in input space")
    src.add_argument("--split", choices=("train", "valid", "test"),
                     help="rebuild the checkpoint's training data and evaluate this split")
    p.add_argument("--out", default=".", help="output directory")

    p = sub.add_parser("sample", help="ancestral samples", formatter_class=Fmt)
    p.add_argument("checkpoint")
    p.add_argument("-n", type=int, default=16, help="number of samples")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=".", help="output directory")
    p.add_argument("--format", choices=("mat", "csv"), default="mat")
    p.add_argument("--pgm", choices=("auto", "yes", "no"), default="auto",
                   help="write a PGM grid (auto: when D is a perfect square)")

    p = sub.add_parser("inpaint", help="complete masked pixels by noisy projected gradient ascent",
                       formatter_class=Fmt)
    p.add_argument("checkpoint")
    p.add_argument("--task", required=True, help="task description file ([task] section)")
    p.add_argument("--data", required=True, help="rows to complete (NICEMAT1/CSV, input space)")
    p.add_argument("--rows", type=int, default=0, help="only the first N rows (0 = all)")
    p.add_argument("--seed", type=int, help="override the task seed")
    p.add_argument("--out", default=".", help="output directory")
    p.add_argument("--format", choices=("mat", "csv"), default="mat")

    p = sub.add_parser("spectrum", help="sorted per-dimension scales exp(-s)", formatter_class=Fmt)
    p.add_argument("checkpoint")
    p.add_argument("--out", default=".", help="output directory")

    p = sub.add_parser("manifold", help="decode a rotated latent sphere", formatter_class=Fmt)
    p.add_argument("checkpoint")
    p.add_argument("--resolution", type=int, default=10, help="lat/long grid size g (g*g points)")
    p.add_argument("--seed", type=int, default=0, help="rotation seed")
    p.add_argument("--no-rotation", action="store_true")
    p.add_argument("--radius", type=float, help="sphere radius (default: one prior std)")
    p.add_argument("--out", default=".", help="output directory")
    p.add_argument("--format", choices=("mat", "csv"), default="mat")

    p = sub.add_parser("whiten", help="fit a whitening map", formatter_class=Fmt)
    p.add_argument("--data", required=True, help="NICEMAT1/CSV matrix, or IDX images with --idx")
    p.add_argument("--idx", action="store_true", help="read --data as IDX and dequantize to [0,1]")
    p.add_argument("--kind", choices=("zca", "approximate"), default="zca")
    p.add_argument("--eps", type=float, default=1e-5, help="ZCA regularizer")
    p.add_argument("--epochs", type=int, default=200, help="approximate whitening epoch cap")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=".", help="output directory")
    return ap


def _parse_overrides(items):
    out = {}
    for item in items:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise UsageError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def _echo(out_dir, name, settings: dict):
    os.makedirs(out_dir, exist_ok=True)
    cp = configparser.ConfigParser(interpolation=None)
    cp[name] = {k: str(v) for k, v in sorted(settings.items())}
    with open(os.path.join(out_dir, f"{name}.config"), "w", encoding="utf-8") as fh:
        cp.write(fh)


def _write_matrix(out_dir, stem, matrix, fmt):
    path = os.path.join(out_dir, f"{stem}.{fmt}")
    save_matrix(path, matrix)
    return path


def _domain(ckpt):
    try:
        cfg = TrainConfig.from_ini(ckpt.config_text) if ckpt.config_text else TrainConfig()
    except ConfigError:
        return 0.0, 1.0
    return (-1.0, 1.0) if cfg.dequantize == "symmetric" else (0.0, 1.0)


def cmd_train(args) -> int:
    text = ""
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            text = fh.read()
    overrides = _parse_overrides(args.set)
    if args.seed is not None:
        overrides["train.seed"] = str(args.seed)
    if args.out is not None:
        overrides["train.checkpoint_dir"] = args.out
    if args.workers is not None:
        overrides["train.workers"] = str(args.workers)
    elif "NICE_NUM_WORKERS" in os.environ and not any(k.endswith("workers") for k in overrides):
        overrides["train.workers"] = os.environ["NICE_NUM_WORKERS"]
    cfg = TrainConfig.from_ini(text, overrides)
    result = train(cfg, run_dir=cfg.checkpoint_dir)
    best = result.metrics[result.best_epoch]
    print(f"best epoch {result.best_epoch} valid_ll {best['valid_ll']:.6f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = persistence.load(args.checkpoint)
    if args.data:
        x = apply_whitening(ckpt.whitening, load_matrix(args.data))
        name = os.path.basename(args.data)
    else:
        cfg = TrainConfig.from_ini(ckpt.config_text)
        dataset = build_dataset(cfg, RngStream(cfg.seed).child("data"))
        x = apply_whitening(ckpt.whitening, dataset.split(args.split))
        name = args.split
    ll = evaluate(ckpt.model, ckpt.prior, x, ckpt.whitening)
    _echo(args.out, "eval", {"checkpoint": args.checkpoint, "data": args.data or "", "split": args.split or ""})
    with open(os.path.join(args.out, "eval.json"), "w", encoding="utf-8") as fh:
        json.dump({"data": name, "n": int(x.shape[0]), "mean_log_likelihood": ll}, fh)
        fh.write("\n")
    print(f"{ll:.6f}")
    return EXIT_OK


def cmd_sample(args) -> int:
    if args.n < 1:
        raise UsageError("-n must be at least 1")
    ckpt = persistence.load(args.checkpoint)
    x = sample_model(ckpt.model, ckpt.prior, args.n, RngStream(args.seed).child("sample"), ckpt.whitening)
    _echo(args.out, "sample", vars(args) | {"command": "sample"})
    path = _write_matrix(args.out, "samples", x, args.format)
    side = math.isqrt(x.shape[1])
    want_pgm = args.pgm == "yes" or (args.pgm == "auto" and side * side == x.shape[1] and side > 1)
    if want_pgm:
        if side * side != x.shape[1]:
            raise DimensionError(f"cannot tile width {x.shape[1]} into square images")
        lo, hi = _domain(ckpt)
        write_pgm(os.path.join(args.out, "samples.pgm"), image_grid(x, side), lo, hi)
    print(path)
    return EXIT_OK


def cmd_inpaint(args) -> int:
    ckpt = persistence.load(args.checkpoint)
    with open(args.task, encoding="utf-8") as fh:
        settings = read_task_file(fh.read())
    if args.seed is not None:
        settings["seed"] = args.seed
    rows = load_matrix(args.data)
    if args.rows:
        rows = rows[: args.rows]
    if rows.shape[1] != ckpt.model.dim:
        raise DimensionError(f"data width {rows.shape[1]} != model dimension {ckpt.model.dim}")
    done = np.vstack([
        inpaint(ckpt.model, ckpt.prior, task_for_row(settings, row, i), ckpt.whitening)
        for i, row in enumerate(rows)
    ])
    _echo(args.out, "inpaint", {k: v for k, v in settings.items()} | {"checkpoint": args.checkpoint})
    path = _write_matrix(args.out, "inpainted", done, args.format)
    side = math.isqrt(done.shape[1])
    if side * side == done.shape[1] and side > 1:
        lo, hi = settings["domain"]
        write_pgm(os.path.join(args.out, "inpainted.pgm"), image_grid(done, side), lo, hi)
    print(path)
    return EXIT_OK


def cmd_spectrum(args) -> int:
    ckpt = persistence.load(args.checkpoint)
    rows = spectrum_rows(spectrum(ckpt.model))
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "spectrum.csv")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("rank,sigma\n")
        for rank, sigma in rows:
            fh.write(f"{int(rank)},{sigma:.17g}\n")
    print(path)
    return EXIT_OK


def cmd_manifold(args) -> int:
    ckpt = persistence.load(args.checkpoint)
    seed = None if args.no_rotation else args.seed
    pts = sphere_manifold(ckpt.model, ckpt.prior, args.resolution, seed, args.radius, ckpt.whitening)
    _echo(args.out, "manifold", vars(args) | {"command": "manifold"})
    print(_write_matrix(args.out, "manifold", pts, args.format))
    return EXIT_OK


def cmd_whiten(args) -> int:
    rng = RngStream(args.seed)
    if args.idx:
        from .data import dequantize

        x = dequantize(load_mnist_idx(args.data), rng.child("dequantize"))
    else:
        x = load_matrix(args.data)
    if args.kind == "zca":
        record = zca_fit(x, args.eps)
    else:
        record = approx_whitening_fit(x, rng.child("approx-whitening"), epochs=args.epochs)
    _echo(args.out, "whiten", vars(args) | {"command": "whiten"})
    path = os.path.join(args.out, f"{args.kind}.wht")
    save_whitening(path, record, x.shape[1])
    print(f"{path} log_abs_det {record.log_abs_det:.6f}")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "sample": cmd_sample,
    "inpaint": cmd_inpaint,
    "spectrum": cmd_spectrum,
    "manifold": cmd_manifold,
    "whiten": cmd_whiten,
}


def run(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"nice: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, DomainError, DimensionError, OSError) as exc:
        print(f"nice: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericOverflowError, SingularityError) as exc:
        print(f"nice: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"nice: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
