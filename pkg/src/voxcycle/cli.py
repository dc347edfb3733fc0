"""Command-line entry point: ``voxcycle <subcommand> [flags]``.

Exit codes: 0 success, 2 usage/configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import sys
from dataclasses import fields
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import volume as vio
from .augment import materialize
from .checkpoint import CheckpointError
from .gradcheck import run_suite
from .networks import (
    build_discriminator,
    build_generator,
    layer_table,
    memory_estimate,
    patch_report,
    receptive_field,
    shape_trace,
)
from .tensor import ConfigurationError, thread_cap
from .trainer import (
    NumericalError,
    TrainConfig,
    list_volumes,
    load_checkpoint,
    train,
    translate,
)

log = logging.getLogger("voxcycle")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
CLASSIC_PATCHGAN = [(4, 2), (4, 2), (4, 2), (4, 1), (4, 1)]
GRADCHECK_TOL = 1e-4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# ------------------------------------------------------------------ config

def _coerce(name: str, raw: str, kind):
    kind = str(kind)
    try:
        if "bool" in kind:
            low = raw.strip().lower()
            if low not in ("1", "0", "true", "false", "yes", "no"):
                raise ValueError(raw)
            return low in ("1", "true", "yes")
        if "int" in kind:
            return None if raw.strip().lower() == "none" else int(raw)
        if "float" in kind:
            return float(raw)
    except ValueError:
        raise ConfigurationError(f"config key {name}: cannot parse {raw!r} as {kind}") from None
    return raw.strip()


def read_config(path: str | Path) -> dict:
    """Parse a flat ``key = value`` file; ``#`` starts a comment."""
    types = {f.name: f.type for f in fields(TrainConfig)}
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{path}:{lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigurationError(f"{path}:{lineno}: unknown config key {key!r}")
        values[key] = _coerce(key, raw, types[key])
    return values


def _train_config(args) -> TrainConfig:
    values = read_config(args.config) if args.config else {}
    overrides = {"seed": args.seed, "epochs": args.epochs, "base_lr": args.lr,
                 "lambda_cycle": args.lambda_cycle, "pool_size": args.pool_size,
                 "deterministic": args.deterministic}
    values.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig.from_dict(values)


# ------------------------------------------------------------- subcommands

def cmd_train(args) -> int:
    config = _train_config(args)
    if args.dry_run:
        config.validate(check_paths=False)
        gen, disc = build_generator(config.width_divisor), build_discriminator(config.width_divisor)
        for name, spec in (("G_A2B", gen), ("G_B2A", gen), ("D_A", disc), ("D_B", disc)):
            print(f"[{name}]")
            print(layer_table(spec))
        shape = vio.WORK_SHAPE
        out = shape_trace(gen, shape)[-1]
        itemsize = 4 if config.precision == "single" else 8
        print(f"generator shape trace {shape} -> {out[1:]}")
        print(f"discriminator score map for {shape}: {shape_trace(disc, shape)[-1][1:]}")
        g_inf = memory_estimate(gen, shape, itemsize)
        g_train = memory_estimate(gen, shape, itemsize, training=True)
        d_train = memory_estimate(disc, shape, itemsize, training=True)
        print(f"full-size memory estimate: translate {g_inf / 2**30:.2f} GiB, "
              f"training ~{(4 * g_train + 2 * d_train) / 2**30:.2f} GiB")
        return EXIT_OK
    stream = open(args.log, "a") if args.log else sys.stdout
    try:
        state = train(config, resume=args.resume, force=args.force, log_stream=stream)
    finally:
        if args.log:
            stream.close()
    print(f"finished {state.epoch} epochs, {state.step} steps", file=sys.stderr)
    return EXIT_OK


def _inputs(path: str) -> list[Path]:
    p = Path(path)
    return list_volumes(p) if p.is_dir() else [p]


def _out_path(src: Path, out: str, multiple: bool, suffix: str = "") -> Path:
    if not multiple and not Path(out).is_dir():
        return Path(out)
    name = src.name
    ext = ".nii.gz" if name.endswith(".nii.gz") else ".nii"
    stem = name[: -len(ext)]
    Path(out).mkdir(parents=True, exist_ok=True)
    return Path(out) / f"{stem}{suffix}{ext}"


def cmd_translate(args) -> int:
    if not args.checkpoint:
        raise UsageError("translate needs --checkpoint")
    state = load_checkpoint(args.checkpoint)
    paths = _inputs(args.inp)
    for src in paths:
        result = translate(state, vio.load(src), args.direction.upper())
        dst = _out_path(src, args.out, len(paths) > 1, f"_{args.direction.lower()}")
        vio.save(result, dst)
        print(dst)
    return EXIT_OK


def cmd_augment(args) -> int:
    paths = _inputs(args.inp)
    vols = [vio.load(p) for p in paths]
    written = materialize(paths, vols, args.out, args.n, args.seed, args.sigma)
    print(f"wrote {len(written)} volumes to {args.out}")
    return EXIT_OK


def cmd_preprocess(args) -> int:
    paths = _inputs(args.inp)
    offset = tuple(args.offset) if args.offset else None
    for src in paths:
        vol = vio.crop(vio.load(src), tuple(args.size), offset)
        if args.normalize:
            vol = vio.normalize_intensity(vol, args.percentile)
        dst = _out_path(src, args.out, len(paths) > 1, "_crop")
        vio.save(vol, dst)
        print(f"{dst} {vol.shape}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    for src in _inputs(args.inp):
        hdr, vol = vio.read_nifti(src.read_bytes(), str(src))
        print(f"== {src}")
        for key in ("sizeof_hdr", "dim", "datatype", "bitpix", "pixdim", "vox_offset",
                    "scl_slope", "scl_inter", "magic"):
            print(f"{key}: {getattr(hdr, key)}")
        for key, value in vio.describe(vol).items():
            print(f"{key}: {value}")
    return EXIT_OK


def cmd_rf(args) -> int:
    if args.layers:
        pairs = []
        for item in args.layers.split():
            k, s = item.split(",")
            pairs.append((int(k), int(s)))
        r = receptive_field(pairs)
        print(f"receptive field: {r}")
        return EXIT_OK
    if args.preset == "classic":
        print(f"receptive field: {receptive_field(CLASSIC_PATCHGAN)}")
    elif args.preset == "discriminator":
        report = patch_report()
        print(f"receptive field: {report.recurrence}")
        if not report.consistent:
            r, st = report.recurrence, report.stated
            print(f"warning: the stated PatchGAN patch size is {st}x{st}x{st}, but the "
                  f"layer recurrence on this architecture gives {r}x{r}x{r}")
    else:
        receptive_field(build_generator())  # raises: not a plain conv stack
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results, elapsed = run_suite(args.seed)
    for name, err in results.items():
        flag = "ok" if err < GRADCHECK_TOL else "FAIL"
        print(f"{flag:4s} {err:.3e}  {name}")
    worst = max(results.values())
    print(f"max relative error {worst:.3e} over {len(results)} checks in {elapsed:.1f}s")
    return EXIT_OK if worst < GRADCHECK_TOL else EXIT_NUMERIC


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="voxcycle", description="Volumetric CycleGAN toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None,
                       help="single-threaded, bitwise reproducible numerics")
        return p

    p = add("train", "train the four networks from a config file")
    p.add_argument("--config")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lambda-cycle", type=float)
    p.add_argument("--pool-size", type=int)
    p.add_argument("--resume")
    p.add_argument("--force", action="store_true", help="resume despite config mismatch")
    p.add_argument("--log", help="append metric lines here instead of stdout")
    p.add_argument("--dry-run", action="store_true")
    p.set_defaults(func=cmd_train)

    p = add("translate", "apply a trained generator to one volume or a directory")
    p.add_argument("--checkpoint")
    p.add_argument("--direction", choices=("a2b", "b2a"), default="a2b")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_translate)

    p = add("augment", "write each volume plus N randomly rotated copies")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--sigma", type=float, default=10.0, help="angle stdev in degrees")
    p.set_defaults(func=cmd_augment)

    p = add("preprocess", "crop to the working grid and normalize intensities")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", default=".")
    p.add_argument("--size", type=int, nargs=3, default=list(vio.WORK_SHAPE))
    p.add_argument("--offset", type=int, nargs=3)
    p.add_argument("--normalize", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--percentile", type=float, default=99.5)
    p.set_defaults(func=cmd_preprocess)

    p = add("inspect", "print NIfTI header fields and volume statistics")
    p.add_argument("--in", dest="inp", required=True)
    p.set_defaults(func=cmd_inspect)

    p = add("rf", "receptive field of a preset or a custom conv stack")
    p.add_argument("--preset", choices=("classic", "discriminator", "generator"),
                   default="discriminator")
    p.add_argument("--layers", help='space-separated "kernel,stride" pairs, first layer first')
    p.set_defaults(func=cmd_rf)

    p = add("gradcheck", "double-precision finite-difference gradient suite")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"voxcycle: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.seed is None:
        args.seed = 0 if args.command != "train" else None
    if args.command != "train" and args.deterministic is None:
        args.deterministic = True
    try:
        cap = 1 if args.deterministic else thread_cap()
        limits = threadpool_limits(limits=cap) if cap else contextlib.nullcontext()
        with limits:
            return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"voxcycle: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"voxcycle: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigurationError, CheckpointError, vio.NiftiFormatError, vio.CropBoundsError,
            vio.DegenerateRangeError, FileNotFoundError, ValueError) as exc:
        print(f"voxcycle: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
