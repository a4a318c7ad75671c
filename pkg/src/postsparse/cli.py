"""Command-line driver.

Exit codes: 0 success, 1 usage error, 2 data/model format error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import io
from .allocation import ALLOCATORS, AllocationError, achieved_sparsity, allocate, apply_plan
from .graph import GraphError
from .metrics import MetricError
from .reconstruction import NumericalError, ReconConfig, run_reconstruction
from .tensor import ShapeError
from .harness import report as reporting
from .harness.data import DatasetSpec, gen_dataset, load_dataset, sample_calibration, save_dataset
from .harness.sweep import DEFAULT_RATES, FixtureSpec, SweepConfig, load_tables, run_sweep
from .harness.zoo import FAMILIES, SIZES, TrainingDiverged, evaluate, train_fixture

log = logging.getLogger("postsparse")

EXIT_OK, EXIT_USAGE, EXIT_FORMAT, EXIT_NUMERIC = 0, 1, 2, 3
GRANULARITY_FLAG = {"single": "single", "layer": "layer_wise", "block": "block_wise"}
PAPER_SCALE = {"calib_count": 1024, "batch": 64, "iters": 20000}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _words(text: str) -> tuple[str, ...]:
    return tuple(x.strip() for x in text.split(",") if x.strip())


def _rate(text: str) -> float:
    r = float(text)
    if not 0 <= r < 1:
        raise argparse.ArgumentTypeError(f"rate must lie in [0, 1), got {text}")
    return r


def read_config(path) -> dict[str, str]:
    """Flat ``key=value`` file; keys are flag names with or without dashes."""
    out = {}
    for n, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k.lstrip("-").replace("-", "_")] = v
    return out


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0, help="root seed (u64)")
    p.add_argument("--out", type=Path, help="output file or directory")
    p.add_argument("--config", type=Path, help="key=value file mirroring the flags")
    p.add_argument("--paper-scale", action="store_true",
                   help="calibration 1024, batch 64, 20000 iterations")
    p.add_argument("-v", "--verbose", action="store_true")


def _recon_flags(p: argparse.ArgumentParser, sweep: bool = False) -> None:
    if not sweep:
        p.add_argument("--granularity", choices=sorted(GRANULARITY_FLAG), default="block")
        p.add_argument("--input", choices=("sparse", "dense"), default="sparse")
        p.add_argument("--error-correction", action="store_true")
        p.add_argument("--per-tensor", action="store_true", help="per-tensor instead of per-channel correction")
    p.add_argument("--iters", type=int, default=2000)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--batch", type=int, default=32)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="postsparse", description="Post-training sparsity benchmark driver.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    parser.commands = sub.choices

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    _common(p)
    p.add_argument("--task", choices=("cls", "den"), default="cls")
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--channels", type=int, default=1)
    p.add_argument("--size", type=int, default=8)
    p.add_argument("--n-train", type=int, default=1024)
    p.add_argument("--n-test", type=int, default=512)
    p.add_argument("--noise", type=float)
    p.add_argument("--separation", type=float, default=1.0)
    p.add_argument("--calib-count", type=int, default=256, help="also write calib.ptsc (0 to skip)")

    p = sub.add_parser("train", help="train a fixture model")
    _common(p)
    p.add_argument("--data", type=Path, required=True, help="dataset directory")
    p.add_argument("--family", choices=FAMILIES, required=True)
    p.add_argument("--size", choices=SIZES, default="s")
    p.add_argument("--epochs", type=int, default=15)

    p = sub.add_parser("sparsify", help="allocate and apply masks")
    _common(p)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--rate", type=_rate, required=True)
    p.add_argument("--allocator", choices=ALLOCATORS, default="magnitude")
    p.add_argument("--keep-last-dense", action="store_true")
    p.add_argument("--plan", type=Path, help="per-layer rate file for --allocator custom")

    p = sub.add_parser("reconstruct", help="reconstruct a sparse model on calibration data")
    _common(p)
    p.add_argument("--dense", type=Path, required=True)
    p.add_argument("--sparse", type=Path, required=True)
    p.add_argument("--masks", type=Path, required=True)
    p.add_argument("--calib", type=Path, required=True, help=".ptsc calibration file")
    _recon_flags(p)

    p = sub.add_parser("evaluate", help="score a model on a dataset's test split")
    _common(p)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)

    p = sub.add_parser("sweep", help="run a benchmark sweep")
    _common(p)
    p.add_argument("--fixtures", type=_words, help="e.g. mlp-s-cls,rescnn-m-cls (default: full zoo)")
    p.add_argument("--rates", type=_floats, default=DEFAULT_RATES)
    p.add_argument("--allocators", type=_words, default=("uniform", "magnitude", "erk"))
    p.add_argument("--settings", type=_words,
                   help="reconstruction settings as granularity-input-ec|noec (default: all track-2 settings)")
    p.add_argument("--reference-only", action="store_true",
                   help="only the reference configuration, no allocation track")
    p.add_argument("--seeds", type=_ints, default=(0, 1, 2))
    p.add_argument("--keep-last-dense", action="store_true")
    p.add_argument("--calib-count", type=int, default=256)
    p.add_argument("--epochs", type=int, default=15)
    p.add_argument("--workers", type=int, default=1)
    _recon_flags(p, sweep=True)

    p = sub.add_parser("report", help="render track reports from score tables")
    _common(p)
    p.add_argument("--scores", type=Path, required=True, help="scores directory of a sweep")
    p.add_argument("--track", choices=reporting.TRACKS + ("all",), default="all")
    p.add_argument("--om-rates", type=_floats, default=DEFAULT_RATES)
    return parser


def _config_path(argv) -> Path | None:
    for i, a in enumerate(argv):
        if a == "--config" and i + 1 < len(argv):
            return Path(argv[i + 1])
        if a.startswith("--config="):
            return Path(a.split("=", 1)[1])
    return None


def parse_args(argv) -> argparse.Namespace:
    parser = build_parser()
    cfg: dict[str, str] = {}
    path = _config_path(argv)
    command = next((a for a in argv if not a.startswith("-")), None)
    if path is not None and command in parser.commands:
        sub = parser.commands[command]
        known = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
        cfg = read_config(path)
        unknown = sorted(set(cfg) - set(known))
        if unknown:
            raise UsageError(f"{path}: unknown keys {', '.join(unknown)}")
        defaults = {}
        for k, v in cfg.items():
            act = known[k]
            if act.nargs == 0:
                defaults[k] = v.lower() in ("1", "true", "yes", "on")
            else:
                defaults[k] = v
            act.required = False
        # string defaults pass through the flag's type; the command line still wins
        sub.set_defaults(**defaults)
    args = parser.parse_args(argv)
    if getattr(args, "paper_scale", False):
        for k, v in PAPER_SCALE.items():
            if hasattr(args, k) and k not in cfg and not _given(argv, k):
                setattr(args, k, v)
    return args


def _given(argv, dest: str) -> bool:
    flag = "--" + dest.replace("_", "-")
    return any(a == flag or a.startswith(flag + "=") for a in argv)


def _out(args, default: str) -> Path:
    return Path(args.out) if args.out is not None else Path(default)


def cmd_gen_data(args) -> int:
    noise = args.noise if args.noise is not None else (1.0 if args.task == "cls" else 0.3)
    spec = DatasetSpec(task=args.task, classes=args.classes, channels=args.channels, size=args.size,
                       n_train=args.n_train, n_test=args.n_test, noise=noise, separation=args.separation)
    out = _out(args, f"data/{args.task}")
    ds = gen_dataset(spec, args.seed)
    paths = save_dataset(ds, out)
    if args.calib_count > 0:
        paths["calib"] = out / "calib.ptsc"
        io.save_calibration(sample_calibration(ds, args.calib_count, args.seed + 1), paths["calib"])
    for k, p in paths.items():
        print(f"{k}: {p}")
    return EXIT_OK


def cmd_train(args) -> int:
    ds = load_dataset(args.data)
    out = _out(args, f"models/{args.family}-{args.size}-{ds.spec.task}.ptsm")
    _, score = train_fixture(args.family, args.size, ds, args.epochs, args.seed, out)
    print(f"model: {out}")
    print(f"score: {score.value:.6f} ({score.orientation})")
    return EXIT_OK


def cmd_sparsify(args) -> int:
    dense = io.load_model(args.model)
    rates = None
    if args.allocator == "custom":
        if args.plan is None:
            raise UsageError("--allocator custom needs --plan")
        rates = io.read_plan(args.plan)
    elif args.plan is not None:
        raise UsageError("--plan only applies to --allocator custom")
    plan = allocate(dense, args.allocator, args.rate, args.keep_last_dense, rates)
    masks, sparse = apply_plan(dense, plan)
    out = _out(args, "sparse")
    out.mkdir(parents=True, exist_ok=True)
    io.save_model(sparse, out / "model.ptsm")
    io.save_masks(masks, out / "masks.ptsk")
    io.write_plan(plan.rates, out / "plan.txt", comment=f"{args.allocator} rate={args.rate}")
    print(f"achieved sparsity: {achieved_sparsity(masks):.6f}")
    print(f"written: {out}")
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    dense, sparse = io.load_model(args.dense), io.load_model(args.sparse)
    masks = io.load_masks(args.masks)
    calib, _ = io.load_calibration(args.calib)
    cfg = ReconConfig(granularity=GRANULARITY_FLAG[args.granularity], input_mode=args.input,
                      error_correction=args.error_correction, lr=args.lr, momentum=args.momentum,
                      iterations=args.iters, batch_size=args.batch, seed=args.seed,
                      per_channel=not args.per_tensor)
    recon, rep = run_reconstruction(dense, sparse, masks, calib, cfg)
    out = _out(args, "reconstructed.ptsm")
    io.save_model(recon, out)
    for u in rep.units:
        flag = "  ABORTED " + u.diagnostic if u.aborted else ""
        print(f"{u.unit.output}: {u.initial_loss:.6g} -> {u.final_loss:.6g}{flag}")
    print(f"written: {out}")
    if rep.aborted:
        raise NumericalError(f"{len(rep.aborted)} unit(s) hit a non-finite loss and were restored")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    score = evaluate(io.load_model(args.model), load_dataset(args.data))
    print(json.dumps({"value": score.value, "orientation": score.orientation}))
    return EXIT_OK


def _parse_setting(tag: str) -> tuple[str, str, bool]:
    parts = tag.split("-")
    if len(parts) != 3 or parts[0] not in GRANULARITY_FLAG or parts[1] not in ("sparse", "dense") \
            or parts[2] not in ("ec", "noec"):
        raise UsageError(f"bad setting {tag!r}; expected e.g. block-sparse-noec")
    return GRANULARITY_FLAG[parts[0]], parts[1], parts[2] == "ec"


def cmd_sweep(args) -> int:
    kw = {}
    if args.fixtures:
        try:
            kw["fixtures"] = [FixtureSpec.parse(f) for f in args.fixtures]
        except ValueError as e:
            raise UsageError(str(e))
    if args.reference_only:
        kw["allocators"] = ()
        kw["recon"] = (("block_wise", "sparse", False),)
    else:
        kw["allocators"] = args.allocators
        if args.settings:
            kw["recon"] = tuple(_parse_setting(s) for s in args.settings)
    bad = [a for a in kw["allocators"] if a not in ("uniform", "magnitude", "erk")]
    if bad:
        raise UsageError(f"sweep allocators must be uniform/magnitude/erk, got {bad}")
    cfg = SweepConfig(_out(args, "sweep"), rates=args.rates, seeds=args.seeds, root_seed=args.seed,
                      keep_last_dense=args.keep_last_dense, calib_count=args.calib_count,
                      batch_size=args.batch, iterations=args.iters, lr=args.lr, momentum=args.momentum,
                      train_epochs=args.epochs, workers=args.workers, **kw)
    res = run_sweep(cfg)
    for track, rep in res.reports.items():
        print(f"== {track}")
        print(reporting.render_text(rep))
    print(f"cells: {len(res.results)} ok, {res.errors} failed; output in {cfg.out}")
    return EXIT_NUMERIC if res.errors else EXIT_OK


def cmd_report(args) -> int:
    tables = load_tables(args.scores)
    tracks = reporting.TRACKS if args.track == "all" else (args.track,)
    out = args.out
    shown = 0
    for track in tracks:
        try:
            rep = reporting.build_report(tables, track, args.om_rates)
        except reporting.EmptyTrack:
            if args.track != "all":
                raise UsageError(f"no data for track {track!r}")
            continue
        shown += 1
        print(f"== {track}")
        print(reporting.render_text(rep))
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            (out / f"{track}.csv").write_text(reporting.render_csv(rep))
            (out / f"{track}.txt").write_text(reporting.render_text(rep))
    if not shown:
        raise UsageError("score tables contain no reportable track")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "sparsify": cmd_sparsify,
    "reconstruct": cmd_reconstruct,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
    "report": cmd_report,
}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (io.FormatError, FileNotFoundError, GraphError, ShapeError) as e:
        print(f"format error: {e}", file=sys.stderr)
        return EXIT_FORMAT
    except (NumericalError, TrainingDiverged, FloatingPointError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (AllocationError, MetricError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
