"""Command-line entry point: ``netscope <command> [options]``.

Every command writes its outputs plus ``run_manifest.ini`` under ``--out``.
The manifest is itself a valid ``--config`` file, so
``netscope <command> --config <out>/run_manifest.ini`` repeats the run.

Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import configparser
import contextlib
import hashlib
import io
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import actmax as AM
from . import graph as G
from . import mine as M
from . import probe as P
from . import rf as RF
from . import tensor as T
from . import train as TR
from . import vfilter as VF
from .checkpoint import (CheckpointError, assign_weights, export_weights, import_weights, read_checkpoint,
                         save_checkpoint)
from .data import DataError, Dataset, WhitenStats, compute_whiten, load_cifar10, load_ppm_dir
from .fixtures import gratings

log = logging.getLogger("netscope")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
MANIFEST = "run_manifest.ini"
ENV_THREADS = "NETSCOPE_THREADS"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _ints(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _channels(text: str):
    return None if text in ("all", "") else _ints(text)


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _common(p):
    g = p.add_argument_group("run")
    g.add_argument("--config", help="key = value config file; [<command>] section applies")
    g.add_argument("--out", help="output directory (default runs/<command>)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--deterministic", action="store_true", help="single-threaded, bit-stable execution")
    g.add_argument("--threads", type=int, help=f"worker thread cap (fallback: ${ENV_THREADS})")
    g.add_argument("--precision", type=int, choices=(32, 64), default=32)


def _model(p):
    g = p.add_argument_group("model")
    g.add_argument("--checkpoint", help="load model (and whitening stats) from a checkpoint")
    g.add_argument("--arch", default="resnet34", choices=("resnet34", "plainnet34", "resnet", "plain"))
    g.add_argument("--stage-blocks", default="2,2,2", help="blocks per stage for --arch resnet|plain")
    g.add_argument("--base-channels", type=int, default=16)
    g.add_argument("--input-dims", default=None, help="C,H,W (default 3,224,224 for *34, else 3,32,32)")
    g.add_argument("--num-classes", type=int, default=None)


def _data(p, split="val"):
    g = p.add_argument_group("data")
    g.add_argument("--cifar", help="directory with the CIFAR-10 binary batches")
    g.add_argument("--ppm-dir", help="root directory of a PPM dataset")
    g.add_argument("--manifest", help="manifest TSV (id, path, label) for --ppm-dir")
    g.add_argument("--val-manifest", help="validation manifest for train with --ppm-dir")
    g.add_argument("--fixture", type=int, help="use N synthetic grating images instead of files")
    g.add_argument("--fixture-seed", type=int, default=0)
    g.add_argument("--split", default=split, choices=("train", "val"))
    g.add_argument("--limit", type=int, help="use only the first N images")
    g.add_argument("--batch", type=int, default=64)


def _layer(p, default="stem.maxpool"):
    p.add_argument("--layer", default=default, help="layer name or layerN alias")
    p.add_argument("--channels", default="all", help="comma list or 'all'")


def build_parser() -> _Parser:
    parser = _Parser(prog="netscope", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"netscope {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("train", help="train a model with SGD")
    _common(p); _model(p); _data(p, "train")
    g = p.add_argument_group("optimiser")
    for name, typ, default in [("lr0", float, 0.01), ("momentum", float, 0.9), ("weight-decay", float, 1e-4),
                               ("lr-drop-factor", float, 10.0), ("lr-drop-every", int, 30),
                               ("epochs", int, 90), ("train-batch", int, 256)]:
        g.add_argument(f"--{name}", type=typ, default=default)
    g.add_argument("--no-augment", action="store_true")
    g.add_argument("--no-flip", action="store_true")
    g.add_argument("--decay-all", action="store_true", help="apply weight decay to BN parameters and biases too")
    g.add_argument("--conv-impl", default="gemm", choices=("gemm", "ordered"))
    g.add_argument("--resume", help="checkpoint to continue from")

    p = sub.add_parser("eval", help="validation loss and top-1")
    _common(p); _model(p); _data(p)

    p = sub.add_parser("rf", help="receptive-field geometry table")
    _common(p); _model(p)
    p.add_argument("--layer")
    p.add_argument("--neuron", help="i,j: project this neuron of --layer onto the input")

    for name, help_ in (("scan", "top-K preferred stimuli per channel"),
                        ("meanstim", "mean preferred stimulus per channel")):
        p = sub.add_parser(name, help=help_)
        _common(p); _model(p); _data(p); _layer(p)
        p.add_argument("--neuron-mode", default="center", choices=M.NEURON_MODES)
        p.add_argument("--scale", type=int, default=4)
        if name == "scan":
            p.add_argument("--topk", type=int, default=16)

    p = sub.add_parser("vfilter", help="virtual filters of a conv pair")
    _common(p); _model(p)
    p.add_argument("--first", default="stem.conv")
    p.add_argument("--second", default="downsample2.conv")
    p.add_argument("--channels", default="all")
    p.add_argument("--sort", default="signed", choices=("signed", "abs"))
    p.add_argument("--scale", type=int, default=8)

    p = sub.add_parser("actmax", help="activation maximisation")
    _common(p); _model(p); _layer(p, "layer1")
    p.add_argument("--mode", default="neuron_center", choices=AM.MODES)
    p.add_argument("--steps", type=int, default=31)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--weight-decay", type=float, default=1e-6)
    p.add_argument("--scale", type=int, default=4)
    p.add_argument("--no-crop", action="store_true", help="neuron mode: keep the full input instead of the RF")

    p = sub.add_parser("inactive", help="channels with exactly zero output over a dataset")
    _common(p); _model(p); _data(p)
    p.add_argument("--layer", default="stem.maxpool")

    p = sub.add_parser("noise", help="loss change from noise in inactive channels")
    _common(p); _model(p); _data(p)
    p.add_argument("--layer", default="stem.maxpool")
    p.add_argument("--mode", default="all", choices=P.NOISE_MODES)

    p = sub.add_parser("export", help="checkpoint <-> raw manifest+blob weights")
    _common(p); _model(p)
    p.add_argument("--import-manifest", help="JSON manifest of external weights")
    p.add_argument("--import-blob", help="raw little-endian f32 blob for --import-manifest")
    return parser


# ---------------------------------------------------------------------------
# config files
# ---------------------------------------------------------------------------

def _config_argv(path: str, subparser: argparse.ArgumentParser, command: str) -> list[str]:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    if not cp.read(path):
        raise UsageError(f"config file {path} not found")
    actions = {a.dest: a for a in subparser._actions if a.option_strings}
    argv = []
    for section in ("common", command):
        if not cp.has_section(section):
            continue
        for key, value in cp.items(section):
            dest = key.replace("-", "_")
            if dest not in actions or dest in ("config", "help"):
                raise UsageError(f"{path}: unknown key {key!r} in [{section}]")
            action = actions[dest]
            flag = action.option_strings[-1]
            if isinstance(action, argparse._StoreTrueAction):
                if value.strip().lower() in ("1", "true", "yes", "on"):
                    argv.append(flag)
            else:
                argv += [flag, value]
    return argv


def parse_args(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if not args.command:
        parser.print_help(sys.stderr)
        raise UsageError("a command is required")
    if args.config:
        subparser = parser._subparsers._group_actions[0].choices[args.command]
        cfg = _config_argv(args.config, subparser, args.command)
        args = parser.parse_args([args.command, *cfg, *argv[1:]])
    return args


def effective_config(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("command", "config") and v is not None}


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, default=str).encode()).hexdigest()[:16]


def write_manifest(out: Path, args) -> None:
    cfg = effective_config(args)
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp["run"] = {"command": args.command, "toolkit_version": __version__, "config_hash": config_hash(cfg),
                 "seed": str(args.seed)}
    cp[args.command] = {k.replace("_", "-"): (str(v).lower() if isinstance(v, bool) else str(v))
                        for k, v in cfg.items()}
    buf = io.StringIO()
    cp.write(buf)
    (out / MANIFEST).write_text(buf.getvalue())


# ---------------------------------------------------------------------------
# shared loading
# ---------------------------------------------------------------------------

def load_model(args, init: bool = True) -> tuple[G.ModelGraph, WhitenStats | None, dict]:
    if args.checkpoint:
        ck = read_checkpoint(args.checkpoint)
        model = ck.model()
        whiten = WhitenStats.from_dict(ck.metadata["whiten"]) if ck.metadata.get("whiten") else None
        meta = ck.metadata
    else:
        arch = args.arch
        if arch in ("resnet34", "plainnet34"):
            dims = tuple(_ints(args.input_dims)) if args.input_dims else (3, 224, 224)
            build = G.build_resnet34 if arch == "resnet34" else G.build_plainnet34
            model = build(args.num_classes or 1000, dims, seed=args.seed, init=init)
        else:
            dims = tuple(_ints(args.input_dims)) if args.input_dims else (3, 32, 32)
            model = G.build_scaled(arch, _ints(args.stage_blocks), args.base_channels, dims,
                                   args.num_classes or 10, seed=args.seed, init=init)
        whiten, meta = None, {}
    if args.precision == 64:
        model = model.astype(np.float64)
    return model, whiten, meta


def _limit(ds: Dataset, n):
    return ds.subset(np.arange(min(n, len(ds)))) if n else ds


def load_data(args, model: G.ModelGraph | None = None) -> tuple[Dataset, Dataset | None]:
    """Return ``(primary, secondary)``: for train (train, val), otherwise (selected split, None)."""
    training = args.command == "train"
    if args.fixture:
        size = model.input_dims[1] if model is not None else 32
        classes = model.config.get("num_classes", 4) if model is not None else 4
        tr = gratings(args.fixture, size, classes, args.fixture_seed, split="train")
        va = gratings(max(args.fixture // 4, 2), size, classes, args.fixture_seed + 1, split="val")
    elif args.cifar:
        tr, va = load_cifar10(args.cifar)
    elif args.ppm_dir:
        if not args.manifest:
            raise UsageError("--ppm-dir needs --manifest")
        first = load_ppm_dir(args.ppm_dir, args.manifest, "train" if training else args.split)
        if training:
            va = load_ppm_dir(args.ppm_dir, args.val_manifest, "val") if args.val_manifest else None
            return _limit(first, args.limit), va
        return _limit(first, args.limit), None
    else:
        raise UsageError("no dataset given: use --cifar, --ppm-dir/--manifest or --fixture")
    if training:
        return _limit(tr, args.limit), va
    return _limit(tr if args.split == "train" else va, args.limit), None


def _cast(ds: Dataset, model: G.ModelGraph) -> Dataset:
    dtype = next(iter(model.params.values())).dtype
    if ds.images.dtype != dtype:
        ds.images = ds.images.astype(dtype)
    return ds


def _threads(args):
    if args.deterministic:
        return 1
    if args.threads:
        return args.threads
    env = os.environ.get(ENV_THREADS)
    return int(env) if env else None


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_train(args, out: Path) -> int:
    model, whiten, _ = load_model(args)
    tr, va = load_data(args, model)
    if len(tr) == 0:
        raise DataError("training split is empty")
    whiten = whiten or compute_whiten(tr)
    cfg = TR.TrainConfig(lr0=args.lr0, momentum=args.momentum, weight_decay=args.weight_decay,
                         lr_drop_factor=args.lr_drop_factor, lr_drop_every=args.lr_drop_every,
                         epochs=args.epochs, batch=args.train_batch, seed=args.seed,
                         augment=not args.no_augment, flip=not args.no_flip, decay_all=args.decay_all,
                         eval_batch=args.batch, conv_impl=args.conv_impl)
    result = TR.train(model, _cast(tr, model), va and _cast(va, model), cfg, whiten, out, args.resume)
    for e, split, loss, top1 in result.metrics:
        print(f"{e}\t{split}\t{loss:.6f}\t{top1:.6f}")
    return EXIT_OK


def cmd_eval(args, out: Path) -> int:
    model, whiten, _ = load_model(args)
    ds, _ = load_data(args, model)
    if len(ds) == 0:
        print("no records: dataset is empty")
        return EXIT_OK
    loss, top1 = TR.evaluate(model, _cast(ds, model), whiten, args.batch)
    text = f"split\tloss\ttop1\n{args.split}\t{loss:.9g}\t{top1:.9g}\n"
    (out / "eval.tsv").write_text(text)
    print(text, end="")
    return EXIT_OK


def cmd_rf(args, out: Path) -> int:
    model, _, _ = load_model(args, init=False)  # geometry does not depend on weights
    table = RF.geometry_table(model)
    if args.layer:
        name = model.resolve(args.layer)
        rows = [r for r in table.splitlines()[1:] if r.split("\t")[0] == name]
        table = table.splitlines()[0] + "\n" + "\n".join(rows) + "\n"
    (out / "rf.tsv").write_text(table)
    print(table, end="")
    if args.neuron:
        if not args.layer:
            raise UsageError("--neuron needs --layer")
        i, j = _ints(args.neuron)
        r = RF.project(model, args.layer, (i, j))
        text = ("layer\ti\tj\ttop\tleft\tbottom\tright\tclipped\n"
                f"{r.layer}\t{i}\t{j}\t{r.top}\t{r.left}\t{r.bottom}\t{r.right}\t{int(r.clipped)}\n")
        (out / "projection.tsv").write_text(text)
        print(text, end="")
    return EXIT_OK


def _scan(args):
    model, whiten, _ = load_model(args)
    ds, _ = load_data(args, model)
    ds = _cast(ds, model)
    records = M.scan(model, ds, args.layer, _channels(args.channels), args.neuron_mode, whiten, args.batch)
    return model, whiten, ds, records


def cmd_scan(args, out: Path) -> int:
    _, whiten, ds, records = _scan(args)
    if not any(records.values()):
        M.write_records(out / "records.tsv", [])
        print("no records")
        return EXIT_OK
    images = M.images_by_id(ds, whiten)
    every, top = [], []
    (out / "grids").mkdir(exist_ok=True)
    for ch, recs in records.items():
        best = M.topk(recs, args.topk)
        every += recs
        top += best
        M.export_grid(best, images, out / "grids" / f"grid_c{ch:03d}.ppm", whiten, args.scale)
    M.write_records(out / "records.tsv", every)
    M.write_records(out / "topk.tsv", top)
    print(f"{len(records)} channel(s), {len(every)} records -> {out}")
    return EXIT_OK


def cmd_meanstim(args, out: Path) -> int:
    _, whiten, ds, records = _scan(args)
    if not any(records.values()):
        (out / "meanstim.tsv").write_text("channel\tn\tn_averaged\tinactive\n")
        print("no records")
        return EXIT_OK
    images = M.images_by_id(ds, whiten)
    (out / "means").mkdir(exist_ok=True)
    lines = ["channel\tn\tn_averaged\tinactive"]
    for ch, recs in records.items():
        ms = M.mean_preferred(recs, images)
        lines.append(f"{ch}\t{ms.n}\t{ms.n_averaged}\t{int(ms.inactive_on_dataset)}")
        M.export_mean(ms, out / "means" / f"mean_c{ch:03d}.ppm", args.scale)
    (out / "meanstim.tsv").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return EXIT_OK


def cmd_vfilter(args, out: Path) -> int:
    model, _, _ = load_model(args)
    first, second = model.layer(args.first), model.layer(args.second)
    if first.kind != "conv" or second.kind != "conv":
        raise UsageError("--first and --second must name conv layers")
    w1 = model.params[f"{first.name}.weight"]
    w2 = model.params[f"{second.name}.weight"]
    chans = _channels(args.channels)
    for p in (range(w2.shape[0]) if chans is None else chans):
        vf = VF.virtual_filter(w1, w2, p, args.sort)
        VF.export_vfilter_report(vf, w1, out, args.scale)
    print(f"virtual filters of {second.name} over {first.name} -> {out}")
    return EXIT_OK


def cmd_actmax(args, out: Path) -> int:
    model, whiten, _ = load_model(args)
    name = model.resolve(args.layer)
    dims = model.output_dims()[name]
    chans = _channels(args.channels)
    chans = range(dims[0]) if chans is None else chans
    lines = ["channel\tinitial\tfinal"]
    for ch in chans:
        cfg = AM.ActMaxConfig(name, ch, args.mode, args.steps, args.lr, args.weight_decay)
        res = AM.adam_ascent(model, cfg)
        crop = AM.target_rf(model, cfg) if args.mode == "neuron_center" and not args.no_crop else None
        AM.export_actmax(res, whiten, out / f"actmax_c{ch:03d}.ppm", crop, args.scale)
        lines.append(f"{ch}\t{res.trajectory[0][1]:.9g}\t{res.final_activation:.9g}")
    (out / "actmax.tsv").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return EXIT_OK


def cmd_inactive(args, out: Path) -> int:
    model, whiten, _ = load_model(args)
    ds, _ = load_data(args, model)
    if len(ds) == 0:
        print("no records: dataset is empty")
        return EXIT_OK
    report = P.find_inactive(model, _cast(ds, model), args.layer, whiten, args.batch)
    P.write_report(out / "inactive.tsv", report)
    print(f"{report.layer}: {len(report.inactive)} inactive channel(s): "
          f"{','.join(map(str, report.inactive)) or 'none'}")
    return EXIT_OK


def cmd_noise(args, out: Path) -> int:
    model, whiten, _ = load_model(args)
    ds, _ = load_data(args, model)
    if len(ds) == 0:
        print("no records: dataset is empty")
        return EXIT_OK
    ds = _cast(ds, model)
    report = P.find_inactive(model, ds, args.layer, whiten, args.batch)
    P.write_report(out / "inactive.tsv", report)
    if args.mode == "random_one" and not report.inactive:
        (out / "noise.tsv").write_text("mode\tseed\tclean_loss\tnoised_loss\tdelta\n")
        print("no records: no inactive channels to perturb")
        return EXIT_OK
    res = P.eval_noised(model, ds, report, args.mode, args.seed, whiten, args.batch)
    (out / "noise.tsv").write_text(res.tsv())
    print(res.tsv(), end="")
    return EXIT_OK


def cmd_export(args, out: Path) -> int:
    model, whiten, meta = load_model(args)
    if args.import_manifest:
        if not args.import_blob:
            raise UsageError("--import-manifest needs --import-blob")
        assign_weights(model, import_weights(args.import_manifest, args.import_blob))
        save_checkpoint(model, out / "imported.nsck", {"source": Path(args.import_manifest).name})
        print(f"wrote {out / 'imported.nsck'}")
        return EXIT_OK
    entries = export_weights(model.params, out / "weights.json", out / "weights.f32")
    print(f"wrote {len(entries)} tensors to {out}")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train, "eval": cmd_eval, "rf": cmd_rf, "scan": cmd_scan, "meanstim": cmd_meanstim,
    "vfilter": cmd_vfilter, "actmax": cmd_actmax, "inactive": cmd_inactive, "noise": cmd_noise,
    "export": cmd_export,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    out = Path(args.out or f"runs/{args.command}")
    try:
        out.mkdir(parents=True, exist_ok=True)
        write_manifest(out, args)
        threads = _threads(args)
        limiter = contextlib.nullcontext()
        if threads:
            from threadpoolctl import threadpool_limits
            limiter = threadpool_limits(threads)
        with limiter:
            return COMMANDS[args.command](args, out)
    except (UsageError, G.GraphError, IndexError) as exc:
        print(f"netscope {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, FileNotFoundError, T.ShapeError) as exc:
        print(f"netscope {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FloatingPointError as exc:
        print(f"netscope {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
