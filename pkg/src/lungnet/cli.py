"""Command-line pipeline: stats, select, frame, train, eval, bench.

Stages talk through files: manifest -> split -> frames -> model -> reports.

Exit codes: 0 success, 1 usage error, 2 data error (bad manifest, WAV,
model file, shapes), 3 numeric error (NaN/Inf during training or inference).

A JSON config (``--config`` or the ``LUNGNET_CONFIG`` environment variable)
may set any flag: top-level keys apply to every command, and a section named
after a command applies to that command only. Flags given on the command
line win over config values.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .audio import CANONICAL_RATE_HZ, DEFAULT_STRIDE_S, DEFAULT_WINDOW_S, WavError, frame_recordings
from .bench import BenchConfig, BenchConfigError, emit_report, frame_input, make_report, measure_latency, read_power_file
from .ingest import (
    DROPPED_CLASSES,
    SplitSpec,
    apply_split,
    compute_stats,
    format_stats,
    load_demographics,
    load_manifest,
    select_subset,
    split_subjects,
    with_demographics,
    write_manifest,
)
from .model import ModelConfig, build_model, encode_demographics, shipped_config
from .nn import NumericError, count_cost
from .nn.serialize import ModelFileError
from .traineval import TrainConfig, TrainedModel, TrainingError, evaluate, format_table, train

CONFIG_ENV = "LUNGNET_CONFIG"
EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3

log = logging.getLogger("lungnet")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _globals(p, suppress):
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    p.add_argument("--seed", type=int, default=d(0), help="seed for every random choice (default 0)")
    p.add_argument("--config", default=d(None), help=f"JSON config file; falls back to ${CONFIG_ENV}")
    p.add_argument("-v", "--verbose", action="count", default=d(0), help="more logging (-v info, -vv debug)")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lungnet", description="respiratory-sound classification pipeline")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    _globals(p, suppress=False)
    common = _Parser(add_help=False)
    _globals(common, suppress=True)
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    s = sub.add_parser("stats", parents=[common], help="print class, age-group and device breakdowns")
    s.add_argument("--manifest", required=True, help="recording manifest (TSV, or CSV by suffix)")
    s.add_argument("--demographics", help="table of estimated ages/sexes overriding the manifest")
    s.add_argument("--age-width", type=float, default=10.0, help="age-group width in years (default 10)")
    s.add_argument("--json", dest="json_out", help="also write the statistics as JSON here")
    s.add_argument("--all-classes", action="store_true", help="list classes with no subjects too")

    s = sub.add_parser("select", parents=[common], help="keep one device, drop classes and split by subject")
    s.add_argument("--manifest", required=True, help="recording manifest")
    s.add_argument("--out", required=True, help="output directory for selected.tsv and split.json")
    s.add_argument("--device", default="Meditron", help="device to keep (default Meditron)")
    s.add_argument(
        "--drop", default=",".join(sorted(DROPPED_CLASSES)), help="comma-separated diagnoses to drop (default %(default)s)"
    )
    s.add_argument("--test-fraction", type=float, default=0.19, help="test share of each class's subjects (default 0.19)")

    s = sub.add_parser("frame", parents=[common], help="cut recordings into fixed windows and save frame tensors")
    s.add_argument("--manifest", required=True, help="recording manifest")
    s.add_argument("--split", help="split.json; writes train and test frame sets (otherwise one set named 'all')")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--window", type=float, default=DEFAULT_WINDOW_S, help="window length in seconds (default 5)")
    s.add_argument("--stride", type=float, default=DEFAULT_STRIDE_S, help="hop between windows in seconds (default 1)")
    s.add_argument("--sample-rate", type=int, default=CANONICAL_RATE_HZ, help="resample to this rate in Hz (default 44100)")
    s.add_argument("--demographics", help="table of estimated ages/sexes overriding the manifest")

    s = sub.add_parser("train", parents=[common], help="train a model on a frame set")
    s.add_argument("--frames", required=True, help="frame set stem (e.g. frames/train)")
    s.add_argument("--out", required=True, help="model file to write")
    s.add_argument("--model-config", default="audio_only", help="'audio_only', 'fusion' or a JSON model config path")
    s.add_argument("--fusion", action="store_true", help="add the demographic fusion branch to the model config")
    s.add_argument("--demographics", help="demographics table (default: demographics.tsv next to the frames)")
    s.add_argument("--history", help="loss history TSV (default: <out>.history.tsv)")
    s.add_argument("--epochs", type=int, default=100, help="maximum epochs (default 100)")
    s.add_argument("--batch-size", type=int, default=32, help="mini-batch size (default 32)")
    s.add_argument("--lr", type=float, default=1e-3, help="learning rate (default 1e-3)")
    s.add_argument("--lr-decay", type=float, default=1.0, help="multiply lr by this every --lr-decay-every epochs")
    s.add_argument("--lr-decay-every", type=int, default=0, help="epochs between lr decays; 0 disables (default)")
    s.add_argument("--optimizer", choices=("adam", "sgd"), default="adam", help="optimizer (default adam)")
    s.add_argument("--momentum", type=float, default=0.0, help="SGD momentum (default 0)")
    s.add_argument("--patience", type=int, default=10, help="early-stop patience in epochs; 0 disables (default 10)")
    s.add_argument("--val-fraction", type=float, default=0.1, help="share of training subjects held out (default 0.1)")
    s.add_argument("--class-weights", action="store_true", help="inverse-frequency class weights in the loss")

    s = sub.add_parser("eval", parents=[common], help="evaluate a trained model on a frame set")
    s.add_argument("--model", required=True, help="model file")
    s.add_argument("--frames", required=True, help="frame set stem (e.g. frames/test)")
    s.add_argument("--out", required=True, help="evaluation report JSON to write")
    s.add_argument("--demographics", help="demographics table (default: demographics.tsv next to the frames)")
    s.add_argument("--table", help="also write the plain-text table here")
    s.add_argument("--label", default=None, help="row label in the table (default: model file name)")

    s = sub.add_parser("bench", parents=[common], help="measure batch-1 latency and derive throughput/energy")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--model", help="model file to benchmark")
    g.add_argument("--model-config", help="benchmark an untrained model built from 'audio_only', 'fusion' or a JSON path")
    s.add_argument("--warmup", type=int, default=5, help="unmeasured warmup runs (default 5)")
    s.add_argument("--runs", type=int, default=30, help="measured runs (default 30)")
    pw = s.add_mutually_exclusive_group()
    pw.add_argument("--power-mw", type=float, help="board power in milliwatts")
    pw.add_argument("--power-file", help="sensor file holding one integer milliwatt reading")
    s.add_argument("--label", default="host CPU", help="configuration label (default 'host CPU')")
    s.add_argument("--cpu-mhz", type=float, help="CPU frequency label")
    s.add_argument("--gpu-mhz", type=float, help="GPU frequency label")
    s.add_argument("--latency-s", type=float, help="skip measurement and derive metrics from this latency")
    s.add_argument("--flops", type=float, help="override the model's counted FLOPs")
    s.add_argument("--parallel", action="store_true", help="let the engine use all BLAS threads")
    s.add_argument("--format", choices=("table", "structured"), default="table", help="report format (default table)")
    s.add_argument("--out", help="write the report here as well as to stdout")
    return p


def _load_config(path):
    if not path:
        return {}
    try:
        cfg = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise UsageError(f"cannot read config {path}: {e}") from None
    if not isinstance(cfg, dict):
        raise UsageError(f"config {path} must hold a JSON object")
    return cfg


def _apply_config(parser, argv, cfg):
    """Re-parse with config values installed as defaults so explicit flags still win."""
    commands = parser._subparsers._group_actions[0].choices
    top = {k: v for k, v in cfg.items() if k not in commands}
    sub_cfg = {k: v for k, v in cfg.items() if k in commands}
    for k, v in sub_cfg.items():
        if not isinstance(v, dict):
            raise UsageError(f"config section {k!r} must be an object")
    for name, sp in commands.items():
        dests = {a.dest for a in sp._actions}
        vals = {k.replace("-", "_"): v for k, v in top.items() if k.replace("-", "_") in dests}
        section = {k.replace("-", "_"): v for k, v in sub_cfg.get(name, {}).items()}
        unknown = sorted(set(section) - dests)
        if unknown:
            raise UsageError(f"config section {name!r}: unknown keys {unknown}")
        vals.update(section)
        sp.set_defaults(**vals)
        # a config value satisfies a required flag
        for a in sp._actions:
            if a.dest in vals:
                a.required = False
    known = {a.dest for sp in commands.values() for a in sp._actions}
    unknown = sorted(k for k in top if k.replace("-", "_") not in known)
    if unknown:
        raise UsageError(f"config: unknown keys {unknown}")
    return parser.parse_args(argv)


def parse(argv):
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    cfg = _load_config(known.config or os.environ.get(CONFIG_ENV))
    if cfg:
        return _apply_config(build_parser(), argv, cfg)
    return build_parser().parse_args(argv)


# -- helpers


def _write_demographics(recordings, path):
    seen = {}
    for r in recordings:
        seen.setdefault(r.subject_id, (r.age_years, r.sex))
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, delimiter="\t", lineterminator="\n")
        w.writerow(["subject_id", "age_years", "sex"])
        for s in sorted(seen):
            age, sex = seen[s]
            w.writerow([s, "NA" if age is None else repr(float(age)), sex])


def _frames_stem(arg):
    stem = Path(arg)
    return stem.with_suffix("") if stem.suffix in (".bin", ".json") else stem


def _demos(args, mcfg: ModelConfig, stem: Path):
    path = args.demographics or stem.parent / "demographics.tsv"
    if not Path(path).exists():
        raise FileNotFoundError(f"demographics table not found: {path}")
    table = load_demographics(path)
    return {s: encode_demographics(a, sex, mcfg.use_age, mcfg.use_gender) for s, (a, sex) in table.items()}


def _model_config(spec) -> ModelConfig:
    if spec in ("audio_only", "fusion"):
        return shipped_config(spec)
    return ModelConfig.load(spec)


# -- commands


def cmd_stats(args):
    recs = load_manifest(args.manifest)
    if args.demographics:
        recs = with_demographics(recs, load_demographics(args.demographics))
    stats = compute_stats(recs, age_group_width_years=args.age_width)
    print(format_stats(stats, only_present=not args.all_classes))
    if args.json_out:
        Path(args.json_out).write_text(json.dumps(stats.to_dict(), indent=2) + "\n", encoding="utf-8")


def cmd_select(args):
    recs = load_manifest(args.manifest)
    drop = [c for c in args.drop.split(",") if c.strip()]
    kept = select_subset(recs, args.device, drop)
    split = split_subjects(kept, args.test_fraction, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(kept, out / "selected.tsv")
    split.save(out / "split.json")
    print(
        f"{len(kept)} of {len(recs)} recordings kept; "
        f"{len(split.train_subjects)} train / {len(split.test_subjects)} test subjects"
    )


def cmd_frame(args):
    recs = load_manifest(args.manifest)
    if args.demographics:
        recs = with_demographics(recs, load_demographics(args.demographics))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.split:
        train_r, test_r = apply_split(recs, SplitSpec.load(args.split))
        parts = [("train", train_r), ("test", test_r)]
    else:
        parts = [("all", recs)]
    for name, part in parts:
        fs = frame_recordings(part, args.sample_rate, args.window, args.stride)
        fs.save(out / name)
        print(f"{name}: {len(fs)} frames written to {out / name}.bin")
    _write_demographics([r for _, p in parts for r in p], out / "demographics.tsv")


def cmd_train(args):
    from .audio import FrameSet

    stem = _frames_stem(args.frames)
    frames = FrameSet.load(stem)
    mcfg = _model_config(args.model_config)
    if args.fusion:
        mcfg.fusion = True
    # the frames fix the input geometry
    mcfg.window_s, mcfg.sample_rate_hz = frames.window_s, frames.sample_rate_hz
    mcfg = ModelConfig.from_dict(mcfg.to_dict())
    stray = sorted(set(frames.labels) - set(mcfg.classes))
    if stray:
        raise ValueError(f"{stem}: frame labels {stray} are not among the model classes {list(mcfg.classes)}")
    graph = build_model(mcfg)
    graph.initialize(args.seed)
    demos = _demos(args, mcfg, stem) if mcfg.fusion else None
    tcfg = TrainConfig(
        batch_size=args.batch_size,
        epochs=args.epochs,
        lr=args.lr,
        lr_decay=args.lr_decay,
        lr_decay_every=args.lr_decay_every,
        optimizer=args.optimizer,
        momentum=args.momentum,
        seed=args.seed,
        patience=args.patience,
        val_fraction=args.val_fraction,
        class_weights=args.class_weights,
    )
    result = train(TrainedModel(graph, mcfg.classes, mcfg), frames, demos, tcfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    result.model.save(out)
    hist = Path(args.history) if args.history else out.with_name(out.name + ".history.tsv")
    hist.write_text(result.history_tsv(), encoding="utf-8")
    last = result.history[-1]
    print(
        f"trained {len(result.history)} epochs (best {result.best_epoch}"
        f"{', stopped early' if result.stopped_early else ''}); final train loss {last['train_loss']:.4f}"
    )
    print(f"model written to {out}; history to {hist}")


def cmd_eval(args):
    from .audio import FrameSet

    model = TrainedModel.load(args.model)
    stem = _frames_stem(args.frames)
    frames = FrameSet.load(stem)
    want = model.graph.input_shape[-1]
    if frames.samples.shape[1] != want:
        raise ValueError(f"{stem}: frames have {frames.samples.shape[1]} samples but the model expects {want}")
    demos = None
    if model.uses_demographics:
        demos = _demos(args, model.config or ModelConfig(fusion=True), stem)
    res = evaluate(model, frames, demos)
    Path(args.out).write_text(res.to_json() + "\n", encoding="utf-8")
    label = args.label or Path(args.model).stem
    cost = count_cost(model.graph)
    table = format_table([(f"{label} (frame)", res.frame, cost), (f"{label} (subject vote)", res.subject, cost)])
    print(table)
    if res.frame.undefined_classes:
        print(f"sensitivity undefined (class absent): {', '.join(res.frame.undefined_classes)}")
    if args.table:
        Path(args.table).write_text(table + "\n", encoding="utf-8")


def cmd_bench(args):
    if args.model:
        graph = TrainedModel.load(args.model).graph
    else:
        graph = build_model(_model_config(args.model_config))
        graph.initialize(args.seed)
    flops = args.flops if args.flops else count_cost(graph).total_flops
    power = read_power_file(args.power_file) if args.power_file else args.power_mw
    cfg = BenchConfig(
        warmup_runs=args.warmup,
        measured_runs=args.runs,
        power_mw=power,
        label=args.label,
        cpu_mhz=args.cpu_mhz,
        gpu_mhz=args.gpu_mhz,
        threads=None if args.parallel else 1,
    )
    if args.latency_s is not None:
        report = make_report(flops, args.latency_s, cfg)
    else:
        x = frame_input(graph.input_shape[-1], args.seed, graph.dtype)
        aux = {port: np.zeros((1, width), dtype=graph.dtype) for port, width in graph.aux_ports.items()}
        report = make_report(flops, measure_latency(graph, x, cfg, aux or None), cfg)
    text = emit_report([report], args.format)
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")


COMMANDS = {
    "stats": cmd_stats,
    "select": cmd_select,
    "frame": cmd_frame,
    "train": cmd_train,
    "eval": cmd_eval,
    "bench": cmd_bench,
}


def run(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv:
        build_parser().print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        args = parse(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help / --version
        return int(e.code or 0)
    if args.command is None:
        build_parser().print_usage(sys.stderr)
        return EXIT_USAGE
    level = (logging.WARNING, logging.INFO, logging.DEBUG)[min(args.verbose, 2)]
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except (NumericError, TrainingError, FloatingPointError) as e:
        print(f"lungnet {args.command}: numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except BenchConfigError as e:
        print(f"lungnet {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, KeyError, WavError, ModelFileError) as e:
        print(f"lungnet {args.command}: {e}", file=sys.stderr)
        return EXIT_DATA
    return 0


def main():
    sys.exit(run())
