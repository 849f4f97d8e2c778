"""Command-line front end: ``sint {gen-data,train,track,reid,eval,rerun}``.

Every command writes ``run.json`` into its output directory with the
argument vector, the resolved seed and the full effective configuration;
``sint rerun run.json`` replays it.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error,
3 missing input file, 4 corrupt checkpoint.
"""
import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .datagen import (ATTRIBUTES, Sequence, build_pair_dataset, generate_sequence, generate_shot_video,
                      generate_suite, load_sequence, save_sequence)
from .evaluation import (attribute_report, oracle_tracker, plot_curves, precision_curve, run_robustness,
                         success_curve, write_attribute_report, write_summary)
from .nnet import CheckpointError
from .siamese import build_model, extract_features, load_model, save_model
from .tracker import FrameResult, SINTTracker, TrackResult, read_result_log, reid_scan, write_result_log
from .training import train

log = logging.getLogger("sint")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE, EXIT_MISSING, EXIT_CHECKPOINT = 0, 1, 2, 3, 4
SEED_ENV = "SINT_SEED"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_globals(p, prefix=""):
    # the subcommand copies use SUPPRESS so they only appear when given
    default = argparse.SUPPRESS if prefix else None
    p.add_argument("--seed", dest=prefix + "seed", type=int, default=default,
                   help=f"run seed (default: ${SEED_ENV} or 0)")
    p.add_argument("--threads", dest=prefix + "threads", type=int, default=default,
                   help="cap on numeric worker threads")
    p.add_argument("--config", dest=prefix + "config", type=Path, default=default,
                   help="key=value config file")
    p.add_argument("--set", dest=prefix + "overrides", action="append",
                   default=argparse.SUPPRESS if prefix else [], metavar="KEY=VALUE",
                   help="override one config key; repeatable, applied after --config")
    p.add_argument("-v", "--verbose", dest=prefix + "verbose", action="store_true",
                   default=argparse.SUPPRESS if prefix else False)


def build_parser():
    """Global options may appear before or after the subcommand."""
    p = _Parser(prog="sint", description="Siamese instance-search tracking at desk scale.")
    _add_globals(p)
    common = argparse.ArgumentParser(add_help=False)
    _add_globals(common, prefix="sub_")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    _add = sub.add_parser

    def add_parser(name, **kw):
        return _add(name, parents=[common], **kw)

    sub.add_parser = add_parser

    g = sub.add_parser("gen-data", help="render synthetic sequences to disk")
    g.add_argument("--out", type=Path, required=True)
    g.add_argument("--count", type=int, default=10)
    g.add_argument("--length", type=int, default=None, help="frames per sequence (default: data.length)")
    g.add_argument("--distortions", default="random",
                   help="comma-separated attribute tags, 'none', or 'random' (default)")
    g.add_argument("--shots", type=int, default=0,
                   help="write multi-shot re-identification videos with this many shots instead")

    t = sub.add_parser("train", help="train a matching network")
    t.add_argument("--out", type=Path, required=True)
    t.add_argument("--data", type=Path, default=None, help="directory of sequence directories")

    k = sub.add_parser("track", help="track sequences and write result logs")
    k.add_argument("--sequence", type=Path, nargs="+", required=True)
    k.add_argument("--out", type=Path, required=True)
    src = k.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint", type=Path)
    src.add_argument("--oracle", action="store_true", help="emit the ground truth (pipeline check)")

    r = sub.add_parser("reid", help="whole-frame re-identification score timeline")
    r.add_argument("--sequence", type=Path, required=True)
    r.add_argument("--checkpoint", type=Path, required=True)
    r.add_argument("--out", type=Path, required=True)

    e = sub.add_parser("eval", help="success/precision curves and summaries")
    e.add_argument("--sequence", type=Path, nargs="+", required=True)
    e.add_argument("--out", type=Path, required=True)
    e.add_argument("--mode", choices=("ope", "tre", "sre"), default="ope")
    e.add_argument("--results", type=Path, default=None,
                   help="directory of <sequence>.txt result logs (OPE only)")
    e.add_argument("--checkpoint", type=Path, default=None, help="tracker model for TRE/SRE runs")
    e.add_argument("--oracle", action="store_true", help="evaluate the ground-truth oracle tracker")

    rr = sub.add_parser("rerun", help="replay a run.json manifest")
    rr.add_argument("manifest", type=Path)
    return p


def parse_args(argv):
    args = build_parser().parse_args(argv)
    for name in ("seed", "threads", "config"):
        if hasattr(args, "sub_" + name):
            setattr(args, name, getattr(args, "sub_" + name))
    args.overrides = list(args.overrides) + list(getattr(args, "sub_overrides", []))
    args.verbose = args.verbose or getattr(args, "sub_verbose", False)
    for name in ("seed", "threads", "config", "overrides", "verbose"):
        if hasattr(args, "sub_" + name):
            delattr(args, "sub_" + name)
    return args


# ---------------------------------------------------------------------------
# helpers

def _require(path, what="file"):
    if not Path(path).exists():
        raise FileNotFoundError(f"{what} not found: {path}")
    return Path(path)


def _resolve_seed(seed):
    if seed is not None:
        return seed
    env = os.environ.get(SEED_ENV, "").strip()
    if env:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"{SEED_ENV}={env!r} is not an integer") from None
    return 0


def _write_manifest(out, argv, args, seed, config):
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": args.command,
        "argv": list(argv),
        "seed": seed,
        "threads": args.threads,
        "config": cfgmod.flatten(config),
    }
    (out / "run.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _sequence_dirs(root):
    """``root`` itself if it is a sequence, else its sequence subdirectories."""
    root = _require(root, "dataset directory")
    if (root / "groundtruth_rect.txt").exists():
        return [root]
    if not root.is_dir():
        raise FileNotFoundError(f"not a sequence or dataset directory: {root}")
    dirs = sorted(d for d in root.iterdir() if (d / "groundtruth_rect.txt").exists())
    if not dirs:
        raise FileNotFoundError(f"no sequences (groundtruth_rect.txt) under {root}")
    return dirs


def _expand(paths):
    return [d for p in paths for d in _sequence_dirs(p)]


def _load(path):
    _require(Path(path) / "groundtruth_rect.txt", "ground truth")
    return load_sequence(path)


def _load_model(path):
    return load_model(_require(path, "checkpoint"))


def _tracker_fn(args, config, gt):
    if args.oracle:
        return oracle_tracker(gt)
    return SINTTracker(_load_model(args.checkpoint), config.tracker)


# ---------------------------------------------------------------------------
# commands

def cmd_gen_data(args, config, seed):
    length = args.length or config.data.length
    size = (config.data.image_size, config.data.image_size)
    base = seed * 1_000_000
    if args.shots:
        for i in range(args.count):
            video = generate_shot_video(base + i, args.shots, max(2, length // args.shots), size)
            d = save_sequence(Sequence(video.frames, video.boxes, name=f"shots{base + i:06d}"),
                              args.out / f"shots{base + i:06d}")
            (d / "presence.txt").write_text("".join(f"{int(p)}\n" for p in video.present))
        return
    if args.distortions == "random":
        seqs = generate_suite(args.count, base, length, size, config.data.max_distortions)
    else:
        tags = () if args.distortions == "none" else tuple(t.strip() for t in args.distortions.split(","))
        unknown = set(tags) - set(ATTRIBUTES)
        if unknown:
            raise UsageError(f"unknown distortions {sorted(unknown)}; known: {', '.join(ATTRIBUTES)}")
        seqs = [generate_sequence(base + i, length, tags, size) for i in range(args.count)]
    for seq in seqs:
        save_sequence(seq, args.out / seq.name)
    log.info("wrote %d sequences to %s", len(seqs), args.out)


def cmd_train(args, config, seed):
    d = config.data
    if args.data is not None:
        seqs = [load_sequence(p) for p in _sequence_dirs(args.data)]
        n_val = max(1, int(round(d.val_fraction * len(seqs)))) if len(seqs) > 1 else 0
        train_seqs, val_seqs = seqs[:len(seqs) - n_val], seqs[len(seqs) - n_val:] or seqs[-1:]
    else:
        size = (d.image_size, d.image_size)
        train_seqs = generate_suite(d.n_train, d.train_seed_offset, d.length, size, d.max_distortions)
        val_seqs = generate_suite(d.n_val, d.val_seed_offset, d.length, size, d.max_distortions)
    train_pairs = build_pair_dataset(train_seqs, d.frame_pairs_train, config.pairs, seed)
    val_pairs = build_pair_dataset(val_seqs, d.frame_pairs_val, config.pairs, seed + 1)
    model = build_model(config.model.architecture(), seed)
    model, report = train(model, train_pairs, val_pairs, config.train)
    save_model(args.out / "model.sint", model)
    report.to_csv(args.out / "training_report.csv")
    log.info("stopped (%s); best epoch %d, val loss %.5f", report.stop_reason, report.best_epoch,
             report.best_val_loss)


def cmd_track(args, config, seed):
    model = None if args.oracle else _load_model(args.checkpoint)
    for path in _expand(args.sequence):
        seq = _load(path)
        if args.oracle:
            result = TrackResult([FrameResult(b, b, 1.0, 1, 1) for b in seq.groundtruth])
        else:
            result = SINTTracker(model, config.tracker).track(seq.frames, seq.groundtruth[0])
        write_result_log(args.out / f"{seq.name}.txt", result)
        log.info("%s: %d frames at %.1f fps", seq.name, len(result), result.fps)


def cmd_reid(args, config, seed):
    model = _load_model(args.checkpoint)
    seq = _load(args.sequence)
    query_box = seq.groundtruth[0]
    qf = extract_features(model, seq.frames[0], query_box[None])[0]
    presence_file = Path(args.sequence) / "presence.txt"
    present = None
    if presence_file.exists():
        present = [int(v) for v in presence_file.read_text().split()]
    lines = ["frame,x,y,w,h,score" + (",present" if present else "")]
    for i, frame in enumerate(seq.frames):
        box, score = reid_scan(model, qf, frame, query_box, config.reid)
        vals = [box[0] - box[2] / 2, box[1] - box[3] / 2, box[2], box[3], score]
        row = f"{i}," + ",".join(format(float(v), ".6f") for v in vals)
        lines.append(row + (f",{present[i]}" if present else ""))
    (args.out / "reid_scores.csv").write_text("\n".join(lines) + "\n")


def cmd_eval(args, config, seed):
    if args.mode == "ope" and args.results is None and not args.oracle and args.checkpoint is None:
        raise UsageError("eval --mode ope needs --results, --checkpoint or --oracle")
    if args.mode != "ope" and not args.oracle and args.checkpoint is None:
        raise UsageError(f"eval --mode {args.mode} re-runs the tracker: give --checkpoint or --oracle")
    rows, aucs, attrs = [], {}, {}
    pooled_pred, pooled_gt = [], []
    for path in _expand(args.sequence):
        seq = _load(path)
        gt = seq.groundtruth
        attrs[seq.name] = seq.attributes
        if args.mode == "ope" and args.results is not None:
            log_path = _require(args.results / f"{seq.name}.txt", "result log")
            idx, boxes, _ = read_result_log(log_path)
            if len(boxes) != len(gt):
                raise ValueError(f"{log_path}: {len(boxes)} boxes for {len(gt)} frames")
            run_pred = {"ope": boxes}
        else:
            run = run_robustness(_tracker_fn(args, config, gt), seq.frames, gt, args.mode)
            for note in run.notes:
                log.info("%s: %s", seq.name, note)
            if args.mode != "ope":
                for v in run.variants:
                    rows.append((seq.name, f"{args.mode}:{v.name}", v.success.summary, v.precision.summary))
                aucs[seq.name] = run.auc
                continue
            run_pred = {"ope": _tracker_fn(args, config, gt)(seq.frames, gt[0])}
        pred = run_pred["ope"]
        s, p = success_curve(pred, gt), precision_curve(pred, gt)
        s.to_csv(args.out / f"{seq.name}_success.csv")
        p.to_csv(args.out / f"{seq.name}_precision.csv")
        rows.append((seq.name, "ope", s.summary, p.summary))
        aucs[seq.name] = s.summary
        pooled_pred.append(pred)
        pooled_gt.append(gt)
    write_summary(args.out / "summary.csv", rows)
    write_attribute_report(args.out / "attributes.csv", attribute_report(aucs, attrs))
    if pooled_pred:
        pred, gt = np.concatenate(pooled_pred), np.concatenate(pooled_gt)
        s, p = success_curve(pred, gt), precision_curve(pred, gt)
        s.to_csv(args.out / "success.csv")
        p.to_csv(args.out / "precision.csv")
        plot_curves(args.out / "success.svg", {"SINT": s}, "Success plot")
        plot_curves(args.out / "precision.svg", {"SINT": p}, "Precision plot")
    mean_auc = float(np.mean(list(aucs.values())))
    mean_prec = float(np.mean([r[3] for r in rows]))
    print(f"{args.mode}: mean AUC {mean_auc:.4f}, mean Prec@20 {mean_prec:.4f} over {len(aucs)} sequences")


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "track": cmd_track,
            "reid": cmd_reid, "eval": cmd_eval}


def _run(argv):
    args = parse_args(argv)
    if args.command == "rerun":
        manifest = json.loads(_require(args.manifest, "manifest").read_text())
        return _run(manifest["argv"])
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s", stream=sys.stderr)
    seed = _resolve_seed(args.seed)
    config = cfgmod.RunConfig()
    if args.config is not None:
        config = cfgmod.load_config(_require(args.config, "config file"), config)
    config = cfgmod.with_seed(cfgmod.apply_overrides(config, args.overrides), seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    # the manifest records the resolved seed so a replay does not depend on the environment
    replay = list(argv) if args.seed is not None else ["--seed", str(seed)] + list(argv)
    _write_manifest(out, replay, args, seed, config)
    if args.threads is not None:
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        from threadpoolctl import threadpool_limits
        with threadpool_limits(limits=args.threads):
            COMMANDS[args.command](args, config, seed)
    else:
        COMMANDS[args.command](args, config, seed)
    return EXIT_OK


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        return _run(argv)
    except UsageError as exc:
        print(f"sint: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except cfgmod.ConfigError as exc:
        print(f"sint: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"sint: missing file: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except CheckpointError as exc:
        print(f"sint: corrupt checkpoint: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except Exception as exc:  # noqa: BLE001 - the CLI contract is a one-line diagnostic
        print(f"sint: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
