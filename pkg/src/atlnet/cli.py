"""Command-line entry point: ``atlnet {pretrain,transfer,classify,eval,synth}``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import yaml

from . import pipeline
from .active import OracleError
from .config import ConfigError, RunConfig, load_config, to_dict
from .data import DataFormatError, SplitError, load_cube, load_labels, save_cube, save_labels
from .network import ModelFormatError, load_model, save_model
from .numcore import RankError, ShapeError

log = logging.getLogger("atlnet")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _seed(text: str) -> int:
    try:
        value = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}")
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError(f"seed {value} is not an unsigned 64-bit integer")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="atlnet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        g = p.add_mutually_exclusive_group(required=config_required)
        g.add_argument("--config", type=Path, help="YAML or JSON run configuration")
        g.add_argument("--preset", help="packaged configuration, e.g. 'synthetic'")
        p.add_argument("--seed", type=_seed, help="override the root seed")
        p.add_argument("--out", type=Path, help="output directory (overrides out_dir)")

    p = sub.add_parser("pretrain", help="train the joint model on the source scene and run the query loop")
    common(p)
    p = sub.add_parser("transfer", help="adapt a source model to the target scene")
    common(p)
    p.add_argument("--model", type=Path, help="source model file")
    p.add_argument("--training", type=Path, help="source training-set file")
    p = sub.add_parser("classify", help="write a predicted label map for a cube")
    common(p)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--cube", type=Path, required=True)
    p = sub.add_parser("eval", help="OA / AA / kappa of a label map against a reference map")
    common(p, config_required=False)
    p.add_argument("--truth", type=Path, required=True)
    p.add_argument("--pred", type=Path, help="predicted label map (otherwise --model and --cube)")
    p.add_argument("--model", type=Path)
    p.add_argument("--cube", type=Path)
    p = sub.add_parser("synth", help="write the synthetic source and target scenes as cube/label files")
    common(p)
    return parser


def resolve_config(args) -> RunConfig:
    if args.config is not None:
        cfg = load_config(args.config)
    elif args.preset is not None:
        cfg = pipeline.load_preset(args.preset)
    else:
        cfg = RunConfig()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = dataclasses.replace(cfg, out_dir=str(args.out))
    return cfg


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_config(out: Path, cfg: RunConfig) -> None:
    doc = to_dict(cfg)
    doc.pop("out_dir")
    pipeline.write_text(out / "run_config.yaml", yaml.safe_dump(doc, sort_keys=True))


def cmd_pretrain(args, cfg: RunConfig) -> None:
    res = pipeline.run_pretrain(cfg)
    out = _out_dir(cfg)
    save_model(out / pipeline.MODEL_FILE, res.model)
    pipeline.save_training(out / pipeline.TRAINING_FILE, res.training)
    pipeline.write_history(out / pipeline.HISTORY_FILE, res.history)
    _write_config(out, cfg)
    last = res.history[-1]
    print(f"pretrain: {len(res.history) - 1} query rounds, {last['labeled_count']} labeled, "
          f"OA {last['oa']:.4f} AA {last['aa']:.4f} kappa {last['kappa']:.4f}")


def cmd_transfer(args, cfg: RunConfig) -> None:
    out = Path(cfg.out_dir)
    model_path = args.model or cfg.transfer.source_model or out / pipeline.MODEL_FILE
    training_path = args.training or cfg.transfer.source_training or out / pipeline.TRAINING_FILE
    model = load_model(model_path)
    if not hasattr(model, "fusion"):
        raise ModelFormatError(f"{model_path} holds a single network, transfer needs a joint model")
    training = pipeline.load_training(training_path)
    res = pipeline.run_transfer(cfg, model, training)
    out = _out_dir(cfg)
    save_model(out / pipeline.TRANSFERRED_FILE, res.model)
    pipeline.write_text(out / pipeline.REPORT_FILE, res.report.csv())
    _write_config(out, cfg)
    for w in res.report.warnings:
        print(f"warning: {w}", file=sys.stderr)
    first, last = res.report.rows[0], res.report.rows[-1]
    print(f"transfer: {res.report.iterations} iterations (stopped by {res.report.stopped_by}), "
          f"target OA {first['oa']:.4f} -> {last['oa']:.4f}")


def cmd_classify(args, cfg: RunConfig) -> None:
    model = load_model(args.model)
    cube = load_cube(args.cube)
    labels = pipeline.classify_cube(model, cube, cfg)
    out = _out_dir(cfg)
    save_labels(out / "classification.hlbl", labels)
    print(f"classify: wrote {cube.height}x{cube.width} label map to {out / 'classification.hlbl'}")


def cmd_eval(args, cfg: RunConfig) -> None:
    truth = load_labels(args.truth)
    if args.pred is not None:
        pred = load_labels(args.pred)
    elif args.model is not None and args.cube is not None:
        pred = pipeline.classify_cube(load_model(args.model), load_cube(args.cube), cfg)
    else:
        raise ConfigError("eval needs --pred, or both --model and --cube")
    m = pipeline.label_map_metrics(pred, truth)
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        pipeline.write_text(args.out / "metrics.csv", pipeline.metrics_csv(m))
    print(f"OA {m.oa:.6f} AA {m.aa:.6f} kappa {m.kappa:.6f}")


def cmd_synth(args, cfg: RunConfig) -> None:
    out = _out_dir(cfg)
    src, tgt = pipeline.synthetic_scenes(cfg)
    for name, scene in (("source", src), ("target", tgt)):
        save_cube(out / f"{name}.hcub", scene.cube)
        save_labels(out / f"{name}.hlbl", scene.labels)
    print(f"synth: wrote source/target cubes and labels to {out}")


COMMANDS = {"pretrain": cmd_pretrain, "transfer": cmd_transfer, "classify": cmd_classify, "eval": cmd_eval,
            "synth": cmd_synth}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FloatingPointError, RankError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FileNotFoundError as exc:
        what = f"file not found: {exc.filename}" if exc.filename else str(exc)
        print(f"data error: {what}", file=sys.stderr)
        return EXIT_DATA
    except (DataFormatError, SplitError, ModelFormatError, OracleError, ShapeError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
