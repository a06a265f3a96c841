"""Command-line entry point: ``vdd-daod {gen-data,train,eval,viz-features}``.

Every command writes ``config.json`` (the effective configuration) and
``run_info.json`` (git-style blob hashes of its inputs) into ``--out``.
Failures print a single JSON error line on stderr and exit nonzero.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Optional

from . import __version__
from .config import ConfigError, RunConfig
from .evaluation import Detection, evaluate_corpus, evaluate_detections, load_ground_truth
from .synth import build_corpus, load_manifest, read_jsonl

ABLATIONS = {
    "one-step": "one_step=true",
    "no-ortho": "use_ortho=false",
    "grl": "grl_enabled=false",
    "eq6-literal": "eq6_literal=true",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def blob_sha1(path) -> str:
    """Hash of a file as ``git hash-object`` computes it."""
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON config file")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("--seed", type=int, help="shorthand for --set seed=N")
    common.add_argument("--out", type=Path, required=True, help="output directory")

    parser = _Parser(prog="vdd-daod", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("gen-data", parents=[common], help="render the synthetic corpus into --out")

    p = sub.add_parser("train", parents=[common], help="train a detector")
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--ablation", action="append", default=[], choices=sorted(ABLATIONS))
    p.add_argument("--resume", type=Path, help="checkpoint to continue from")

    p = sub.add_parser("eval", parents=[common], help="score a checkpoint or a detections dump")
    p.add_argument("--corpus", type=Path, required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint", type=Path)
    src.add_argument("--detections", type=Path, help="JSON-lines {file, class, box, score}")
    p.add_argument("--split", action="append", default=[], help="split to score (default: every scorable split)")

    p = sub.add_parser("viz-features", parents=[common], help="dump F_b / F_di / F_ds maps and detections")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--image", type=Path, required=True)
    return parser


def _require(path: Optional[Path], what: str) -> None:
    if path is not None and not path.exists():
        raise FileNotFoundError(f"{what} not found: {path}")


def resolve_config(args) -> RunConfig:
    _require(args.config, "config file")
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    overrides += [ABLATIONS[a] for a in getattr(args, "ablation", [])]
    return RunConfig.load(args.config, overrides).validate()


def _write_run_files(out: Path, cfg: RunConfig, args, inputs: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    echo = cfg.to_dict()
    echo["ablations"] = sorted(getattr(args, "ablation", []))
    (out / "config.json").write_text(json.dumps(echo, indent=1, sort_keys=True) + "\n")
    info = {
        "command": args.command,
        "config_hash": cfg.config_hash(),
        "inputs": {k: {"path": str(p), "blob_sha1": blob_sha1(p)} for k, p in sorted(inputs.items()) if p},
        "version": __version__,
    }
    (out / "run_info.json").write_text(json.dumps(info, indent=1, sort_keys=True) + "\n")


def _scorable_splits(corpus: Path) -> list[str]:
    splits = load_manifest(corpus)["splits"]
    return [name for name, e in splits.items() if e["oracle"] or e["domain"] == 0]


def cmd_gen_data(args, cfg: RunConfig) -> dict:
    _write_run_files(args.out, cfg, args, {"config": args.config})
    manifest = build_corpus(cfg.corpus_config(), args.out)
    return {"manifest": str(args.out / "manifest.json"), "files": len(manifest["files"])}


def cmd_train(args, cfg: RunConfig) -> dict:
    from .trainer import train

    _require(args.corpus / "manifest.json", "corpus manifest")
    _require(args.resume, "resume checkpoint")
    _write_run_files(args.out, cfg, args, {"config": args.config, "corpus_manifest": args.corpus / "manifest.json",
                                           "resume": args.resume})
    final = train(cfg, args.corpus, args.out, resume=args.resume)
    return {"checkpoint": str(final)}


def cmd_eval(args, cfg: RunConfig) -> dict:
    _require(args.corpus / "manifest.json", "corpus manifest")
    _require(args.checkpoint, "checkpoint")
    _require(args.detections, "detections file")
    _write_run_files(args.out, cfg, args, {"corpus_manifest": args.corpus / "manifest.json",
                                           "checkpoint": args.checkpoint, "detections": args.detections,
                                           "config": args.config})
    splits = args.split or _scorable_splits(args.corpus)
    results = {}
    for split in splits:
        if args.checkpoint is not None:
            table = evaluate_corpus(args.checkpoint, args.corpus, split, cfg.score_thresh, cfg.eval_nms, args.out)
        else:
            gt = load_ground_truth(args.corpus, split)
            dets = [Detection(r["file"], r["class"], r["box"], r["score"]) for r in read_jsonl(args.detections)
                    if r["file"] in gt]
            table = evaluate_detections(dets, gt)
            (args.out / f"eval_{split}.json").write_text(table.to_json() + "\n")
            (args.out / f"eval_{split}.txt").write_text(table.to_text("detections"))
        results[split] = table.mAP
    return {"mAP": results}


def cmd_viz(args, cfg: RunConfig) -> dict:
    from .trainer import model_from_checkpoint
    from .viz import visualize

    _require(args.checkpoint, "checkpoint")
    _require(args.image, "image")
    _write_run_files(args.out, cfg, args, {"checkpoint": args.checkpoint, "image": args.image,
                                           "config": args.config})
    return visualize(model_from_checkpoint(args.checkpoint), args.image, args.out)


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "viz-features": cmd_viz}


def _fail(kind: str, exc: BaseException, command: Optional[str], code: int) -> int:
    record = {"status": "error", "error": kind, "message": str(exc), "command": command}
    print(json.dumps(record, sort_keys=True), file=sys.stderr)
    return code


def run(argv: Optional[list[str]] = None) -> int:
    command = None
    try:
        args = build_parser().parse_args(argv)
        command = args.command
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = resolve_config(args)
        result = COMMANDS[command](args, cfg)
    except UsageError as exc:
        return _fail("usage", exc, command, 2)
    except ConfigError as exc:
        return _fail("config", exc, command, 2)
    except FileNotFoundError as exc:
        return _fail("missing_file", exc, command, 3)
    except (ValueError, KeyError, OSError, RuntimeError) as exc:
        return _fail(type(exc).__name__, exc, command, 1)
    print(json.dumps({"status": "ok", "command": command, **result}, sort_keys=True))
    return 0


def main() -> None:
    sys.exit(run())
