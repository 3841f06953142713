"""Command-line entry point: ``maskstream <subcommand> ...``.

Typical enhanced pipeline::

    maskstream datagen  --config recipes/maskctc.ini --out data
    maskstream pretrain --config recipes/maskctc.ini --data data/train --out runs/pre
    maskstream train    --config recipes/tt_chunk4.ini --data data/train --init runs/pre/model.ckpt --out runs/tt
    maskstream decode   --model runs/tt/model.ckpt --data data/test --out runs/tt/dec
    maskstream analyze  --decoded runs/tt/dec --data data/test --out runs/tt/ana
    maskstream report   --runs runs/tt/ana --out report

Without ``--init``, ``train`` gives the random-init baseline. Exit status is 0 on
success, 2 on usage/config errors and 1 on runtime failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from importlib import resources
from pathlib import Path

from .analysis import ResultRow, emit_report
from .checkpoint import Checkpoint
from .data import atomic_write_text, read_manifest, write_manifest
from .pipeline import (ConfigError, DecodeRecord, ExperimentConfig, decode, evaluate, make_datasets,
                       result_row, train_maskctc, train_streaming)

logger = logging.getLogger("maskstream")

CONFIG_NAME = "config.ini"


def recipe_path(name: str) -> Path:
    """Path of a shipped recipe (``name`` with or without ``.ini``)."""
    name = name if name.endswith(".ini") else name + ".ini"
    return Path(str(resources.files("maskstream") / "recipes" / name))


def _load_config(args, seed_key: str = "run.seed") -> ExperimentConfig:
    if args.config is None:
        cfg = ExperimentConfig()
    else:
        path = Path(args.config)
        if not path.exists() and recipe_path(args.config).exists():
            path = recipe_path(args.config)
        cfg = ExperimentConfig.load(path)
    cfg = cfg.with_overrides(args.set or [])
    if getattr(args, "seed", None) is not None:
        cfg[seed_key] = args.seed
    return cfg.validate()


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_config(out: Path, cfg: ExperimentConfig) -> None:
    atomic_write_text(out / CONFIG_NAME, cfg.to_ini())


def _write_json(path: Path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_jsonl(path: Path, rows) -> None:
    atomic_write_text(path, "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))


def _read_jsonl(path: Path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


# -- subcommands --------------------------------------------------------------

def cmd_datagen(args) -> None:
    cfg = _load_config(args, seed_key="data.seed")
    out = _out_dir(args)
    train, test = make_datasets(cfg)
    write_manifest(train, out / "train")
    write_manifest(test, out / "test")
    _write_config(out, cfg)
    logger.info("wrote %d train / %d test utterances to %s", len(train), len(test), out)


def _train(args, stage: int) -> None:
    cfg = _load_config(args)
    dataset = read_manifest(args.data)
    out = _out_dir(args)
    if stage == 1:
        ckpt = train_maskctc(cfg, dataset, verbose=args.verbose)
    else:
        init = Checkpoint.load(args.init) if args.init else None
        ckpt = train_streaming(cfg, dataset, init, verbose=args.verbose)
    ckpt.save(out / "model.ckpt")
    _write_config(out, cfg)
    _write_json(out / "history.json", ckpt.meta.get("loss_history", []))
    logger.info("saved %s", out / "model.ckpt")


def cmd_pretrain(args) -> None:
    _train(args, stage=1)


def cmd_train(args) -> None:
    _train(args, stage=2)


def cmd_decode(args) -> None:
    ckpt = Checkpoint.load(args.model)
    cfg = ExperimentConfig(ckpt.meta.get("experiment", {}))
    if args.beam is not None:
        cfg["decode.beam"] = args.beam
        params = dict(ckpt.meta["params"])
        params["beam"] = args.beam
        ckpt = Checkpoint(ckpt.params, {**ckpt.meta, "params": params})
    dataset = read_manifest(args.data)
    out = _out_dir(args)
    records = decode(ckpt, dataset)
    _write_jsonl(out / "hyps.jsonl", [r.to_json() for r in records])
    _write_json(out / "run.json", {"arch": cfg.arch, "policy": cfg["model.policy"], "seed": cfg.seed,
                                   "init": ckpt.meta.get("init", "random" if cfg.arch != "maskctc" else "none"),
                                   "checkpoint": str(args.model), "config_hash": ckpt.meta.get("config_hash")})
    _write_config(out, cfg)


def cmd_analyze(args) -> None:
    src = Path(args.decoded)
    records = [DecodeRecord.from_json(r) for r in _read_jsonl(src / "hyps.jsonl")]
    run = json.loads((src / "run.json").read_text())
    cfg = ExperimentConfig.load(src / CONFIG_NAME)
    reference = None
    if args.reference:
        reference = [DecodeRecord.from_json(r) for r in _read_jsonl(Path(args.reference) / "hyps.jsonl")]
    dataset = read_manifest(args.data)
    ev = evaluate(records, dataset, reference)
    row = result_row(cfg, run["init"], ev)
    out = _out_dir(args)
    _write_jsonl(out / "alignments.jsonl", ev.alignment_records)
    _write_json(out / "metrics.json", {**ev.summary(), "row": row.__dict__, "run": run})
    _write_config(out, cfg)
    logger.info("%s %s init=%s: TER %.2f%%, mean delay %.1f ms", row.model, row.policy, row.init,
                row.error_rate, row.mean_delay_ms)


def cmd_report(args) -> None:
    rows, delays, dump = [], {}, []
    for run_dir in map(Path, args.runs):
        metrics = json.loads((run_dir / "metrics.json").read_text())
        row = ResultRow(**metrics["row"])
        label = f"{row.model}/{row.policy}/{row.init}/seed{row.seed}"
        rows.append(row)
        delays[label + ":vs_reference"] = metrics["delay_vs_reference"]
        if "delay_vs_nonstreaming" in metrics:
            delays[label + ":vs_nonstreaming"] = metrics["delay_vs_nonstreaming"]
        dump.extend({"run": label, **rec} for rec in _read_jsonl(run_dir / "alignments.jsonl"))
    out = _out_dir(args)
    emit_report(rows, delays, out, dump, {"runs": [str(r) for r in args.runs]})


COMMANDS = {"datagen": cmd_datagen, "pretrain": cmd_pretrain, "train": cmd_train,
            "decode": cmd_decode, "analyze": cmd_analyze, "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="maskstream", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, help_text, config=True, seed=True):
        p = sub.add_parser(name, help=help_text)
        if config:
            p.add_argument("--config", help="INI config file or shipped recipe name")
            p.add_argument("--set", action="append", metavar="KEY=VALUE",
                           help="override a dotted config key (repeatable)")
        if seed:
            p.add_argument("--seed", type=int, help="override run.seed (data.seed for datagen)")
        p.add_argument("--out", required=True, help="output directory")
        return p

    add("datagen", "generate train/test manifests")
    p = add("pretrain", "stage 1: train the Mask-CTC model")
    p.add_argument("--data", required=True, help="training manifest (directory or manifest.jsonl)")
    p = add("train", "stage 2: train a streaming model")
    p.add_argument("--data", required=True, help="training manifest")
    p.add_argument("--init", help="stage-1 checkpoint; omit for random initialization")
    p = add("decode", "decode a manifest with a checkpoint", config=False, seed=False)
    p.add_argument("--model", required=True, help="checkpoint file")
    p.add_argument("--data", required=True, help="manifest to decode")
    p.add_argument("--beam", type=int, help="override the beam size stored in the checkpoint")
    p = add("analyze", "score a decode directory against reference alignments", config=False, seed=False)
    p.add_argument("--decoded", required=True, help="output directory of `decode`")
    p.add_argument("--data", required=True, help="reference manifest")
    p.add_argument("--reference", help="decode directory of a non-streaming run (relative delay)")
    p = add("report", "collect analyze directories into a results table", config=False, seed=False)
    p.add_argument("--runs", nargs="+", required=True, help="output directories of `analyze`")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"maskstream {args.command}: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 -- report any runtime failure as exit 1
        logger.debug("failure", exc_info=True)
        print(f"maskstream {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
