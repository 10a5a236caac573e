"""Command-line entry point: ``dimnet {train,eval,gradcheck,synth,sweep}``."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import datetime as _dt
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor

from .checkpoint import CheckpointError, load_checkpoint, restore_train_state, save_checkpoint
from .config import ConfigError, TrainConfig, read_config_file, resolve_config
from .data import DataError, TkgDataset, gen_synthetic_tkg, load_dataset, write_dataset
from .evaluation import evaluate_split
from .gradcheck import full_model_gradcheck
from .params import Ablation
from .training import fit, new_train_state

log = logging.getLogger("dimnet")

SYNTH_DEFAULTS = dict(num_entities=20, num_relations=2, period=2, T=200, seed=1)


class UsageError(Exception):
    pass


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


class RunManifest:
    """JSON record of one command, written before any other output."""

    def __init__(self, path: str, command: str, argv: list[str], config: TrainConfig | None,
                 fingerprint: str, seed: int | None, outputs: dict[str, str]):
        self.path = path
        self.doc = {
            "command": command,
            "argv": argv,
            "config": config.to_items() if config else None,
            "dataset_fingerprint": fingerprint,
            "seed": seed,
            "started": _now(),
            "finished": None,
            "outputs": outputs,
        }
        self._write()

    def _write(self) -> None:
        os.makedirs(os.path.dirname(os.path.abspath(self.path)), exist_ok=True)
        with open(self.path, "w", encoding="utf-8") as fh:
            json.dump(self.doc, fh, indent=2, sort_keys=True)
            fh.write("\n")

    def finish(self, **extra) -> None:
        self.doc["finished"] = _now()
        self.doc.update(extra)
        self._write()


def load_data(spec: str) -> TkgDataset:
    """``synth`` selects the built-in periodic dataset; anything else is a directory."""
    if spec == "synth":
        return gen_synthetic_tkg(**SYNTH_DEFAULTS)
    if not os.path.isdir(spec):
        raise DataError(f"dataset directory not found: {spec}")
    return load_dataset(spec)


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="dataset directory, or 'synth'")
    p.add_argument("--preset", help="icews14 | icews05-15 | icews18 | gdelt | synth")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--d", type=int)
    p.add_argument("--m", type=int)
    p.add_argument("--layers", "--omega", dest="layers", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--lr", dest="learning_rate", type=float)
    p.add_argument("--epochs", dest="max_epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--ablate", action="append", default=[],
                   choices=["multi-span", "disentangle", "virtual-graph", "g-inf"])
    p.add_argument("--no-virtual-graph", action="store_true", help="same as --ablate virtual-graph")


def build_config(args) -> TrainConfig:
    preset = args.preset or ("synth" if args.data == "synth" else None)
    file_values = read_config_file(args.config) if args.config else {}
    overrides = {k: getattr(args, k, None) for k in
                 ("d", "m", "layers", "heads", "k", "learning_rate", "max_epochs", "seed", "patience")}
    ablate = list(args.ablate) + (["virtual-graph"] if args.no_virtual_graph else [])
    if ablate:
        overrides.update(dataclasses.asdict(Ablation.from_names(ablate)))
    overrides["dataset"] = args.data
    return resolve_config(preset, file_values, overrides)


def cmd_train(args) -> int:
    config = build_config(args)
    dataset = load_data(args.data)
    os.makedirs(args.out, exist_ok=True)
    ckpt_path = os.path.join(args.out, "checkpoint.bin")
    log_path = os.path.join(args.out, "train_log.jsonl")
    config.checkpoint = ckpt_path
    manifest = RunManifest(os.path.join(args.out, "manifest.json"), "train", args.argv, config,
                           dataset.fingerprint, config.seed, {"checkpoint": ckpt_path, "log": log_path})
    if args.dry_run:
        manifest.finish(epochs_completed=0, dry_run=True)
        return 0
    if args.resume:
        state = restore_train_state(load_checkpoint(args.resume), config)
        mode = "a"
    else:
        state = new_train_state(config, dataset)
        mode = "w"
    with open(log_path, mode, encoding="utf-8") as fh:
        def on_epoch(st, record):
            fh.write(json.dumps(record, sort_keys=True) + "\n")
            fh.flush()
            save_checkpoint(ckpt_path, st, config)

        if not args.resume:
            save_checkpoint(ckpt_path, state, config)
        fit(state, dataset, config, on_epoch=on_epoch)
    manifest.finish(epochs_completed=state.epoch)
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    config = ckpt.config
    dataset = load_data(args.data)
    if (int(ckpt.metadata["num_entities"]), int(ckpt.metadata["num_raw_relations"])) != (
        dataset.num_entities, dataset.num_raw_relations):
        raise CheckpointError("num_entities/num_raw_relations: checkpoint does not match the dataset")
    if args.no_virtual_graph:
        config.virtual_graph = False
    state = restore_train_state(ckpt, config)
    out = args.out or f"metrics_{args.split}.json"
    outputs = {"metrics": out}
    if args.csv:
        outputs["csv"] = args.csv
    manifest = RunManifest(args.manifest or os.path.splitext(out)[0] + ".manifest.json", "eval",
                           args.argv, config, dataset.fingerprint, config.seed, outputs)
    report = evaluate_split(state.model, dataset, args.split, config.m, config.k, config.ablation,
                            time_aware=not args.static_filter)
    report.write_json(out)
    if args.csv:
        report.write_csv(args.csv)
    print(f"{args.split}: MRR {report.mrr:.4f}  " +
          "  ".join(f"H@{k} {v:.4f}" for k, v in report.hits.items()) + f"  ({report.num_queries} queries)")
    manifest.finish()
    return 0


def cmd_gradcheck(args) -> int:
    manifest = RunManifest(args.manifest, "gradcheck", args.argv, None, "", args.seed, {})
    report = full_model_gradcheck(eps=args.eps, tolerance=args.tol, seed=args.seed)
    for comp, err in sorted(report.per_component.items()):
        flag = "ok" if err < args.tol else "FAIL"
        print(f"{comp:12s} max rel. error {err:.3e}  {flag}")
    print(f"overall      max rel. error {report.max_error:.3e}  ({report.seconds:.1f}s)")
    manifest.finish(per_component=report.per_component, passed=report.ok)
    if not report.ok:
        print("gradient check failed: " + ", ".join(report.failing), file=sys.stderr)
        return 1
    return 0


def cmd_synth(args) -> int:
    if args.period < 1:
        raise UsageError("--period must be >= 1")
    if args.timesteps < 3 * args.period:
        raise UsageError("--timesteps must be at least 3 * --period")
    ds = gen_synthetic_tkg(args.entities, args.relations, args.period, args.timesteps, args.seed)
    os.makedirs(args.out, exist_ok=True)
    manifest = RunManifest(args.out.rstrip("/\\") + ".manifest.json", "synth", args.argv, None,
                           ds.fingerprint, args.seed, {"dataset": args.out})
    write_dataset(ds, args.out)
    manifest.finish()
    print(f"wrote {args.out}: {ds.num_entities} entities, {ds.num_raw_relations} relations, "
          f"{ds.num_timestamps} timestamps")
    return 0


SWEEP_PARAMS = {"m": "m", "omega": "layers", "layers": "layers", "k": "k"}


def _sweep_point(config: TrainConfig, data: str, param: str, value: int) -> dict:
    dataset = load_data(data)
    point = dataclasses.replace(config, **{SWEEP_PARAMS[param]: value}).validate()
    state = new_train_state(point, dataset)
    fit(state, dataset, point, validate=False)
    report = evaluate_split(state.model, dataset, "test", point.m, point.k, point.ablation)
    return {"param": param, "value": value, "mrr": report.mrr,
            "hits1": report.hits[1], "hits3": report.hits[3], "hits10": report.hits[10]}


def cmd_sweep(args) -> int:
    try:
        values = [int(v) for v in args.values.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"--values must be comma-separated integers, got {args.values!r}") from None
    if not values:
        raise UsageError("empty sweep grid")
    config = build_config(args)
    if args.param == "k" and not config.virtual_graph:
        raise UsageError("sweeping k is meaningless without the virtual graph")
    dataset = load_data(args.data)
    manifest = RunManifest(os.path.splitext(args.out)[0] + ".manifest.json", "sweep", args.argv,
                           config, dataset.fingerprint, config.seed, {"csv": args.out})
    jobs = [(config, args.data, args.param, v) for v in values]
    if args.workers > 1:
        with ProcessPoolExecutor(args.workers) as pool:
            rows = list(pool.map(_sweep_point, *zip(*jobs)))
    else:
        rows = [_sweep_point(*job) for job in jobs]
    with open(args.out, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["param", "value", "mrr", "hits1", "hits3", "hits10"])
        writer.writeheader()
        writer.writerows(rows)
    manifest.finish()
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dimnet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model, checkpointing every epoch")
    _add_model_flags(p)
    p.add_argument("--out", default="run", help="output directory")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--dry-run", action="store_true", help="write the manifest with the resolved config and stop")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint with time-aware filtered metrics")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=["train", "valid", "test"], default="test")
    p.add_argument("--out", help="metrics JSON path")
    p.add_argument("--csv", help="optional per-timestamp CSV")
    p.add_argument("--manifest")
    p.add_argument("--no-virtual-graph", action="store_true")
    p.add_argument("--static-filter", action="store_true",
                   help="filter true facts of every timestamp (comparison only)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full objective")
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--manifest", default="gradcheck_manifest.json")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth", help="write a synthetic periodic dataset")
    p.add_argument("--entities", type=int, default=20)
    p.add_argument("--relations", type=int, default=2)
    p.add_argument("--period", type=int, default=2)
    p.add_argument("--timesteps", type=int, default=200)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("sweep", help="train+evaluate over a grid of m, omega or k")
    _add_model_flags(p)
    p.add_argument("--param", required=True, choices=sorted(SWEEP_PARAMS))
    p.add_argument("--values", required=True, help="comma-separated integers")
    p.add_argument("--out", default="sweep.csv")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=os.environ.get("DIMNET_LOG_LEVEL", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    args.argv = list(sys.argv[1:] if argv is None else argv)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        parser.error(str(exc))  # exits 2
    except (DataError, CheckpointError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
