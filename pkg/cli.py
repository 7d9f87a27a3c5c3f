"""
Command-line entry point: dataset generation, training, evaluation,
ablations, subgoal analysis and expert replay.

Configuration precedence is defaults < ``--config`` JSON file < flags; every
command writes its resolved configuration as ``config.json`` next to its
outputs.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from tabulate import tabulate

from models.config import RunConfig, WorldConfig
from models.results import MetricsReport
from storage.dataset_store import DatasetStore
from storage.paths import get_data_root, get_runs_root

logger = logging.getLogger("factored_agent.cli")

COMMANDS = ("gen-data", "train", "eval", "ablate", "subgoal-eval", "replay-expert")
LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
CHECKPOINT_FILE = "model.ckpt"


class UsageError(Exception):
    """Bad arguments or missing input paths; exit code 2."""


# ------------------------------------------------------------------- config
def _deep_merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def _set(target: Dict[str, Any], dotted: str, value: Any) -> None:
    *parents, leaf = dotted.split(".")
    for part in parents:
        target = target.setdefault(part, {})
    target[leaf] = value


# Flag destination -> dotted RunConfig field. Flags left at None do not override.
_FLAG_FIELDS = {
    "data": "data_dir",
    "out": "out_dir",
    "checkpoint": "checkpoint",
    "jobs": "jobs",
    "limit": "limit",
    "table": "table",
    "train_episodes": "dataset.train_episodes",
    "seen_episodes": "dataset.valid_seen_episodes",
    "unseen_episodes": "dataset.valid_unseen_episodes",
    "epochs": "train.epochs",
    "batch_size": "train.batch_size",
    "learning_rate": "train.learning_rate",
    "factorized": "model.factorized",
    "ocl": "model.ocl",
    "dynamic_filters": "model.dynamic_filters",
    "augmentation": "model.augmentation",
    "evasion": "model.evasion",
    "instance_association": "model.instance_association",
    "input_ablation": "model.input_ablation",
    "max_steps": "limits.max_steps",
}


def resolve_config(args: argparse.Namespace) -> RunConfig:
    merged: Dict[str, Any] = {"command": args.command}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise UsageError(f"config file not found: {path}")
        try:
            merged = _deep_merge(json.loads(path.read_text()), merged)
        except json.JSONDecodeError as e:
            raise UsageError(f"config file {path} is not valid JSON: {e}")

    flags: Dict[str, Any] = {}
    for dest, field in _FLAG_FIELDS.items():
        value = getattr(args, dest, None)
        if value is not None:
            _set(flags, field, value)
    if getattr(args, "seed", None) is not None:
        # gen-data seeds the dataset, every other command seeds the model.
        if args.command == "gen-data":
            _set(flags, "master_seed", args.seed)
            _set(flags, "dataset.master_seed", args.seed)
        else:
            _set(flags, "model.seed", args.seed)
    if getattr(args, "stream_inputs", None):
        ipm, _, apm = args.stream_inputs.partition(",")
        _set(flags, "model.stream_inputs", {"ipm": ipm, "apm": apm})
    if getattr(args, "splits", None):
        flags["splits"] = [s for s in args.splits.split(",") if s]
    if getattr(args, "rows", None):
        flags["rows"] = [r for r in args.rows.split(",") if r]
    if getattr(args, "seeds", None):
        flags["seeds"] = [int(s) for s in args.seeds.split(",") if s]
    return RunConfig.model_validate(_deep_merge(merged, flags))


# ------------------------------------------------------------------ parsing
def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=str, help="JSON config file; flags override its values")
    parser.add_argument("--seed", type=int, help="Master seed (gen-data) or model seed (other commands)")
    parser.add_argument("--out", type=str, help="Output directory")
    parser.add_argument("--table", action="store_true", default=None, help="Print text tables")
    parser.add_argument("-v", "--verbose", action="store_true", help="Debug logging")


def _add_data(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--data", type=str, help="Dataset directory (default: $FACTORED_AGENT_DATA_ROOT)")


def _add_model_flags(parser: argparse.ArgumentParser) -> None:
    for name, help_text in [
        ("factorized", "two-stream factorization"),
        ("ocl", "object-centric localisation"),
        ("dynamic-filters", "language-conditioned dynamic filters"),
        ("augmentation", "color-swap/jitter augmentation"),
    ]:
        parser.add_argument(f"--no-{name}", dest=name.replace("-", "_"), action="store_false", default=None,
                            help=f"Disable {help_text}")
    parser.add_argument("--stream-inputs", type=str, help="Language inputs as IPM,APM, e.g. G,I or G+I,G+I")
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--batch-size", type=int)
    parser.add_argument("--learning-rate", type=float)


def _add_inference_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--no-evasion", dest="evasion", action="store_false", default=None,
                        help="Disable obstruction evasion")
    parser.add_argument("--no-instance-association", dest="instance_association", action="store_false",
                        default=None, help="Pick a random visible instance instead of associating")
    parser.add_argument("--input-ablation", type=str,
                        choices=["none", "no_language", "no_vision", "goal_only", "instructions_only"])
    parser.add_argument("--max-steps", type=int, help="Rollout step limit")
    parser.add_argument("--splits", type=str, help="Comma-separated splits (default: valid_seen,valid_unseen)")
    parser.add_argument("--limit", type=int, help="Evaluate at most this many episodes per split")
    parser.add_argument("--jobs", type=int, help="Worker processes for rollouts")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="factored-agent", description="Factorized instruction-following agent")
    subparsers = parser.add_subparsers(dest="command", help="Command to execute")

    gen = subparsers.add_parser("gen-data", help="Generate the synthetic benchmark")
    _add_common(gen)
    gen.add_argument("--jobs", type=int, help="Worker processes for episode generation")
    gen.add_argument("--train-episodes", type=int)
    gen.add_argument("--seen-episodes", type=int)
    gen.add_argument("--unseen-episodes", type=int)

    train_parser = subparsers.add_parser("train", help="Train one model variant")
    _add_common(train_parser)
    _add_data(train_parser)
    _add_model_flags(train_parser)

    eval_parser = subparsers.add_parser("eval", help="Roll out a checkpoint and report success metrics")
    _add_common(eval_parser)
    _add_data(eval_parser)
    eval_parser.add_argument("--checkpoint", type=str, required=True)
    _add_inference_flags(eval_parser)

    ablate = subparsers.add_parser("ablate", help="Train and evaluate ablation rows")
    _add_common(ablate)
    _add_data(ablate)
    _add_model_flags(ablate)
    ablate.add_argument("--rows", type=str, help="Comma-separated row labels (default: all)")
    ablate.add_argument("--seeds", type=str, help="Comma-separated training seeds (default: 0,1,2)")
    ablate.add_argument("--jobs", type=int)
    ablate.add_argument("--splits", type=str)
    ablate.add_argument("--max-steps", type=int)

    subgoal = subparsers.add_parser("subgoal-eval", help="Per-subgoal success with expert prefixes")
    _add_common(subgoal)
    _add_data(subgoal)
    subgoal.add_argument("--checkpoint", type=str, required=True)
    _add_inference_flags(subgoal)

    replay = subparsers.add_parser("replay-expert", help="Replay every demonstration and check it solves its task")
    _add_common(replay)
    _add_data(replay)
    replay.add_argument("--splits", type=str)
    return parser


# ----------------------------------------------------------------- commands
def _configure_logging(verbose: bool) -> None:
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO, format=LOG_FORMAT, force=True)


def _attach_run_log(run_dir: Path) -> logging.Handler:
    handler = logging.FileHandler(run_dir / "run.log", encoding="utf-8")
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    logging.getLogger().addHandler(handler)
    return handler


def _out_dir(config: RunConfig, default: Path) -> Path:
    return Path(config.out_dir) if config.out_dir else default


def _open_store(config: RunConfig) -> DatasetStore:
    store = DatasetStore(config.data_dir or get_data_root())
    if not store.exists():
        raise UsageError(f"no dataset manifest under {store.root}; run gen-data first")
    return store


def _checkpoint(config: RunConfig) -> Path:
    path = Path(config.checkpoint)
    if path.is_dir():
        path = path / CHECKPOINT_FILE
    if not path.exists():
        raise UsageError(f"checkpoint not found: {path}")
    return path


def _inference_overrides(config: RunConfig) -> Dict[str, Any]:
    model = config.model
    return {
        "evasion": model.evasion,
        "instance_association": model.instance_association,
        "input_ablation": model.input_ablation,
    }


def cmd_gen_data(config: RunConfig, out: Path) -> int:
    from services.expert import build_dataset

    manifest = build_dataset(config.dataset, out, jobs=config.jobs)
    store = DatasetStore(out)
    rows = [[split, len(records)] for split, records in manifest.splits.items()]
    print(tabulate(rows, headers=["Split", "Episodes"], tablefmt="pretty"))
    print(f"Manifest hash: {store.manifest_hash()}")
    return 0


def cmd_train(config: RunConfig, out: Path) -> int:
    from services.expert import load_vocabulary
    from services.training import save_model, train

    store = _open_store(config)
    world = WorldConfig.model_validate(store.load_manifest().config["generator"]["world"])
    vocab = load_vocabulary(store)
    trajectories = store.load_split("train")
    valid = store.load_split("valid_seen", limit=config.limit) if config.limit else None
    result = train(trajectories, config.model, config.train, vocab, world, run_dir=out, valid=valid)
    save_model(out / CHECKPOINT_FILE, result.model, vocab, result.steps)
    last = result.metrics[-1]
    print(tabulate([[last["epoch"], f"{last['loss']:.4f}", f"{last['action_acc']:.3f}", f"{last['class_acc']:.3f}"]],
                   headers=["Epoch", "Loss", "Action acc", "Class acc"], tablefmt="pretty"))
    print(f"Checkpoint: {out / CHECKPOINT_FILE}")
    return 0


def cmd_eval(config: RunConfig, out: Path) -> int:
    from services.evaluation import evaluate_checkpoint, format_metrics_table, format_task_type_table, write_report

    store = _open_store(config)
    report, _ = evaluate_checkpoint(_checkpoint(config), store, config.splits, config.limits,
                                    _inference_overrides(config), config.jobs, log_dir=out / "logs",
                                    limit=config.limit)
    write_report(out, report)
    print(format_metrics_table(report))
    if config.table:
        print(format_task_type_table(report))
    return 0


def cmd_ablate(config: RunConfig, out: Path) -> int:
    from services.evaluation import ABLATION_ROWS, ablation_grid, format_ablation_table, resolve_rows, write_grid

    store = _open_store(config)
    try:
        rows = resolve_rows(config.rows or list(ABLATION_ROWS))
    except ValueError as e:
        raise UsageError(str(e))
    grid = ablation_grid(store, rows, config.model, config.train, config.limits, out,
                         seeds=config.seeds, splits=config.splits, jobs=config.jobs)
    write_grid(out, grid, config.splits)
    if config.table:
        print(format_ablation_table(grid, config.splits))
    else:
        print(tabulate([[row.label, row.status, row.description] for row in grid],
                       headers=["Row", "Status", "Setting"], tablefmt="pretty"))
    return 0 if all(row.status == "ok" for row in grid) else 1


def cmd_subgoal_eval(config: RunConfig, out: Path) -> int:
    from agent.policy import AgentPolicy
    from services.evaluation import format_subgoal_table, subgoal_eval
    from services.gridworld import GridWorld
    from services.training import load_model

    store = _open_store(config)
    model, vocab = load_model(_checkpoint(config), _inference_overrides(config))
    world = GridWorld(model.world)
    policy = AgentPolicy(model, world, vocab)
    subgoals = {
        split: subgoal_eval(policy, world, store.load_split(split, with_observations=False, limit=config.limit),
                            config.limits)
        for split in config.splits
    }
    report = MetricsReport(splits={}, subgoals=subgoals)
    out.mkdir(parents=True, exist_ok=True)
    (out / "subgoals.json").write_text(report.model_dump_json(indent=2))
    print(format_subgoal_table(subgoals))
    return 0


def cmd_replay_expert(config: RunConfig, out: Path) -> int:
    from services.evaluation import replay_expert
    from services.expert import DATASET_SPLITS
    from services.gridworld import GridWorld

    store = _open_store(config)
    world = GridWorld(WorldConfig.model_validate(store.load_manifest().config["generator"]["world"]))
    splits = config.splits if "splits" in config.model_fields_set else [name for name, _ in DATASET_SPLITS]
    report = replay_expert(store, world, splits)
    out.mkdir(parents=True, exist_ok=True)
    (out / "expert_report.json").write_text(json.dumps(report, indent=2))
    rows = [[split, s["episodes"], f"{s['task_sr']:.3f}", s["blocked"], s["api_fail"]]
            for split, s in report["splits"].items()]
    rows.append(["all", report["episodes"], f"{report['task_sr']:.3f}", report["blocked"], report["api_fail"]])
    print(tabulate(rows, headers=["Split", "Episodes", "Task SR", "Blocked", "API fail"], tablefmt="pretty"))
    if report["task_sr"] < 1.0 or report["blocked"] or report["api_fail"]:
        print("Error: expert demonstrations do not replay cleanly", file=sys.stderr)
        return 1
    return 0


_HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "subgoal-eval": cmd_subgoal_eval,
    "replay-expert": cmd_replay_expert,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else 2
    if args.command not in _HANDLERS:
        parser.print_help()
        return 2

    _configure_logging(args.verbose)
    handler: Optional[logging.Handler] = None
    try:
        config = resolve_config(args)
        default_out = get_data_root() if args.command == "gen-data" else get_runs_root() / args.command
        out = _out_dir(config, default_out)
        out.mkdir(parents=True, exist_ok=True)
        handler = _attach_run_log(out)
        (out / "config.json").write_text(config.model_dump_json(indent=2))
        logger.info(f"Running {args.command} into {out}")
        return _HANDLERS[args.command](config, out)
    except UsageError as e:
        print(f"Error: {e}", file=sys.stderr)
        return 2
    except (ValueError, RuntimeError, OSError) as e:
        logger.debug("Command failed", exc_info=True)
        print(f"Error: {e}", file=sys.stderr)
        return 1
    finally:
        if handler is not None:
            logging.getLogger().removeHandler(handler)
            handler.close()


if __name__ == "__main__":
    sys.exit(main())
