"""
Rollouts and the metric suite: task and goal-condition success, their
path-length-weighted variants, the per-task-type and per-subgoal tables,
expert replay and the ablation grid.
"""

import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from tabulate import tabulate

from agent.policy import AgentPolicy, Policy
from models.config import ModelConfig, RolloutLimits, StreamInputs, TrainConfig, WorldConfig
from models.dataset import SUBGOAL_KINDS, Subgoal, SubgoalKind, Trajectory
from models.results import AblationRow, EpisodeResult, MetricsReport, SplitMetrics, SubgoalRow
from models.world import Action, ActionTag, EpisodeState, StepEvent, TaskType
from services.expert import Vocabulary, load_vocabulary
from services.gridworld import GridWorld
from services.training import load_model, save_model, train
from storage.arrays import rle_encode
from storage.dataset_store import DatasetStore
from storage.episode_log import write_episode_log

logger = logging.getLogger("factored_agent.evaluation")

EVAL_SPLITS = ("valid_seen", "valid_unseen")
METRIC_NAMES = ("task_sr", "goal_cond_sr", "plw_task_sr", "plw_goal_cond_sr")


def plw(score: float, expert_length: int, agent_length: int) -> float:
    """score * L* / max(L*, L_hat)."""
    if expert_length <= 0 or agent_length <= 0:
        raise ValueError(f"path lengths must be positive, got L*={expert_length}, L_hat={agent_length}")
    return float(score) * expert_length / max(expert_length, agent_length)


# ----------------------------------------------------------------- policies
class ExpertReplay:
    """Pseudo-policy that replays the demonstration; masks are recomputed from the live state."""

    def __init__(self, world: GridWorld):
        self.world = world
        self._trajectory: Optional[Trajectory] = None
        self._cursor = 0

    def begin(self, trajectory: Trajectory) -> None:
        self._trajectory = trajectory
        self._cursor = 0

    def act(self, state: EpisodeState) -> Tuple[Action, Dict[str, Any]]:
        trajectory = self._trajectory
        if self._cursor >= len(trajectory):
            return Action(ActionTag.STOP), {"expert": "exhausted"}
        tag = trajectory.actions[self._cursor]
        instance_id = trajectory.instance_ids[self._cursor] if trajectory.instance_ids else None
        mask = None
        if tag.is_interaction:
            if instance_id is not None:
                mask = self.world.instance_mask(state, instance_id)
            else:
                mask = trajectory.masks[self._cursor]
        self._cursor += 1
        return Action(tag, mask), {"expert": self._cursor - 1}

    def force(self, state: EpisodeState, action: Action, cls: Optional[str]) -> None:
        self._cursor += 1


# ------------------------------------------------------------------ rollout
def rollout(policy: Policy, world: GridWorld, trajectory: Trajectory,
            limits: Optional[RolloutLimits] = None) -> EpisodeResult:
    """Run one episode until Stop, the step limit or too many consecutive failed interactions."""
    limits = limits or RolloutLimits()
    state = world.reset(trajectory.layout, trajectory.goal, trajectory.start)
    policy.begin(trajectory)
    log: List[Dict[str, Any]] = []
    consecutive_fails = 0
    failure = "max-steps"
    while state.step < limits.max_steps:
        action, record = policy.act(state)
        state, event = world.step(state, action)
        entry = {"step": state.step - 1, "action": action.tag.value, "event": event.value,
                 "mask": None if action.mask is None else rle_encode(action.mask)}
        entry.update(record)
        log.append(entry)
        if event == StepEvent.DONE:
            failure = "stop"
            break
        consecutive_fails = consecutive_fails + 1 if event == StepEvent.API_FAIL else 0
        if consecutive_fails >= limits.max_api_fails:
            failure = "api-fail-limit"
            break
    success, k, n = world.check_goal(state, trajectory.goal)
    return EpisodeResult(
        episode_id=trajectory.episode_id,
        split=trajectory.split,
        task_type=trajectory.goal.task_type.value,
        task_success=success,
        goal_conditions=(k, n),
        agent_path_length=max(state.step, 1),
        expert_path_length=len(trajectory),
        failure_tag=failure,
        log=log,
    )


def summarize(results: Sequence[EpisodeResult]) -> SplitMetrics:
    """Per-episode averages; goal-condition PLW weights the fraction k/n."""
    if not results:
        return SplitMetrics(episodes=0, task_sr=0.0, goal_cond_sr=0.0, plw_task_sr=0.0, plw_goal_cond_sr=0.0)
    task = [float(r.task_success) for r in results]
    goal = [r.goal_condition_fraction for r in results]
    return SplitMetrics(
        episodes=len(results),
        task_sr=float(np.mean(task)),
        goal_cond_sr=float(np.mean(goal)),
        plw_task_sr=float(np.mean([plw(s, r.expert_path_length, r.agent_path_length) for s, r in zip(task, results)])),
        plw_goal_cond_sr=float(np.mean([plw(g, r.expert_path_length, r.agent_path_length)
                                        for g, r in zip(goal, results)])),
    )


def task_type_table(results_by_split: Dict[str, Sequence[EpisodeResult]]) -> Dict[str, Dict[str, float]]:
    table: Dict[str, Dict[str, float]] = {}
    for task_type in TaskType:
        table[task_type.value] = {}
        for split, results in results_by_split.items():
            matching = [r for r in results if r.task_type == task_type.value]
            table[task_type.value][split] = float(np.mean([r.task_success for r in matching])) if matching else 0.0
    return table


# ---------------------------------------------------------------- subgoals
def _receptacle_count(state: EpisodeState, cls: str) -> int:
    layout = state.layout
    return sum(1 for p in state.placements
               if p.receptacle is not None and layout.receptacles[p.receptacle].cls == cls)


def subgoal_completed(subgoal: Subgoal, before: EpisodeState, now: EpisodeState) -> bool:
    layout = now.layout
    rec = layout.receptacle_at(subgoal.target_cell)
    kind = subgoal.kind
    if kind == SubgoalKind.GOTO:
        return now.pose.ahead == subgoal.target_cell
    if kind == SubgoalKind.PICKUP:
        return now.holding is not None and before.holding is None and layout.objects[now.holding].cls == subgoal.target_class
    if kind == SubgoalKind.PUT:
        return _receptacle_count(now, subgoal.target_class) > _receptacle_count(before, subgoal.target_class)
    if kind == SubgoalKind.SLICE:
        count = lambda s: sum(1 for i, o in enumerate(layout.objects) if o.cls == subgoal.target_class and s.sliced[i])
        return count(now) > count(before)
    if rec is None:
        return False
    if kind == SubgoalKind.OPEN:
        return now.opened[rec] and not before.opened[rec]
    if kind == SubgoalKind.CLOSE:
        return not now.opened[rec] and before.opened[rec]
    if kind == SubgoalKind.TOGGLE:
        return now.toggled[rec] != before.toggled[rec]
    return False


@dataclass
class SubgoalOutcome:
    kind: SubgoalKind
    success: bool
    expert_length: int
    agent_length: int

    @property
    def plw(self) -> float:
        return plw(float(self.success), self.expert_length, self.agent_length)


def evaluate_subgoal(policy: Policy, world: GridWorld, trajectory: Trajectory, index: int,
                     limits: RolloutLimits) -> SubgoalOutcome:
    """Teacher-force the demonstration up to the subgoal, then let the policy act."""
    subgoal = trajectory.subgoals[index]
    state = world.reset(trajectory.layout, trajectory.goal, trajectory.start)
    policy.begin(trajectory)
    for t in range(subgoal.start):
        tag = trajectory.actions[t]
        mask = None
        if tag.is_interaction:
            mask = world.instance_mask(state, trajectory.instance_ids[t])
        action = Action(tag, mask)
        policy.force(state, action, trajectory.classes[t])
        state, _ = world.step(state, action)

    before = state
    steps = 0
    fails = 0
    success = False
    while steps < limits.subgoal_max_steps and not state.terminated:
        action, _ = policy.act(state)
        state, event = world.step(state, action)
        steps += 1
        if subgoal_completed(subgoal, before, state):
            success = True
            break
        fails = fails + 1 if event == StepEvent.API_FAIL else 0
        if fails >= limits.max_api_fails:
            break
    return SubgoalOutcome(subgoal.kind, success, subgoal.length, max(steps, 1))


def subgoal_eval(policy: Policy, world: GridWorld, trajectories: Sequence[Trajectory],
                 limits: Optional[RolloutLimits] = None) -> List[SubgoalRow]:
    """Per-kind success and PLW success; zero-length navigation subgoals are skipped."""
    limits = limits or RolloutLimits()
    outcomes: Dict[SubgoalKind, List[SubgoalOutcome]] = {kind: [] for kind in SUBGOAL_KINDS}
    for trajectory in trajectories:
        for index, subgoal in enumerate(trajectory.subgoals):
            if subgoal.length < 1:
                continue
            outcomes[subgoal.kind].append(evaluate_subgoal(policy, world, trajectory, index, limits))
    rows = []
    for kind in SUBGOAL_KINDS:
        found = outcomes[kind]
        rows.append(SubgoalRow(
            kind=kind.value,
            occurrences=len(found),
            success_rate=float(np.mean([o.success for o in found])) if found else 0.0,
            plw_success_rate=float(np.mean([o.plw for o in found])) if found else 0.0,
        ))
    return rows


# ------------------------------------------------------------ split drivers
def evaluate_split(policy: Policy, world: GridWorld, trajectories: Sequence[Trajectory],
                   limits: RolloutLimits, log_dir: Optional[Path] = None) -> List[EpisodeResult]:
    results = []
    for trajectory in trajectories:
        result = rollout(policy, world, trajectory, limits)
        if log_dir is not None:
            write_episode_log(log_dir / trajectory.split / f"{trajectory.episode_id}.jsonl", result.log)
        results.append(result)
    return results


_WORKER: Dict[str, Any] = {}


def _init_worker(checkpoint: str, overrides: Dict[str, Any], data_root: str) -> None:
    model, vocab = load_model(checkpoint, overrides)
    world = GridWorld(model.world)
    _WORKER.update(policy=AgentPolicy(model, world, vocab), world=world, store=DatasetStore(data_root))


def _rollout_job(args: Tuple[str, int, Dict[str, Any]]) -> EpisodeResult:
    split, index, limits = args
    trajectory = _WORKER["store"].load_episode(split, index)
    return rollout(_WORKER["policy"], _WORKER["world"], trajectory, RolloutLimits(**limits))


def evaluate_checkpoint(checkpoint: Union[str, Path], store: DatasetStore, splits: Sequence[str],
                        limits: RolloutLimits, overrides: Optional[Dict[str, Any]] = None,
                        jobs: int = 1, log_dir: Optional[Path] = None,
                        limit: Optional[int] = None) -> Tuple[MetricsReport, Dict[str, List[EpisodeResult]]]:
    """Roll out a checkpoint on each split; episodes may run in a process pool."""
    overrides = overrides or {}
    results: Dict[str, List[EpisodeResult]] = {}
    manifest = store.load_manifest()
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs, initializer=_init_worker,
                                 initargs=(str(checkpoint), overrides, str(store.root))) as pool:
            for split in splits:
                records = manifest.splits.get(split, [])[:limit]
                args = [(split, r.index, limits.model_dump()) for r in records]
                results[split] = list(pool.map(_rollout_job, args))
        if log_dir is not None:
            for split_results in results.values():
                for result in split_results:
                    write_episode_log(log_dir / result.split / f"{result.episode_id}.jsonl", result.log)
    else:
        model, vocab = load_model(checkpoint, overrides)
        world = GridWorld(model.world)
        policy = AgentPolicy(model, world, vocab)
        for split in splits:
            trajectories = store.load_split(split, with_observations=False, limit=limit)
            results[split] = evaluate_split(policy, world, trajectories, limits, log_dir)
    report = MetricsReport(
        splits={split: summarize(r) for split, r in results.items()},
        task_types=task_type_table(results),
    )
    return report, results


def replay_expert(store: DatasetStore, world: GridWorld, splits: Sequence[str],
                  limits: Optional[RolloutLimits] = None) -> Dict[str, Any]:
    """Expert-validity report: every demonstration must solve its task without a failed step."""
    limits = limits or RolloutLimits(max_steps=10_000)
    policy = ExpertReplay(world)
    report: Dict[str, Any] = {"splits": {}}
    for split in splits:
        results = [rollout(policy, world, t, limits) for t in store.iter_split(split, with_observations=False)]
        events = [entry["event"] for r in results for entry in r.log]
        metrics = summarize(results)
        report["splits"][split] = {
            "episodes": len(results),
            "task_sr": metrics.task_sr,
            "blocked": events.count(StepEvent.BLOCKED.value),
            "api_fail": events.count(StepEvent.API_FAIL.value),
        }
    all_splits = report["splits"].values()
    total = sum(s["episodes"] for s in all_splits)
    report["episodes"] = total
    report["task_sr"] = (sum(s["task_sr"] * s["episodes"] for s in all_splits) / total) if total else 0.0
    report["blocked"] = sum(s["blocked"] for s in all_splits)
    report["api_fail"] = sum(s["api_fail"] for s in all_splits)
    return report


# ------------------------------------------------------------ ablation grid
@dataclass(frozen=True)
class AblationSpec:
    label: str
    description: str
    overrides: Dict[str, Any]


def _spec(label: str, description: str, **overrides: Any) -> AblationSpec:
    return AblationSpec(label, description, overrides)


ABLATION_ROWS: Dict[str, AblationSpec] = {s.label: s for s in [
    _spec("a", "FPP + OCL + DF + DA"),
    _spec("b", "OCL + DF + DA", factorized=False),
    _spec("c", "FPP + OCL + DF", augmentation=False),
    _spec("d", "OCL + DF", factorized=False, augmentation=False),
    _spec("e", "FPP + OCL", dynamic_filters=False, augmentation=False),
    _spec("f", "OCL", factorized=False, dynamic_filters=False, augmentation=False),
    _spec("g", "FPP + DF", ocl=False, augmentation=False),
    _spec("h", "DF", factorized=False, ocl=False, augmentation=False),
    _spec("no_ia", "without instance association", instance_association=False),
    _spec("no_oe", "without obstruction evasion", evasion=False),
    _spec("gi_i", "IPM: G+I, APM: I", stream_inputs=StreamInputs(ipm="G+I", apm="I")),
    _spec("g_gi", "IPM: G, APM: G+I", stream_inputs=StreamInputs(ipm="G", apm="G+I")),
    _spec("gi_gi", "IPM: G+I, APM: G+I", stream_inputs=StreamInputs(ipm="G+I", apm="G+I")),
    _spec("no_language", "no language input", input_ablation="no_language"),
    _spec("no_vision", "no visual input", input_ablation="no_vision"),
    _spec("goal_only", "goal statement only", input_ablation="goal_only"),
    _spec("instructions_only", "step-by-step instructions only", input_ablation="instructions_only"),
]}

_INFERENCE_ONLY = ("evasion", "instance_association", "input_ablation")


def resolve_rows(labels: Sequence[str]) -> List[AblationSpec]:
    unknown = [label for label in labels if label not in ABLATION_ROWS]
    if unknown:
        raise ValueError(f"unknown ablation rows: {', '.join(unknown)}; known: {', '.join(ABLATION_ROWS)}")
    return [ABLATION_ROWS[label] for label in labels]


def ablation_grid(store: DatasetStore, rows: Sequence[AblationSpec], base: ModelConfig, train_config: TrainConfig,
                  limits: RolloutLimits, out_dir: Union[str, Path], seeds: Sequence[int] = (0, 1, 2),
                  splits: Sequence[str] = EVAL_SPLITS, jobs: int = 1,
                  train_fn: Callable = train) -> List[AblationRow]:
    """
    Train (or reuse) one checkpoint per distinct training configuration and
    seed, evaluate every row on each split and average over seeds. A row whose
    training fails is reported as failed and the grid continues.
    """
    out_dir = Path(out_dir)
    checkpoint_dir = out_dir / "checkpoints"
    vocab = load_vocabulary(store)
    world_config = WorldConfig.model_validate(store.load_manifest().config["generator"]["world"])
    train_trajectories: Optional[List[Trajectory]] = None
    grid: List[AblationRow] = []

    for spec in rows:
        per_seed: Dict[str, Dict[str, List[float]]] = {m: {s: [] for s in splits} for m in METRIC_NAMES}
        row = AblationRow(label=spec.label, description=spec.description,
                          flags=_row_flags(base, spec), seeds=list(seeds))
        try:
            for seed in seeds:
                config = base.model_copy(update={**spec.overrides, "seed": seed})
                checkpoint = checkpoint_dir / f"{config.training_key()}.ckpt"
                if not checkpoint.exists():
                    if train_trajectories is None:
                        train_trajectories = store.load_split("train")
                    trained_config = config.model_copy(update={k: ModelConfig.model_fields[k].default
                                                               for k in _INFERENCE_ONLY})
                    result = train_fn(train_trajectories, trained_config, train_config, vocab,
                                      world_config)
                    save_model(checkpoint, result.model, vocab, result.steps)
                overrides = {k: getattr(config, k) for k in _INFERENCE_ONLY}
                report, _ = evaluate_checkpoint(checkpoint, store, splits, limits, overrides, jobs)
                for split, metrics in report.splits.items():
                    for name in METRIC_NAMES:
                        per_seed[name][split].append(getattr(metrics, name))
        except (RuntimeError, ValueError) as e:
            logger.warning(f"Ablation row {spec.label} failed: {e}")
            grid.append(row.model_copy(update={"status": "failed", "error": str(e)}))
            continue
        means = {name: {split: float(np.mean(v)) for split, v in by_split.items()} for name, by_split in per_seed.items()}
        grid.append(row.model_copy(update={"metrics": means}))
        logger.info(f"Ablation row {spec.label} done: {means['task_sr']}")
    return grid


def _row_flags(base: ModelConfig, spec: AblationSpec) -> Dict[str, Any]:
    config = base.model_copy(update=spec.overrides)
    return {
        "FPP": config.factorized,
        "OCL": config.ocl,
        "DF": config.dynamic_filters,
        "DA": config.augmentation,
        "IA": config.instance_association,
        "OE": config.evasion,
        "streams": f"{config.stream_inputs.ipm.value} & {config.stream_inputs.apm.value}",
        "input": config.input_ablation,
    }


# ------------------------------------------------------------------ reports
def _pct(value: float) -> str:
    return f"{100.0 * value:.2f}"


def _with_plw(metrics: Dict[str, Dict[str, float]], split: str, name: str) -> str:
    return f"{_pct(metrics[name][split])} ({_pct(metrics['plw_' + name][split])})"


def format_metrics_table(report: MetricsReport) -> str:
    rows = [
        [split, m.episodes, f"{_pct(m.task_sr)} ({_pct(m.plw_task_sr)})",
         f"{_pct(m.goal_cond_sr)} ({_pct(m.plw_goal_cond_sr)})"]
        for split, m in report.splits.items()
    ]
    return tabulate(rows, headers=["Split", "Episodes", "Task (PLW)", "Goal-Cond (PLW)"], tablefmt="pretty")


def format_task_type_table(report: MetricsReport) -> str:
    splits = list(report.splits)
    rows = [[task] + [_pct(by_split.get(s, 0.0)) for s in splits] for task, by_split in report.task_types.items()]
    return tabulate(rows, headers=["Task type"] + splits, tablefmt="pretty")


def format_subgoal_table(subgoals: Dict[str, List[SubgoalRow]]) -> str:
    splits = list(subgoals)
    kinds = [kind.value for kind in SUBGOAL_KINDS]
    rows = []
    for kind in kinds:
        row = [kind]
        for split in splits:
            match = next(r for r in subgoals[split] if r.kind == kind)
            row.append(f"{_pct(match.success_rate)} ({_pct(match.plw_success_rate)}) n={match.occurrences}")
        rows.append(row)
    return tabulate(rows, headers=["Subgoal"] + splits, tablefmt="pretty")


def format_ablation_table(grid: Sequence[AblationRow], splits: Sequence[str] = EVAL_SPLITS) -> str:
    mark = lambda flag: "✓" if flag else ""
    headers = ["Row", "FPP", "OCL", "DF", "DA", "Setting"]
    for split in splits:
        headers += [f"{split} Task", f"{split} Goal-Cond"]
    rows = []
    for row in grid:
        flags = row.flags
        line = [f"({row.label})", mark(flags["FPP"]), mark(flags["OCL"]), mark(flags["DF"]), mark(flags["DA"]),
                row.description]
        for split in splits:
            if row.status != "ok":
                line += ["failed", "failed"]
            else:
                line += [_with_plw(row.metrics, split, "task_sr"), _with_plw(row.metrics, split, "goal_cond_sr")]
        rows.append(line)
    return tabulate(rows, headers=headers, tablefmt="pretty")


def write_report(out_dir: Union[str, Path], report: MetricsReport) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(report.model_dump_json(indent=2))
    with open(out_dir / "report.csv", "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["split", "episodes"] + list(METRIC_NAMES))
        for split, m in report.splits.items():
            writer.writerow([split, m.episodes] + [f"{getattr(m, name):.6f}" for name in METRIC_NAMES])


def write_grid(out_dir: Union[str, Path], grid: Sequence[AblationRow], splits: Sequence[str] = EVAL_SPLITS) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "grid.json").write_text(json.dumps([row.model_dump(mode="json") for row in grid], indent=2))
    with open(out_dir / "grid.csv", "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["row", "description", "status"] + [f"{s}_{m}" for s in splits for m in METRIC_NAMES])
        for row in grid:
            values = [f"{row.metrics[m][s]:.6f}" if row.status == "ok" else "" for s in splits for m in METRIC_NAMES]
            writer.writerow([row.label, row.description, row.status] + values)
