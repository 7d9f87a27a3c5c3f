"""
Behavior cloning: trajectory augmentation, teacher-forced training of the
factored agent and its ablation variants, and checkpoint round-trips.
"""

import csv
import itertools
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch.utils.data import DataLoader, Dataset

from agent.model import FactoredAgent, teacher_forced_actions
from models.config import ModelConfig, TrainConfig, WorldConfig
from models.dataset import Trajectory
from models.errors import TrainingDivergedError
from models.world import NO_OBJECT
from services.expert import Vocabulary
from storage.checkpoints import load_checkpoint, save_checkpoint

logger = logging.getLogger("factored_agent.training")

N_VARIANTS = 5
METRICS_COLUMNS = ["epoch", "loss", "action_acc", "class_acc", "class_loss", "mask_loss"]

_SWAPS = [p for p in itertools.permutations(range(3)) if p != (0, 1, 2)]


# ------------------------------------------------------------------ augmentation
def _variant_plan(seed: int) -> List[Tuple[str, object]]:
    rng = np.random.default_rng(seed)
    swaps = rng.choice(len(_SWAPS), size=2, replace=False)
    noise_seeds = rng.integers(0, 2**31 - 1, size=2)
    return (
        [("original", None)]
        + [("swap-" + "".join(str(c) for c in _SWAPS[int(i)]), _SWAPS[int(i)]) for i in swaps]
        + [(f"perturb-{k}", int(s)) for k, s in enumerate(noise_seeds)]
    )


def augment_variant(trajectory: Trajectory, seed: int, variant: int, world: WorldConfig,
                    bound: float = 0.1) -> Trajectory:
    """One of the five training variants; only the appearance channels ever change."""
    name, arg = _variant_plan(seed)[variant]
    if arg is None:
        return trajectory
    appearance = list(world.channels.appearance_channels)
    observations = trajectory.observations.copy()
    if name.startswith("swap"):
        observations[:, appearance] = trajectory.observations[:, [appearance[i] for i in arg]]
    else:
        noise = np.random.default_rng(arg).uniform(-bound, bound, size=observations[:, appearance].shape)
        observations[:, appearance] = np.clip(observations[:, appearance] + noise, 0.0, 1.0)
    return trajectory.with_observations(observations.astype(np.float32), name)


def augment(trajectory: Trajectory, seed: int, world: Optional[WorldConfig] = None,
            bound: float = 0.1) -> List[Trajectory]:
    """[original, two color swaps, two bounded perturbations]."""
    world = world or WorldConfig()
    return [augment_variant(trajectory, seed, v, world, bound) for v in range(N_VARIANTS)]


# -------------------------------------------------------------------- batching
@dataclass
class Example:
    observations: np.ndarray
    actions: List[int]
    prev_actions: List[int]
    classes: List[int]
    interaction: List[bool]
    masks: np.ndarray
    goal: List[int]
    instructions: List[int]


def to_example(trajectory: Trajectory, vocab: Vocabulary, world: WorldConfig) -> Example:
    classes = list(world.interaction_classes)
    none_index = classes.index(NO_OBJECT)
    actions = [tag.index for tag in trajectory.actions]
    masks = np.zeros((len(actions), world.pixels, world.pixels), dtype=np.float32)
    for t, mask in enumerate(trajectory.masks):
        if mask is not None:
            masks[t] = mask
    return Example(
        observations=trajectory.observations,
        actions=actions,
        prev_actions=teacher_forced_actions(actions),
        classes=[none_index if c is None else classes.index(c) for c in trajectory.classes],
        interaction=[c is not None for c in trajectory.classes],
        masks=masks,
        goal=vocab.encode_goal(trajectory.language),
        instructions=vocab.encode_instructions(trajectory.language),
    )


class TrajectoryDataset(Dataset):
    """Items are (trajectory, variant) pairs; variants are built on demand."""

    def __init__(self, trajectories: Sequence[Trajectory], vocab: Vocabulary, world: WorldConfig,
                 augmentation: bool, seed: int, bound: float):
        self.trajectories = list(trajectories)
        self.vocab = vocab
        self.world = world
        self.seed = seed
        self.bound = bound
        variants = range(N_VARIANTS) if augmentation else range(1)
        self.items = [(i, v) for i in range(len(self.trajectories)) for v in variants]

    def __len__(self) -> int:
        return len(self.items)

    def __getitem__(self, index: int) -> Example:
        traj_index, variant = self.items[index]
        trajectory = augment_variant(
            self.trajectories[traj_index], self.seed * 1_000_003 + traj_index, variant, self.world, self.bound,
        )
        return to_example(trajectory, self.vocab, self.world)


@dataclass
class Batch:
    observations: torch.Tensor
    actions: torch.Tensor
    prev_actions: torch.Tensor
    classes: torch.Tensor
    interaction: torch.Tensor
    masks: torch.Tensor
    valid: torch.Tensor
    goals: List[List[int]]
    instructions: List[List[int]]


def collate(examples: Sequence[Example]) -> Batch:
    steps = max(len(e.actions) for e in examples)
    batch = len(examples)
    channels, height, width = examples[0].observations.shape[1:]
    observations = torch.zeros((batch, steps, channels, height, width), dtype=torch.float32)
    masks = torch.zeros((batch, steps, height, width), dtype=torch.float32)
    actions = torch.zeros((batch, steps), dtype=torch.long)
    prev_actions = torch.zeros((batch, steps), dtype=torch.long)
    classes = torch.zeros((batch, steps), dtype=torch.long)
    interaction = torch.zeros((batch, steps), dtype=torch.bool)
    valid = torch.zeros((batch, steps), dtype=torch.bool)
    for i, e in enumerate(examples):
        n = len(e.actions)
        observations[i, :n] = torch.from_numpy(np.asarray(e.observations, dtype=np.float32))
        masks[i, :n, :e.masks.shape[1], :e.masks.shape[2]] = torch.from_numpy(e.masks)
        actions[i, :n] = torch.as_tensor(e.actions)
        prev_actions[i, :n] = torch.as_tensor(e.prev_actions)
        classes[i, :n] = torch.as_tensor(e.classes)
        interaction[i, :n] = torch.as_tensor(e.interaction)
        valid[i, :n] = True
    return Batch(observations, actions, prev_actions, classes, interaction, masks, valid,
                 [e.goal for e in examples], [e.instructions for e in examples])


# ------------------------------------------------------------------------ loss
def compute_loss(model: FactoredAgent, batch: Batch, config: TrainConfig) -> Tuple[torch.Tensor, Dict[str, float]]:
    """
    Action cross-entropy summed over steps plus class cross-entropy summed over
    interaction steps (or per-pixel BCE of the mask head), averaged over the batch.
    """
    dtype = next(model.parameters()).dtype
    language = model.encode_language(batch.goals, batch.instructions)
    out = model.unroll(batch.observations.to(dtype), batch.prev_actions, language)
    size = batch.actions.shape[0]

    action_ce = F.cross_entropy(out.action_logits[batch.valid], batch.actions[batch.valid], reduction="sum") / size
    loss = config.action_loss_weight * action_ce
    stats = {"action_loss": float(action_ce)}
    picked = batch.interaction & batch.valid
    if out.class_logits is not None:
        if picked.any():
            class_ce = F.cross_entropy(out.class_logits[picked], batch.classes[picked], reduction="sum") / size
        else:
            class_ce = out.class_logits.sum() * 0.0
        loss = loss + config.class_loss_weight * class_ce
        stats["class_loss"] = float(class_ce)
    if out.mask_logits is not None:
        if picked.any():
            per_step = F.binary_cross_entropy_with_logits(
                out.mask_logits[picked], batch.masks[picked].to(dtype), reduction="none",
            ).mean(dim=(1, 2))
            mask_bce = per_step.sum() / size
        else:
            mask_bce = out.mask_logits.sum() * 0.0
        loss = loss + config.mask_loss_weight * mask_bce
        stats["mask_loss"] = float(mask_bce)
    stats["loss"] = float(loss)
    return loss, stats


# --------------------------------------------------------------------- models
def build_variant(config: ModelConfig, vocab: Vocabulary, world: WorldConfig) -> FactoredAgent:
    """The architecture for one ablation row, seeded from ``config.seed``."""
    torch.manual_seed(config.seed)
    return FactoredAgent(config, len(vocab), world, pad_id=vocab.pad_id, sep_id=vocab.sep_id)


def evaluate_teacher_forced(model: FactoredAgent, trajectories: Sequence[Trajectory], vocab: Vocabulary,
                            world: WorldConfig, batch_size: int = 16) -> Dict[str, float]:
    """
    Teacher-forced action accuracy, interaction-step class accuracy, class
    cross-entropy per interaction step and mask loss (eval mode).
    """
    was_training = model.training
    model.eval()
    action_hits = action_total = class_hits = class_total = 0
    mask_loss = class_loss = 0.0
    with torch.no_grad():
        for start in range(0, len(trajectories), batch_size):
            batch = collate([to_example(t, vocab, world) for t in trajectories[start:start + batch_size]])
            dtype = next(model.parameters()).dtype
            language = model.encode_language(batch.goals, batch.instructions)
            out = model.unroll(batch.observations.to(dtype), batch.prev_actions, language)
            predicted = out.action_logits.argmax(dim=-1)
            action_hits += int((predicted == batch.actions)[batch.valid].sum())
            action_total += int(batch.valid.sum())
            picked = batch.interaction & batch.valid
            if out.class_logits is not None:
                class_hits += int((out.class_logits.argmax(dim=-1) == batch.classes)[picked].sum())
                class_total += int(picked.sum())
                if picked.any():
                    class_loss += float(F.cross_entropy(out.class_logits[picked], batch.classes[picked],
                                                        reduction="sum"))
            if out.mask_logits is not None and picked.any():
                mask_loss += float(F.binary_cross_entropy_with_logits(
                    out.mask_logits[picked], batch.masks[picked].to(dtype), reduction="sum",
                ))
                # Without a class head, a step counts as correct when the mask IoU reaches 0.5.
                predicted_mask = out.mask_logits[picked] > 0
                target_mask = batch.masks[picked].bool()
                inter = (predicted_mask & target_mask).sum(dim=(1, 2)).double()
                union = (predicted_mask | target_mask).sum(dim=(1, 2)).clamp(min=1).double()
                class_hits += int((inter / union >= 0.5).sum())
                class_total += int(picked.sum())
    model.train(was_training)
    return {
        "action_acc": action_hits / max(action_total, 1),
        "class_acc": class_hits / max(class_total, 1) if class_total else 1.0,
        "class_loss": class_loss / max(class_total, 1),
        "mask_loss": mask_loss / max(action_total, 1),
    }


@dataclass
class TrainResult:
    model: FactoredAgent
    metrics: List[Dict[str, float]]
    steps: int


def train(trajectories: Sequence[Trajectory], config: ModelConfig, train_config: TrainConfig,
          vocab: Vocabulary, world: WorldConfig, run_dir: Optional[Union[str, Path]] = None,
          valid: Optional[Sequence[Trajectory]] = None) -> TrainResult:
    """
    Teacher-forced behavior cloning with Adam. Deterministic given ``config.seed``.

    Inference-only switches do not affect training, so the model is always
    trained without input ablations.
    """
    torch.use_deterministic_algorithms(True, warn_only=True)
    torch.set_num_threads(1)
    model = build_variant(config.model_copy(update={"input_ablation": "none"}), vocab, world)
    optimizer = torch.optim.Adam(model.parameters(), lr=train_config.learning_rate)
    dataset = TrajectoryDataset(trajectories, vocab, world, config.augmentation, config.seed,
                                train_config.perturbation_bound)
    generator = torch.Generator().manual_seed(config.seed)
    loader = DataLoader(dataset, batch_size=train_config.batch_size, shuffle=True,
                        generator=generator, collate_fn=collate, num_workers=0)
    logger.info(f"Training {len(dataset)} items ({len(trajectories)} trajectories) "
                f"for {train_config.epochs} epochs, key {config.training_key()}")

    metrics: List[Dict[str, float]] = []
    steps = 0
    for epoch in range(1, train_config.epochs + 1):
        model.train()
        running = 0.0
        batches = 0
        for batch in loader:
            loss, _ = compute_loss(model, batch, train_config)
            if not torch.isfinite(loss):
                logger.error(f"Non-finite loss at epoch {epoch}, step {steps}")
                raise TrainingDivergedError(f"loss became {float(loss)} at epoch {epoch}, step {steps}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            running += float(loss)
            batches += 1
            steps += 1
        row = {"epoch": epoch, "loss": running / max(batches, 1)}
        row.update(evaluate_teacher_forced(model, trajectories, vocab, world, train_config.batch_size))
        metrics.append(row)
        message = (f"epoch {epoch:02d} | loss {row['loss']:.4f} | action acc {row['action_acc']:.3f}"
                   f" | class acc {row['class_acc']:.3f}")
        if valid:
            seen = evaluate_teacher_forced(model, valid, vocab, world, train_config.batch_size)
            message += f" | valid action acc {seen['action_acc']:.3f}"
        logger.info(message)

    if run_dir is not None:
        write_metrics(Path(run_dir) / "metrics.csv", metrics)
    model.eval()
    return TrainResult(model=model, metrics=metrics, steps=steps)


def write_metrics(path: Path, rows: Sequence[Dict[str, float]]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=METRICS_COLUMNS, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})


# ----------------------------------------------------------------- checkpoints
def save_model(path: Union[str, Path], model: FactoredAgent, vocab: Vocabulary, steps: int) -> None:
    save_checkpoint(
        path,
        model,
        model_config={"model": model.config.model_dump(mode="json"), "world": model.world.model_dump(mode="json")},
        vocab_tokens=vocab.tokens,
        vocab_hash=vocab.hash,
        channels=model.world.channels.to_dict(),
        step=steps,
    )


def load_model(path: Union[str, Path], overrides: Optional[Dict] = None) -> Tuple[FactoredAgent, Vocabulary]:
    """
    Rebuild a model from a checkpoint. ``overrides`` may change inference-only
    fields (evasion, instance association, input ablation) but not weights.
    """
    header, state = load_checkpoint(path)
    config = ModelConfig.model_validate(header["model_config"]["model"])
    if overrides:
        updated = config.model_copy(update=overrides)
        if updated.training_key() != config.training_key():
            raise ValueError("overrides change trained weights; train a separate checkpoint instead")
        config = updated
    world = WorldConfig.model_validate(header["model_config"]["world"])
    vocab = Vocabulary(header["vocab_tokens"])
    if vocab.hash != header["vocab_hash"]:
        raise ValueError(f"vocabulary hash mismatch in checkpoint {path}")
    model = FactoredAgent(config, len(vocab), world, pad_id=vocab.pad_id, sep_id=vocab.sep_id)
    model.load_state_dict(state)
    model.eval()
    return model, vocab
