from typing import Any, Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, Field, model_validator

FailureTag = Literal["stop", "max-steps", "api-fail-limit"]


class EpisodeResult(BaseModel):
    episode_id: str
    split: str
    task_type: str
    task_success: bool
    goal_conditions: Tuple[int, int]
    agent_path_length: int = Field(ge=1)
    expert_path_length: int = Field(ge=1)
    failure_tag: FailureTag
    log: List[Dict[str, Any]] = []

    @model_validator(mode="after")
    def _consistent(self) -> "EpisodeResult":
        k, n = self.goal_conditions
        if not 0 <= k <= n:
            raise ValueError(f"goal conditions {k}/{n} out of range")
        if self.task_success and k != n:
            raise ValueError("task success with unmet goal conditions")
        return self

    @property
    def goal_condition_fraction(self) -> float:
        k, n = self.goal_conditions
        return k / n


class SplitMetrics(BaseModel):
    episodes: int
    task_sr: float = Field(ge=0.0, le=1.0)
    goal_cond_sr: float = Field(ge=0.0, le=1.0)
    plw_task_sr: float = Field(ge=0.0, le=1.0)
    plw_goal_cond_sr: float = Field(ge=0.0, le=1.0)


class SubgoalRow(BaseModel):
    kind: str
    occurrences: int
    success_rate: float
    plw_success_rate: float


class MetricsReport(BaseModel):
    splits: Dict[str, SplitMetrics]
    task_types: Dict[str, Dict[str, float]] = {}
    subgoals: Dict[str, List[SubgoalRow]] = {}


class AblationRow(BaseModel):
    label: str
    description: str
    flags: Dict[str, Any]
    status: Literal["ok", "failed"] = "ok"
    error: Optional[str] = None
    seeds: List[int] = []
    # metric name -> split -> mean over seeds
    metrics: Dict[str, Dict[str, float]] = {}


class RunSummary(BaseModel):
    """One run directory as listed by the results service."""

    name: str
    command: Optional[str] = None
    has_report: bool = False
    has_grid: bool = False
    has_checkpoint: bool = False
