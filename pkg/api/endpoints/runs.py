from fastapi import APIRouter, Depends, HTTPException
from typing import Any, Dict, List

from api.endpoints.datasets import get_results_service
from models.results import RunSummary
from services.results_service import ResultsService

router = APIRouter()


@router.get("/", response_model=List[RunSummary])
async def get_runs(service: ResultsService = Depends(get_results_service)):
    """
    Run directories under the runs root.
    """
    return service.list_runs()


@router.get("/{name}/report", response_model=Dict[str, Any])
async def get_run_report(name: str, service: ResultsService = Depends(get_results_service)):
    """
    Reports a run has written (metrics, ablation grid, subgoal table, expert replay).
    """
    report = service.get_report(name)
    if report is None:
        raise HTTPException(status_code=404, detail=f"No report found for run '{name}'")
    return report
