from fastapi import APIRouter, Depends, HTTPException
from typing import Any, Dict

from models.dataset import DatasetManifest
from services.results_service import ResultsService

router = APIRouter()


def get_results_service() -> ResultsService:
    return ResultsService()


@router.get("/manifest", response_model=DatasetManifest)
async def get_manifest(service: ResultsService = Depends(get_results_service)):
    """
    Manifest of the dataset under the configured data root.
    """
    manifest = service.get_manifest()
    if manifest is None:
        raise HTTPException(status_code=404, detail=f"No dataset found under {service.data_root}")
    return manifest


@router.get("/episodes/{split}/{index}", response_model=Dict[str, Any])
async def get_episode(split: str, index: int, service: ResultsService = Depends(get_results_service)):
    """
    Metadata of one episode: layout, goal, language, actions and subgoals.
    """
    if index < 0:
        raise HTTPException(status_code=404, detail=f"Episode {split}/{index} not found")
    episode = service.get_episode(split, index)
    if episode is None:
        raise HTTPException(status_code=404, detail=f"Episode {split}/{index} not found")
    return episode
