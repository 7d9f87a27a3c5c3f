from fastapi import APIRouter
from typing import Dict, Any

router = APIRouter()

SERVICE_INFO = {
    "name": "Factored Agent Results API",
    "description": "Read-only access to generated datasets, run reports and ablation grids",
    "version": "1.0.0",
}

SITE_MAP = {
    "/": "Service information",
    "/datasets/manifest": "Manifest of the dataset under the data root",
    "/datasets/episodes/{split}/{index}": "Metadata of one episode (no observation arrays)",
    "/runs": "Run directories with their command",
    "/runs/{name}/report": "Reports written by a run",
    "/health": "Service status and system metrics",
}

@router.get("/", response_model=Dict[str, Any])
async def get_home():
    """
    Service information and links.
    """
    return {
        "info": SERVICE_INFO,
        "site_map": SITE_MAP,
        "_links": {
            "self": {"href": "/"},
            "manifest": {"href": "/datasets/manifest"},
            "runs": {"href": "/runs"},
            "health": {"href": "/health"},
        }
    }
