"""
Health check endpoint for monitoring the results service.
"""
from fastapi import APIRouter
import psutil  # type: ignore
import platform
import time
from datetime import datetime, timedelta, timezone

from storage.dataset_store import DatasetStore
from storage.paths import get_data_root, get_runs_root

health_router = APIRouter()

START_TIME = time.time()

@health_router.get("/health", tags=["Health"])
async def health_check():
    """
    Service status, data-root availability and system metrics.
    """
    data_status = check_data_root()
    memory = psutil.virtual_memory()
    system_info = {
        "memory_usage": {
            "percent": memory.percent,
            "used_mb": memory.used / (1024 * 1024),
            "available_mb": memory.available / (1024 * 1024)
        },
        "cpu_percent": psutil.cpu_percent(interval=0.1),
        "platform": platform.platform(),
        "python_version": platform.python_version()
    }
    uptime = str(timedelta(seconds=int(time.time() - START_TIME)))
    return {
        "status": "healthy" if data_status["status"] == "available" else "degraded",
        "version": "1.0.0",
        "timestamp": datetime.now(timezone.utc).isoformat(),
        "uptime": uptime,
        "data": data_status,
        "runs_root": str(get_runs_root()),
        "system": system_info
    }

def check_data_root():
    """
    Whether a dataset manifest exists under the data root, and how many episodes it lists.
    """
    root = get_data_root()
    try:
        store = DatasetStore(root)
        if not store.exists():
            return {"status": "missing", "path": str(root)}
        manifest = store.load_manifest()
        return {
            "status": "available",
            "path": str(root),
            "manifest_hash": store.manifest_hash(),
            "episodes": {split: len(records) for split, records in manifest.splits.items()},
        }
    except Exception as e:
        return {
            "status": "error",
            "path": str(root),
            "error": str(e)
        }
