from fastapi import APIRouter
from api.endpoints import home, datasets, runs

api_router = APIRouter()

api_router.include_router(home.router, tags=["home"])
api_router.include_router(datasets.router, prefix="/datasets", tags=["datasets"])
api_router.include_router(runs.router, prefix="/runs", tags=["runs"])
