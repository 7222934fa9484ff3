"""
FUGUE — Runtime di ragionamento collettivo tra agenti pari
Servizio HTTP: avvio e consultazione delle run, aggregazione, simulatore.
Deploy: Render (Web Service)
"""
from fastapi import FastAPI
from contextlib import asynccontextmanager
import logging

from config import get_settings
from routers import runs, aggregate, simulate
from services import __version__

settings = get_settings()

logging.basicConfig(level=settings.log_level.upper())
logger = logging.getLogger(__name__)

@asynccontextmanager
async def lifespan(app: FastAPI):
    logger.info(f"🚀 Fugue API avviata (runs in {settings.runs_dir})")
    yield
    logger.info("Fugue API spenta")

app = FastAPI(
    title="Fugue API",
    version=__version__,
    lifespan=lifespan
)

app.include_router(runs.router,      prefix="/api/runs",      tags=["Runs"])
app.include_router(aggregate.router, prefix="/api/aggregate", tags=["Aggregate"])
app.include_router(simulate.router,  prefix="/api/simulate",  tags=["Simulate"])

@app.get("/health")
async def health():
    return {"status": "ok", "service": "fugue-api", "version": __version__}
