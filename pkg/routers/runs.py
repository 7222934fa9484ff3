"""
routers/runs.py — Avvio e consultazione delle run
- POST /            : valida la config e avvia la run in background
- GET  /{id}        : manifest (o stato "running")
- GET  /{id}/events : event log
- GET  /{id}/notes  : note dell'hub visibili a un richiedente
Nessun endpoint modifica una run in corso.
"""
import json
import logging
import re
from pathlib import Path
from typing import Any

from fastapi import APIRouter, BackgroundTasks, Body, Header, HTTPException

from config import get_settings
from services.errors import ConfigError, FugueError
from services.hub import HubStore
from services.runconfig import RunConfig, parse_config
from services.runs import HUB_DIR, MANIFEST_FILE, execute_run, load_events, new_run_id

logger = logging.getLogger(__name__)

router = APIRouter()

_RUN_ID_RE = re.compile(r"^(?!\.+$)[\w.-]+$")


def verify_api_token(x_api_token: str = Header(None)):
    settings = get_settings()
    if settings.api_token and x_api_token != settings.api_token:
        raise HTTPException(401, "Non autorizzato")


def _run_dir(run_id: str) -> Path:
    if not _RUN_ID_RE.match(run_id):
        raise HTTPException(400, "run_id non valido")
    path = Path(get_settings().runs_dir) / run_id
    if not path.is_dir():
        raise HTTPException(404, "Run non trovata")
    return path


async def _execute(config: RunConfig, run_id: str) -> None:
    try:
        await execute_run(config, get_settings().runs_dir, run_id=run_id)
    except FugueError as e:
        logger.error(f"Run {run_id} fallita: {e}")
    except Exception as e:
        logger.exception(f"Errore inatteso nella run {run_id}: {e}")


# ── RUN ─────────────────────────────────────────────────────

@router.post("")
async def start_run(background_tasks: BackgroundTasks, body: dict[str, Any] = Body(...),
                    x_api_token: str = Header(None)):
    verify_api_token(x_api_token)
    settings = get_settings()
    body.setdefault("max_tokens", settings.default_max_tokens)
    try:
        config = parse_config(body)
        task = config.resolve_task()
    except ConfigError as e:
        raise HTTPException(400, {"message": "Configurazione non valida", "errors": e.errors})

    run_id = new_run_id(task.id)
    (Path(settings.runs_dir) / run_id).mkdir(parents=True, exist_ok=True)
    background_tasks.add_task(_execute, config, run_id)
    logger.info(f"Run {run_id} accodata ({config.mode}, task {task.id})")
    return {"run_id": run_id, "status": "accepted"}


@router.get("/{run_id}")
async def get_run(run_id: str, x_api_token: str = Header(None)):
    verify_api_token(x_api_token)
    path = _run_dir(run_id) / MANIFEST_FILE
    if not path.exists():
        return {"run_id": run_id, "status": "running"}
    return json.loads(path.read_text(encoding="utf-8"))


@router.get("/{run_id}/events")
async def get_events(run_id: str, x_api_token: str = Header(None)):
    verify_api_token(x_api_token)
    run_dir = _run_dir(run_id)
    try:
        return load_events(run_dir)
    except FugueError:
        return []


@router.get("/{run_id}/notes")
async def get_notes(run_id: str, requester: str, x_api_token: str = Header(None)):
    verify_api_token(x_api_token)
    hub = HubStore.load(_run_dir(run_id) / HUB_DIR)
    return [
        {"page": hub.page_number(n.episode_ref, requester), **n.model_dump()}
        for n in hub.visible_notes(requester)
    ]
