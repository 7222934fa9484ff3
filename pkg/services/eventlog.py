"""
services/eventlog.py — Event log JSONL append-only di una run

Formato di una riga (chiavi ordinate):
  {"agent_id": str, "kind": str, "payload": {...}, "seq": int, "wall_time": float}
kind ∈ turn | tool_call | tool_result | hub_write | hub_read | answer | status
"""
from __future__ import annotations

import json
import threading
import time
from pathlib import Path
from typing import Any, Iterable, Optional

EVENT_KINDS = ("turn", "tool_call", "tool_result", "hub_write", "hub_read", "answer", "status")


def dump_event(event: dict) -> str:
    return json.dumps(event, ensure_ascii=False, sort_keys=True, separators=(",", ":"))


class EventLog:
    """Stream totalmente ordinato con numero di sequenza monotono."""

    def __init__(self, path: Optional[str | Path] = None, clock=time.time):
        self.path = Path(path) if path else None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
        self.events: list[dict] = []
        self._clock = clock
        self._lock = threading.Lock()

    def emit(self, agent_id: str, kind: str, payload: dict[str, Any]) -> dict:
        if kind not in EVENT_KINDS:
            raise ValueError(f"kind di evento sconosciuto: {kind}")
        with self._lock:
            event = {
                "seq": len(self.events),
                "wall_time": round(self._clock(), 6),
                "agent_id": agent_id,
                "kind": kind,
                "payload": payload,
            }
            self.events.append(event)
            if self.path:
                with self.path.open("a", encoding="utf-8") as fh:
                    fh.write(dump_event(event) + "\n")
        return event

    def of_kind(self, kind: str, agent_id: Optional[str] = None) -> list[dict]:
        return [e for e in self.events if e["kind"] == kind and (agent_id is None or e["agent_id"] == agent_id)]

    def normalized_lines(self) -> list[str]:
        return normalize(self.events)


def normalize(events: Iterable[dict]) -> list[str]:
    """Righe confrontabili byte a byte: wall_time azzerato."""
    return [dump_event({**e, "wall_time": 0.0}) for e in events]


def read_events(path: str | Path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"event log non trovato: {path}")
    events = []
    with path.open(encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                events.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise ValueError(f"{path}:{n}: riga non JSON ({e})") from e
    return events
