"""
services/runconfig.py — File di configurazione dichiarativo di una run (YAML o JSON)

Un file descrive: modalità, task, team, backend, hub, selettore, tool, seed e
cartella di output. Gli errori di validazione sono elencati per percorso del
campo (es. `agents.0.write_trigger`). I segreti compaiono solo come nome della
variabile d'ambiente.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Literal, Optional

import yaml
from pydantic import BaseModel, Field, ValidationError, model_validator

from services.core import Task
from services.errors import ConfigError
from services.runtime import AgentConfig, AgentSampling, TeamConfig


class BackendSpec(BaseModel):
    kind: Literal["openai", "anthropic", "scripted", "replay"]
    base_url: Optional[str] = None
    model: str = ""
    api_key_env: Optional[str] = None
    retries: int = Field(default=2, ge=0)
    backoff_seconds: float = Field(default=1.0, ge=0)
    timeout_seconds: float = Field(default=120.0, gt=0)
    max_in_flight: int = Field(default=8, ge=1)
    script: list[dict[str, Any]] = Field(default_factory=list)
    script_file: Optional[str] = None
    log: Optional[str] = None  # replay: event log da cui rileggere le risposte

    @model_validator(mode="after")
    def _by_kind(self) -> "BackendSpec":
        if self.kind == "openai" and not (self.base_url and self.model):
            raise ValueError("un backend openai richiede base_url e model")
        if self.kind == "anthropic" and not self.model:
            raise ValueError("un backend anthropic richiede model")
        if self.kind == "scripted" and not (self.script or self.script_file):
            raise ValueError("un backend scripted richiede script o script_file")
        if self.kind == "replay" and not self.log:
            raise ValueError("un backend replay richiede log")
        return self


class HubSpec(BaseModel):
    enabled: bool = True
    write_backend: Optional[str] = None
    read_backend: Optional[str] = None


class SelectorSpec(BaseModel):
    rule: Literal["bon", "mv", "wmv", "fewtool"] = "bon"


class ToolsSpec(BaseModel):
    corpus: Optional[str] = None
    top_k: int = Field(default=10, ge=1)
    stubs: Optional[str] = None
    live_search_url: Optional[str] = None
    live_api_key_env: Optional[str] = None


class NaiveSpec(BaseModel):
    k: int = Field(default=2, ge=1)
    meta_backend: Optional[str] = None
    sub_backend: Optional[str] = None


class SwarmSpec(BaseModel):
    meta_backend: Optional[str] = None
    sub_backend: Optional[str] = None


PATH_FIELDS = (("task_file",), ("tools", "corpus"), ("tools", "stubs"))


class RunConfig(BaseModel):
    mode: Literal["team", "naive", "swarm"] = "team"
    task: Optional[Task] = None
    task_file: Optional[str] = None
    task_id: Optional[str] = None
    agents: list[AgentConfig] = Field(default_factory=list)
    hub: HubSpec = HubSpec()
    selector: SelectorSpec = SelectorSpec()
    backends: dict[str, BackendSpec] = Field(default_factory=dict)
    tools: ToolsSpec = ToolsSpec()
    naive: NaiveSpec = NaiveSpec()
    swarm: SwarmSpec = SwarmSpec()
    scheduler: Literal["deterministic", "live"] = "deterministic"
    seed: int = 0
    max_tokens: int = Field(default=4096, ge=1)
    output_dir: Optional[str] = None

    @model_validator(mode="after")
    def _references(self) -> "RunConfig":
        if (self.task is None) == (self.task_file is None):
            raise ValueError("indicare esattamente uno tra task e task_file")
        if self.task_file is not None and not self.task_id:
            raise ValueError("task_file richiede task_id")
        if self.mode == "team":
            if not self.agents:
                raise ValueError("la modalità team richiede almeno un agente")
            ids = [a.agent_id for a in self.agents]
            if len(set(ids)) != len(ids):
                raise ValueError(f"agent_id duplicati: {ids}")
        for ref in self.backend_refs():
            if ref not in self.backends:
                raise ValueError(f"backend '{ref}' non definito in backends")
        return self

    def backend_refs(self) -> list[str]:
        refs = []
        if self.mode == "team":
            refs += [a.backend_ref for a in self.agents]
            if self.hub.enabled:
                refs += [r for r in (self.hub.write_backend, self.hub.read_backend) if r]
        elif self.mode == "naive":
            refs += [self.meta_backend_ref(), self.sub_backend_ref()]
        else:
            refs += [self.meta_backend_ref(), self.sub_backend_ref()]
        return [r for r in refs if r]

    def meta_backend_ref(self) -> Optional[str]:
        spec = self.naive if self.mode == "naive" else self.swarm
        return spec.meta_backend or self._first_backend()

    def sub_backend_ref(self) -> Optional[str]:
        spec = self.naive if self.mode == "naive" else self.swarm
        return spec.sub_backend or self.meta_backend_ref()

    def _first_backend(self) -> Optional[str]:
        if self.agents:
            return self.agents[0].backend_ref
        return next(iter(self.backends), None)

    def resolve_task(self) -> Task:
        if self.task is not None:
            return self.task
        return load_task(self.task_file, self.task_id)

    def team_config(self) -> TeamConfig:
        """Il seed globale fissa il seed di campionamento degli agenti che non ne hanno uno."""
        agents = []
        for i, a in enumerate(self.agents):
            if a.sampling.seed is None:
                a = a.model_copy(update={"sampling": AgentSampling(temperature=a.sampling.temperature,
                                                                    seed=self.seed + i)})
            agents.append(a)
        return TeamConfig(task=self.resolve_task(), agents=tuple(agents), hub_enabled=self.hub.enabled,
                          selector=self.selector.rule)

    def write_triggers(self) -> list[int]:
        return sorted({a.write_trigger for a in self.agents})


def load_task(path: str | Path, task_id: str) -> Task:
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                data = json.loads(line)
                if data.get("id") == task_id:
                    return Task.model_validate(data)
    raise ConfigError([f"task_id: task '{task_id}' non trovato in {path}"])


def format_errors(error: ValidationError) -> list[str]:
    out = []
    for e in error.errors():
        path = ".".join(str(p) for p in e["loc"]) or "(root)"
        out.append(f"{path}: {e['msg']}")
    return out


def _resolve_paths(data: dict, base_dir: Path) -> dict:
    data = json.loads(json.dumps(data))
    for path in PATH_FIELDS:
        node = data
        for key in path[:-1]:
            node = node.get(key) if isinstance(node, dict) else None
        if isinstance(node, dict) and isinstance(node.get(path[-1]), str):
            node[path[-1]] = str((base_dir / node[path[-1]]).resolve())
    for spec in (data.get("backends") or {}).values():
        if isinstance(spec, dict):
            for key in ("script_file", "log"):
                if isinstance(spec.get(key), str):
                    spec[key] = str((base_dir / spec[key]).resolve())
    return data


def parse_config(data: Any, base_dir: Optional[str | Path] = None) -> RunConfig:
    """Valida un dizionario di configurazione; i percorsi relativi partono da base_dir."""
    if not isinstance(data, dict):
        raise ConfigError(["(root): la configurazione deve essere un oggetto"])
    data = _resolve_paths(data, Path(base_dir or ".").resolve())
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(format_errors(e)) from e


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError([f"(file): {path} non trovato"])
    text = path.read_text(encoding="utf-8")
    try:
        data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as e:
        raise ConfigError([f"(file): {path} non leggibile: {e}"]) from e
    return parse_config(data, base_dir=path.parent)


def load_script(path: str | Path) -> list[dict]:
    """Regole di un backend scripted da file YAML/JSON (lista, oppure {rules: [...]})."""
    text = Path(path).read_text(encoding="utf-8")
    data = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
    if isinstance(data, dict):
        data = data.get("rules", [])
    if not isinstance(data, list):
        raise ConfigError([f"script_file: {path} deve contenere una lista di regole"])
    return data
