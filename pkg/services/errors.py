"""
services/errors.py — Gerarchia delle eccezioni di dominio
"""
from typing import Optional


class FugueError(Exception):
    """Radice di tutti gli errori del runtime."""


class ProtocolViolation(FugueError):
    """Uso scorretto del protocollo hub/runtime (ordinale duplicato, evizione incoerente, ...)."""


class UnknownEpisode(FugueError):
    def __init__(self, owner: str, ordinal: int):
        self.owner = owner
        self.ordinal = ordinal
        super().__init__(f"Episodio sconosciuto: ({owner}, {ordinal})")


class ToolArgumentError(FugueError):
    """Argomenti di un tool non validi: diventa un'osservazione d'errore per il modello."""


class ToolUnavailable(FugueError):
    def __init__(self, tool: str, profile: str = ""):
        self.tool = tool
        suffix = f" for tool profile '{profile}'" if profile else ""
        super().__init__(f"tool '{tool}' is not available{suffix}")


class UnknownPage(FugueError):
    def __init__(self, page: int):
        self.page = page
        super().__init__(f"unknown page number {page}")


class NoCommittedAnswer(FugueError, ValueError):
    """L'output dell'agente non contiene una riga 'Exact Answer:'."""


class AggregationError(FugueError, ValueError):
    pass


class ConfigError(FugueError):
    """Configurazione non valida; `errors` contiene i percorsi dei campi."""

    def __init__(self, errors: list[str]):
        self.errors = errors
        super().__init__("Configurazione non valida:\n" + "\n".join(f"- {e}" for e in errors))


class RunFailed(FugueError):
    def __init__(self, message: str, transcript: Optional[list[dict]] = None):
        self.transcript = transcript or []
        super().__init__(message)


class MixedTaskError(FugueError):
    pass


class InvalidRunDir(FugueError):
    """Cartella di run mancante o incompleta (manifest o event log assenti)."""
