"""
config.py — Impostazioni del processo (variabili d'ambiente / .env)

Le run hanno una configurazione propria (services/runconfig.py); qui solo ciò
che serve al servizio e alla CLI.
"""
from functools import lru_cache

from pydantic_settings import BaseSettings


class Settings(BaseSettings):
    runs_dir: str = "runs"
    api_token: str = ""          # vuoto = API aperta
    log_level: str = "INFO"
    default_max_tokens: int = 4096
    app_env: str = "production"

    class Config:
        env_file = ".env"


@lru_cache()
def get_settings() -> Settings:
    return Settings()
