"""HTTP microservice scoring images against positive/negative text prompts."""

from .app import ServiceConfig, create_app

__all__ = ["ServiceConfig", "create_app"]
