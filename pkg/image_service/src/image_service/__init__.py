"""Reference HTTP service for the medical-image tool endpoints."""

from .app import ServiceConfig, create_app, serve

__all__ = ["ServiceConfig", "create_app", "serve"]
