"""HTTP service layer: pydantic schemas and the FastAPI application."""

from .app import app, handle_bench, handle_gen, handle_reconcile, handle_validate

__all__ = ["app", "handle_reconcile", "handle_validate", "handle_gen", "handle_bench"]
