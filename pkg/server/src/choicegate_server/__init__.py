"""Reference inference server for the choicegate wire protocol."""

from .app import create_app
from .table import TableRuntime

__all__ = ["TableRuntime", "create_app"]
