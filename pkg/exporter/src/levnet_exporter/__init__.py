"""Checkpoint exporter for the levnet neutral model format.

The exporter talks to levnet only through its public surface: it writes
the documented JSON model format directly and shells out to the `levnet`
CLI for activation fitting and for validating what it wrote. It never
imports levnet, so the two packages can version independently.
"""

from .exporting import ExportError, ExportManifest, export_checkpoint, export_state
from .fixture import make_fixture
from .neutral import weight_hash_of_file

__all__ = [
    "ExportError",
    "ExportManifest",
    "export_checkpoint",
    "export_state",
    "make_fixture",
    "weight_hash_of_file",
]
