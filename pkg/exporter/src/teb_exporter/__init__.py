"""Offline transformer-to-TEB1 exporter."""

from .exporter import ExportJob, export

__version__ = "0.1.0"

__all__ = ["ExportJob", "export"]
