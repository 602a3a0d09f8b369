"""Orchestration: configuration, synthetic data, completion exchange, expansion, novel views."""

from .config import PipelineConfig
from .exchange import ExchangeRecord, oracle_complete
from .expand import run_expand
from .novel_views import path_cameras, render_novel_views
from .synthetic import gen_synthetic_scene, parse_scene, render_scene

__all__ = [
    "ExchangeRecord",
    "PipelineConfig",
    "gen_synthetic_scene",
    "oracle_complete",
    "parse_scene",
    "path_cameras",
    "render_novel_views",
    "render_scene",
    "run_expand",
]
