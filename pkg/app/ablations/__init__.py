"""Ablation registry"""

from typing import Any, Callable, Dict, List, Optional

from . import cfg_scale, hybrid_grid, overlap
from .evaluation import METRIC_COLUMNS, AblationContext, evaluate_stream

AblationParser = Callable[[str], List[Any]]
AblationRunner = Callable[[List[Any], AblationContext], List[Dict[str, Any]]]


class AblationDefinition(Dict[str, Any]):
    """Typed dict alias for ablation metadata"""


ABLATIONS: Dict[str, AblationDefinition] = {
    "grid": {
        "display_name": hybrid_grid.DISPLAY_NAME,
        "parse": hybrid_grid.parse,
        "run": hybrid_grid.run,
        "columns": [hybrid_grid.ROW_KEY, "w", "delta", "alpha"] + METRIC_COLUMNS,
    },
    "overlap": {
        "display_name": overlap.DISPLAY_NAME,
        "parse": overlap.parse,
        "run": overlap.run,
        "columns": [overlap.ROW_KEY] + METRIC_COLUMNS,
    },
    "cfg": {
        "display_name": cfg_scale.DISPLAY_NAME,
        "parse": cfg_scale.parse,
        "run": cfg_scale.run,
        "columns": [cfg_scale.ROW_KEY] + METRIC_COLUMNS,
    },
}


def get_ablation_names() -> list[str]:
    """Return all registered ablation keys"""
    return list(ABLATIONS.keys())


def get_ablation_definition(name: str) -> Optional[AblationDefinition]:
    """Return the ablation definition if registered"""
    return ABLATIONS.get(name)


__all__ = [
    "ABLATIONS",
    "AblationContext",
    "evaluate_stream",
    "get_ablation_definition",
    "get_ablation_names",
]
