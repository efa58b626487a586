"""Classifier-free guidance scale sweep on one trained checkpoint"""

import logging
from typing import Any, Dict, List

from ..errors import UsageError
from ..inference import load_denoiser
from .evaluation import AblationContext, evaluate_stream, evaluation_seeds

logger = logging.getLogger(__name__)

DISPLAY_NAME = "CFG scale"
ROW_KEY = "cfg_scale"
DEFAULT_VALUES = "2,4,5,6,8"


def parse(spec: str) -> List[float]:
    try:
        values = [float(part) for part in spec.split(",") if part.strip()]
    except ValueError:
        raise UsageError(f"cfg list '{spec}' must be comma-separated numbers") from None
    if not values:
        raise UsageError("cfg list is empty")
    if any(s < 0 for s in values):
        raise UsageError("cfg scales must be >= 0")
    return values


def run(values: List[float], ctx: AblationContext) -> List[Dict[str, Any]]:
    _, model = load_denoiser(ctx.ckpt or ctx.checkpoint_path("hybrid"))
    seeds = evaluation_seeds(ctx)
    rows = []
    for s in values:
        logger.info(f"evaluating cfg scale s={s}")
        rows.append({ROW_KEY: s, **evaluate_stream(model, ctx.run.codec, ctx.with_stream(cfg_scale=s).stream, seeds)})
    return rows
