"""Overlap length sweep on one trained checkpoint"""

import logging
from typing import Any, Dict, List

from ..errors import UsageError
from ..inference import load_denoiser
from .evaluation import AblationContext, evaluate_stream, evaluation_seeds

logger = logging.getLogger(__name__)

DISPLAY_NAME = "Latent overlap length"
ROW_KEY = "overlap"
DEFAULT_VALUES = "1,2,3,4"


def parse(spec: str) -> List[int]:
    try:
        values = [int(part) for part in spec.split(",") if part.strip()]
    except ValueError:
        raise UsageError(f"overlap list '{spec}' must be comma-separated integers") from None
    if not values:
        raise UsageError("overlap list is empty")
    return values


def run(values: List[int], ctx: AblationContext) -> List[Dict[str, Any]]:
    _, model = load_denoiser(ctx.ckpt or ctx.checkpoint_path("hybrid"))
    seeds = evaluation_seeds(ctx)
    rows = []
    for n in values:
        if not 1 <= n < model.config.frames:
            raise UsageError(f"overlap {n} must satisfy 1 <= n < F={model.config.frames}")
        logger.info(f"evaluating overlap n={n}")
        rows.append({ROW_KEY: n, **evaluate_stream(model, ctx.run.codec, ctx.with_stream(overlap=n).stream, seeds)})
    return rows
