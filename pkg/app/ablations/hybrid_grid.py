"""Hybrid-attention variants: full, window, hybrid schedules and the two-stage run"""

import logging
import os
from dataclasses import dataclass
from typing import Any, Dict, List

from ..dit_model import HybridSchedule, alpha_table
from ..errors import UsageError
from ..inference import DiTDenoiser
from ..toy_dataset import ToyCorpus
from ..training import RunConfig, load_run, train_loop
from .evaluation import AblationContext, evaluate_stream, evaluation_seeds

logger = logging.getLogger(__name__)

DISPLAY_NAME = "Hybrid attention grid"
ROW_KEY = "variant"

NAMED_VARIANTS = {
    "full": (0.0, 0.0),
    "window": (0.0, 1.0),
    "hybrid": (1.0, 0.0),
}
PARAMETER_GRID = [(0.0, 0.0), (0.0, 0.25), (0.0, 0.5), (0.0, 0.75), (0.0, 1.0)] + [
    (w, 0.5 - w / 2) for w in (-1.0, -0.5, 0.5, 1.0)
]


@dataclass(frozen=True)
class GridVariant:
    name: str
    w: float
    delta: float
    two_stage: bool = False

    def configure(self, run: RunConfig) -> RunConfig:
        warmup = run.train.steps // 2 if self.two_stage else 0
        return run.with_model(hybrid_w=self.w, hybrid_delta=self.delta).with_train(full_warmup_steps=warmup)


def _variant_name(w: float, delta: float) -> str:
    return f"w{w:+g}_d{delta:g}"


def parse(spec: str) -> List[GridVariant]:
    """Comma list of full | window | hybrid | two-stage | params | W:DELTA"""
    variants: List[GridVariant] = []
    for token in (part.strip() for part in spec.split(",")):
        if not token:
            continue
        if token in NAMED_VARIANTS:
            variants.append(GridVariant(token, *NAMED_VARIANTS[token]))
        elif token == "two-stage":
            variants.append(GridVariant("two-stage", 0.0, 1.0, two_stage=True))
        elif token == "params":
            variants.extend(GridVariant(_variant_name(w, d), w, d) for w, d in PARAMETER_GRID)
        elif ":" in token:
            try:
                w, delta = (float(x) for x in token.split(":", 1))
            except ValueError:
                raise UsageError(f"grid entry '{token}' is not W:DELTA") from None
            variants.append(GridVariant(_variant_name(w, delta), w, delta))
        else:
            raise UsageError(f"unknown grid entry '{token}'")
    if not variants:
        raise UsageError("ablation grid is empty")
    return variants


def _trained(variant: GridVariant, ctx: AblationContext) -> DiTDenoiser:
    path = ctx.checkpoint_path(variant.name)
    run = variant.configure(ctx.run)
    if os.path.exists(path):
        logger.info(f"{variant.name}: reusing {path}")
        saved_run, params, _ = load_run(path)
        return DiTDenoiser(params, saved_run.model)
    logger.info(f"{variant.name}: training w={variant.w}, delta={variant.delta}, two_stage={variant.two_stage}")
    corpus = ToyCorpus(ctx.data_dir, run)
    log_path = os.path.join(ctx.ckpt_dir, f"{variant.name}_loss.csv")
    train_loop(corpus, run, path, loss_log=log_path, progress=ctx.progress)
    _, params, _ = load_run(path)
    return DiTDenoiser(params, run.model)


def run(variants: List[GridVariant], ctx: AblationContext) -> List[Dict[str, Any]]:
    os.makedirs(ctx.ckpt_dir, exist_ok=True)
    seeds = evaluation_seeds(ctx)
    rows = []
    for variant in variants:
        model = _trained(variant, ctx)
        schedule = HybridSchedule(variant.w, variant.delta, model.config.layers)
        row = {
            ROW_KEY: variant.name,
            "w": variant.w,
            "delta": variant.delta,
            "alpha": alpha_table(schedule),
            **evaluate_stream(model, ctx.run.codec, ctx.stream, seeds),
        }
        rows.append(row)
    return rows
