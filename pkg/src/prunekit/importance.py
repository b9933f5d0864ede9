"""Candidate scoring by masked perplexity.

A candidate's importance is the calibration perplexity of the model with
that candidate masked out: the lower the score, the safer the removal.
Scoring holds a per-candidate masked view, so the model is never mutated
and candidates may be evaluated concurrently.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum

from . import calib as calib_mod
from . import model as model_mod
from .calib import CalibrationSet, Metric
from .model import BlockId, TransformerModel


class Stage(Enum):
    DEPTH = "depth"
    MLP_WIDTH = "mlp_width"
    ATTN_WIDTH = "attn_width"


@dataclass
class ImportanceScore:
    block: BlockId
    score: float
    stage: Stage


def default_workers() -> int:
    """Worker count for score_all; capped by the MP_THREADS env var."""
    env = os.environ.get("MP_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            return 1
    return 1


def block_importance(mdl: TransformerModel, block: BlockId, calib: CalibrationSet,
                     metric: Metric = Metric.PERPLEXITY) -> ImportanceScore:
    """Perplexity with the whole block masked out."""
    with model_mod.mask_block(mdl, block) as masked:
        ppl = calib_mod.perplexity(masked, calib, metric)
    return ImportanceScore(block, ppl, Stage.DEPTH)


def width_importance(mdl: TransformerModel, block: BlockId, group: int,
                     calib: CalibrationSet, metric: Metric = Metric.PERPLEXITY) -> ImportanceScore:
    """Perplexity with the block's trailing `group` units masked out.

    Units are MLP channels or query heads (whole KV groups only).
    """
    stage = Stage.ATTN_WIDTH if block.kind == model_mod.ATTN else Stage.MLP_WIDTH
    if group == 0:
        return ImportanceScore(block, calib_mod.perplexity(mdl, calib, metric), stage)
    with model_mod.mask_width(mdl, block, group) as masked:
        ppl = calib_mod.perplexity(masked, calib, metric)
    return ImportanceScore(block, ppl, stage)


def score_all(mdl: TransformerModel, candidates, calib: CalibrationSet,
              metric: Metric = Metric.PERPLEXITY, workers: int | None = None) -> list:
    """Score a list of (BlockId, group_or_None) candidates.

    Results come back in candidate order and are identical whether computed
    serially or in parallel (each evaluation is independent and accumulates
    in float64).
    """
    if workers is None:
        workers = default_workers()

    def one(cand):
        block, group = cand
        if group is None:
            return block_importance(mdl, block, calib, metric)
        return width_importance(mdl, block, group, calib, metric)

    if workers <= 1 or len(candidates) <= 1:
        return [one(c) for c in candidates]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, candidates))
