"""Greedy multidimensional pruning driver.

Runs the enabled stages in order -- whole-block removal, MLP channel
trimming, attention head trimming -- against cumulative pruning-ratio
thresholds derived from the target ratio and its per-stage weights. Each
iteration scores every live candidate by masked perplexity, commits the
argmin, and recomputes the ratio; a stage stops at the first state meeting
its threshold. Weights are reordered once, immediately before whichever
width stage comes first.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

from . import importance as importance_mod
from . import model as model_mod
from . import reorder as reorder_mod
from .calib import CalibrationSet, Metric, perplexity
from .errors import ExhaustionError, InputError
from .model import ATTN, MLP, ArchDescriptor, ModelConfig, TransformerModel, pruning_ratio
from .reorder import ReorderMetric

STAGE_BLOCK = "block"
STAGE_MLP = "mlp"
STAGE_ATTN = "attn"
ALL_STAGES = (STAGE_BLOCK, STAGE_MLP, STAGE_ATTN)


@dataclass
class PruneConfig:
    target_ratio: float = 0.22
    ratio_weights: tuple = (0.44, 0.52, 0.04)  # block, mlp, attn
    g_mlp: int | None = None  # channels per trim; default hidden // 4
    g_attn: int = 1  # KV groups per trim
    stage_order: tuple = ALL_STAGES
    stages_enabled: tuple = ALL_STAGES
    reorder_metric: ReorderMetric = ReorderMetric.L1_NORM
    depth_calib_samples: int = 256
    width_calib_samples: int = 128
    seed: int = 0

    def validate(self, config: ModelConfig) -> None:
        if not (0.0 <= self.target_ratio < 1.0):
            raise InputError(f"target_ratio {self.target_ratio} outside [0, 1)")
        if len(self.ratio_weights) != 3 or any(w < 0 for w in self.ratio_weights):
            raise InputError("ratio_weights must be three non-negative numbers")
        if abs(sum(self.ratio_weights) - 1.0) > 1e-9:
            raise InputError(f"ratio_weights sum to {sum(self.ratio_weights)}, expected 1")
        if sorted(self.stage_order) != sorted(ALL_STAGES):
            raise InputError(f"stage_order must be a permutation of {ALL_STAGES}")
        bad = set(self.stages_enabled) - set(ALL_STAGES)
        if bad or not self.stages_enabled:
            raise InputError(f"stages_enabled must be a non-empty subset of {ALL_STAGES}")
        g = self.resolved_g_mlp(config)
        if g < 1 or config.intermediate % g != 0:
            raise InputError(f"g_mlp={g} must divide intermediate={config.intermediate}")
        if self.g_attn < 1 or config.n_kv_heads % self.g_attn != 0:
            raise InputError(f"g_attn={self.g_attn} must divide n_kv_heads={config.n_kv_heads}")

    def resolved_g_mlp(self, config: ModelConfig) -> int:
        return self.g_mlp if self.g_mlp is not None else config.hidden // 4

    def to_json(self) -> dict:
        d = asdict(self)
        d["reorder_metric"] = self.reorder_metric.value
        d["ratio_weights"] = list(self.ratio_weights)
        d["stage_order"] = list(self.stage_order)
        d["stages_enabled"] = list(self.stages_enabled)
        return d

    @classmethod
    def from_json(cls, data: dict) -> "PruneConfig":
        kwargs = dict(data)
        if "reorder_metric" in kwargs:
            kwargs["reorder_metric"] = ReorderMetric(kwargs["reorder_metric"])
        for key in ("ratio_weights", "stage_order", "stages_enabled"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        try:
            return cls(**kwargs)
        except TypeError as e:
            raise InputError(f"bad prune config: {e}") from e


def derive_thresholds(target_ratio: float, weights) -> tuple:
    """Cumulative stage thresholds (block, block+mlp, total) for the default
    stage order. weights = (w_block, w_mlp, w_attn), non-negative, summing
    to 1."""
    if len(weights) != 3 or any(w < 0 for w in weights):
        raise InputError("weights must be three non-negative numbers")
    if abs(sum(weights) - 1.0) > 1e-9:
        raise InputError(f"weights sum to {sum(weights)}, expected 1")
    t1 = target_ratio * weights[0]
    t2 = t1 + target_ratio * weights[1]
    return (t1, t2, target_ratio)


def stage_thresholds(cfg: PruneConfig) -> list:
    """(stage, cumulative threshold) for the enabled stages in run order.

    Weights of disabled stages are redistributed proportionally so the last
    enabled stage always ends exactly at the target ratio.
    """
    by_stage = dict(zip(ALL_STAGES, cfg.ratio_weights))
    enabled = [s for s in cfg.stage_order if s in cfg.stages_enabled]
    total_w = sum(by_stage[s] for s in enabled)
    if total_w <= 0:
        raise InputError("enabled stages have zero total ratio weight")
    out = []
    acc = 0.0
    for s in enabled:
        acc += cfg.target_ratio * by_stage[s] / total_w
        out.append((s, acc))
    if out:
        out[-1] = (out[-1][0], cfg.target_ratio)
    return out


@dataclass
class TraceStep:
    stage: str
    layer: int
    kind: str
    group: int | None
    score: float
    ratio_after: float

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class PruneTrace:
    steps: list = field(default_factory=list)
    final_descriptor: ArchDescriptor | None = None
    final_ppl: float | None = None

    def steps_per_stage(self) -> dict:
        out = {s: 0 for s in ALL_STAGES}
        for step in self.steps:
            out[step.stage] += 1
        return out

    def write_jsonl(self, path) -> None:
        with open(path, "w") as f:
            for step in self.steps:
                f.write(json.dumps(step.to_json()) + "\n")


def _argmin_score(scores) -> int:
    """First strict minimum; candidates are enumerated layer-ascending with
    ATTN before MLP, which is the documented tie-break order."""
    best = 0
    for i in range(1, len(scores)):
        if scores[i].score < scores[best].score:
            best = i
    return best


def prune_depth(mdl: TransformerModel, tau_stop: float, calib: CalibrationSet,
                metric: Metric = Metric.PERPLEXITY,
                dense_descriptor: ArchDescriptor | None = None) -> list:
    """Remove whole blocks, lowest masked perplexity first, until the pruning
    ratio reaches tau_stop. Mutates mdl.descriptor; returns the trace steps."""
    dense = dense_descriptor if dense_descriptor is not None else mdl.descriptor.copy()
    cfg = mdl.config
    steps = []
    ratio = pruning_ratio(mdl.descriptor, dense, cfg)
    while ratio < tau_stop:
        candidates = mdl.descriptor.present_blocks()
        if not candidates:
            raise ExhaustionError(f"no blocks left at ratio {ratio:.4f} < {tau_stop:.4f}")
        scores = importance_mod.score_all(mdl, [(b, None) for b in candidates], calib, metric)
        best = scores[_argmin_score(scores)]
        mdl.descriptor = model_mod.descriptor_without_block(mdl.descriptor, best.block)
        ratio = pruning_ratio(mdl.descriptor, dense, cfg)
        steps.append(TraceStep(STAGE_BLOCK, best.block.layer, best.block.kind, None,
                               best.score, ratio))
    return steps


def prune_width(mdl: TransformerModel, kind: str, tau_stop: float, group_units: int,
                calib: CalibrationSet, metric: Metric = Metric.PERPLEXITY,
                dense_descriptor: ArchDescriptor | None = None) -> list:
    """Trim the trailing group_units (channels, or query heads) off the least
    important block of the given kind until the ratio reaches tau_stop.
    Blocks trimmed to zero width become absent."""
    if kind not in (ATTN, MLP):
        raise InputError(f"unknown width kind {kind!r}")
    if group_units < 1:
        raise InputError("group_units must be >= 1")
    dense = dense_descriptor if dense_descriptor is not None else mdl.descriptor.copy()
    cfg = mdl.config
    stage = STAGE_MLP if kind == MLP else STAGE_ATTN
    steps = []
    ratio = pruning_ratio(mdl.descriptor, dense, cfg)
    while ratio < tau_stop:
        candidates = [b for b in mdl.descriptor.present_blocks(kind)
                      if mdl.descriptor.kept_width(b) >= group_units]
        if not candidates:
            raise ExhaustionError(f"no {kind} width left at ratio {ratio:.4f} < {tau_stop:.4f}")
        scores = importance_mod.score_all(mdl, [(b, group_units) for b in candidates],
                                          calib, metric)
        best = scores[_argmin_score(scores)]
        mdl.descriptor = model_mod.descriptor_with_trim(mdl.descriptor, cfg, best.block,
                                                        group_units)
        ratio = pruning_ratio(mdl.descriptor, dense, cfg)
        steps.append(TraceStep(stage, best.block.layer, best.block.kind, group_units,
                               best.score, ratio))
    return steps


def prune(mdl: TransformerModel, cfg: PruneConfig, calib: CalibrationSet,
          metric: Metric = Metric.PERPLEXITY) -> tuple:
    """Full multidimensional run: enabled stages in order against cumulative
    thresholds, one weight reordering before the first width stage, then
    materialization. Returns (pruned model, PruneTrace).

    Per-stage calibration subsets are sampled deterministically from `calib`
    (sizes clamped to what is available) and reused across the iterations of
    the stage so scores stay comparable.
    """
    cfg.validate(mdl.config)
    work = mdl.clone()
    dense = mdl.descriptor.copy()
    depth_set = calib.sample(min(cfg.depth_calib_samples, calib.sample_count), (cfg.seed, 0))
    width_set = calib.sample(min(cfg.width_calib_samples, calib.sample_count), (cfg.seed, 1))
    g_mlp = cfg.resolved_g_mlp(mdl.config)
    g_attn_heads = cfg.g_attn * mdl.config.group_size
    trace = PruneTrace()
    reordered = False
    for stage, threshold in stage_thresholds(cfg):
        if stage != STAGE_BLOCK and not reordered:
            reorder_mod.apply_reordering(work, cfg.reorder_metric, width_set)
            reordered = True
        if stage == STAGE_BLOCK:
            trace.steps += prune_depth(work, threshold, depth_set, metric, dense)
        elif stage == STAGE_MLP:
            trace.steps += prune_width(work, MLP, threshold, g_mlp, width_set, metric, dense)
        else:
            trace.steps += prune_width(work, ATTN, threshold, g_attn_heads, width_set,
                                       metric, dense)
    pruned = model_mod.materialize(work, work.descriptor)
    trace.final_descriptor = work.descriptor.copy()
    trace.final_ppl = perplexity(pruned, calib)
    return pruned, trace
