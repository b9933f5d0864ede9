"""Weight reordering: sort MLP channels and KV head groups by importance so
the least important sit last, where width pruning trims.

A channel's score aggregates every weight slice that would be deleted with
it (gate row, up row, down column); a head group's score aggregates its
q/k/v slices and wo column blocks. Reordering applies one consistent
permutation to all paired tensors, so the forward function is unchanged up
to float reassociation.
"""

from __future__ import annotations

from enum import Enum

import numpy as np

from . import calib as calib_mod
from . import model as model_mod
from .calib import CalibrationSet
from .errors import InputError
from .model import TransformerModel


class ReorderMetric(Enum):
    L1_NORM = "l1"
    WANDA = "wanda"
    NONE = "none"


def collect_activation_stats(mdl: TransformerModel, calib: CalibrationSet) -> dict:
    """Per-layer L2 norms, over all calibration tokens, of the activations
    feeding w_down (per MLP channel) and wo (per attention output feature)."""
    sums: dict = {}

    def tap(layer, name, x):
        key = (layer, name)
        acc = sums.get(key)
        sq = np.sum(np.square(x.astype(np.float64)), axis=0)
        sums[key] = sq if acc is None else acc + sq

    for seq in calib.sequences:
        model_mod.forward(mdl, seq, tap=tap)
    return {key: np.sqrt(val) for key, val in sums.items()}


def _wanda_cols(w: np.ndarray, x_norms: np.ndarray) -> np.ndarray:
    # score of column c: sum_j |w[j, c]| * ||X_c||_2
    return np.abs(w.astype(np.float64)).sum(axis=0) * x_norms


def mlp_channel_scores(mdl: TransformerModel, layer: int, metric: ReorderMetric,
                       calib: CalibrationSet | None = None,
                       act_norms: dict | None = None) -> np.ndarray:
    """One score per kept MLP channel of the layer."""
    ls = mdl.descriptor.layers[layer]
    if not ls.mlp_present:
        raise InputError(f"layer {layer} has no MLP block")
    c = ls.mlp_channels_kept
    p = f"layers.{layer}."
    gate = mdl.weights[p + "w_gate"][:c].astype(np.float64)
    up = mdl.weights[p + "w_up"][:c].astype(np.float64)
    down = mdl.weights[p + "w_down"][:, :c].astype(np.float64)
    if metric is ReorderMetric.L1_NORM:
        return np.abs(gate).sum(axis=1) + np.abs(up).sum(axis=1) + np.abs(down).sum(axis=0)
    if metric is ReorderMetric.WANDA:
        norms = _resolve_norms(mdl, metric, calib, act_norms)
        x = norms.get((layer, "mlp_in"))
        if x is None:
            raise InputError(f"no activation statistics for layer {layer} mlp")
        return _wanda_cols(down, x)
    raise InputError(f"no channel scores for metric {metric}")


def head_scores(mdl: TransformerModel, layer: int, metric: ReorderMetric,
                calib: CalibrationSet | None = None,
                act_norms: dict | None = None) -> np.ndarray:
    """One score per kept KV group of the layer (per head under MHA)."""
    ls = mdl.descriptor.layers[layer]
    if not ls.attn_present:
        raise InputError(f"layer {layer} has no attention block")
    config = mdl.config
    hd = config.head_dim
    gs = config.group_size
    kv = ls.kv_heads_kept
    p = f"layers.{layer}."
    wq = mdl.weights[p + "wq"][: ls.heads_kept * hd].astype(np.float64)
    wk = mdl.weights[p + "wk"][: kv * hd].astype(np.float64)
    wv = mdl.weights[p + "wv"][: kv * hd].astype(np.float64)
    wo = mdl.weights[p + "wo"][:, : ls.heads_kept * hd].astype(np.float64)
    if metric is ReorderMetric.L1_NORM:
        q_per_head = np.abs(wq).reshape(ls.heads_kept, hd * config.hidden).sum(axis=1)
        o_per_head = np.abs(wo).reshape(config.hidden, ls.heads_kept, hd).sum(axis=(0, 2))
        kv_rows = (np.abs(wk) + np.abs(wv)).reshape(kv, hd * config.hidden).sum(axis=1)
        per_group_q = (q_per_head + o_per_head).reshape(kv, gs).sum(axis=1)
        return per_group_q + kv_rows
    if metric is ReorderMetric.WANDA:
        norms = _resolve_norms(mdl, metric, calib, act_norms)
        x = norms.get((layer, "attn_out"))
        if x is None:
            raise InputError(f"no activation statistics for layer {layer} attention")
        per_col = _wanda_cols(wo, x)
        return per_col.reshape(kv, gs * hd).sum(axis=1)
    raise InputError(f"no head scores for metric {metric}")


def _resolve_norms(mdl, metric, calib, act_norms):
    if act_norms is not None:
        return act_norms
    if calib is None:
        raise InputError("the wanda metric requires a calibration set")
    return collect_activation_stats(mdl, calib)


def _descending(scores: np.ndarray) -> np.ndarray:
    # stable: ties keep their original relative order
    return np.argsort(-scores, kind="stable")


def apply_reordering(mdl: TransformerModel, metric: ReorderMetric,
                     calib: CalibrationSet | None = None) -> list:
    """Permute channels and KV groups of every present block into descending
    score order, most important first. Mutates the model's weights in place
    and returns the per-layer permutation report.

    Metric NONE leaves the model bit-identical and reports identity
    permutations.
    """
    config = mdl.config
    hd = config.head_dim
    gs = config.group_size
    act_norms = None
    if metric is ReorderMetric.WANDA:
        if calib is None:
            raise InputError("the wanda metric requires a calibration set")
        act_norms = collect_activation_stats(mdl, calib)
    report = []
    for layer, ls in enumerate(mdl.descriptor.layers):
        entry = {"layer": layer, "mlp_channels": None, "kv_groups": None}
        p = f"layers.{layer}."
        if ls.mlp_present and ls.mlp_channels_kept > 0:
            c = ls.mlp_channels_kept
            if metric is ReorderMetric.NONE:
                perm = np.arange(c)
            else:
                perm = _descending(mlp_channel_scores(mdl, layer, metric, act_norms=act_norms))
                mdl.weights[p + "w_gate"][:c] = mdl.weights[p + "w_gate"][:c][perm]
                mdl.weights[p + "w_up"][:c] = mdl.weights[p + "w_up"][:c][perm]
                mdl.weights[p + "w_down"][:, :c] = mdl.weights[p + "w_down"][:, :c][:, perm]
            entry["mlp_channels"] = perm.tolist()
        if ls.attn_present and ls.heads_kept > 0:
            kv = ls.kv_heads_kept
            if metric is ReorderMetric.NONE:
                gperm = np.arange(kv)
            else:
                gperm = _descending(head_scores(mdl, layer, metric, act_norms=act_norms))
                hperm = (gperm[:, None] * gs + np.arange(gs)).ravel()
                qrows = (hperm[:, None] * hd + np.arange(hd)).ravel()
                kvrows = (gperm[:, None] * hd + np.arange(hd)).ravel()
                nq = ls.heads_kept * hd
                nkv = kv * hd
                mdl.weights[p + "wq"][:nq] = mdl.weights[p + "wq"][:nq][qrows]
                mdl.weights[p + "wk"][:nkv] = mdl.weights[p + "wk"][:nkv][kvrows]
                mdl.weights[p + "wv"][:nkv] = mdl.weights[p + "wv"][:nkv][kvrows]
                mdl.weights[p + "wo"][:, :nq] = mdl.weights[p + "wo"][:, :nq][:, qrows]
            entry["kv_groups"] = gperm.tolist()
        report.append(entry)
    return report
