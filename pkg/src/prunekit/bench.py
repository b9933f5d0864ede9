"""Wall-clock comparison of dense vs pruned inference.

Prefill times full-prompt forwards; decode times token-by-token generation
against the key/value cache. Cache correctness is asserted against full
recomputation before any timing, since decode numbers are meaningless if the
cache drifts.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import model as model_mod
from .errors import InputError
from .model import KVCache, TransformerModel


@dataclass
class PhaseTiming:
    prefill_seconds: float
    decode_seconds: float
    prefill_tokens: int
    decode_tokens: int

    @property
    def prefill_tps(self) -> float:
        return self.prefill_tokens / self.prefill_seconds

    @property
    def decode_tps(self) -> float:
        return self.decode_tokens / self.decode_seconds


def check_decode_consistency(mdl: TransformerModel, seed: int = 0, prompt_len: int = 16,
                             new_tokens: int = 4, tol: float = 1e-4) -> float:
    """Greedy-decode with the cache and compare every step's logits against a
    full recompute. Returns the max abs difference; raises above tol."""
    rng = np.random.default_rng(seed)
    prompt = rng.integers(0, mdl.config.vocab_size, size=prompt_len).tolist()
    cache = KVCache(mdl, prompt_len + new_tokens)
    logits = model_mod.prefill(mdl, prompt, cache)
    full = model_mod.forward(mdl, prompt)
    worst = float(np.max(np.abs(logits - full)))
    tokens = list(prompt)
    last = logits[-1]
    for _ in range(new_tokens):
        nxt = int(np.argmax(last))
        tokens.append(nxt)
        last = model_mod.decode_step(mdl, nxt, cache)
        ref = model_mod.forward(mdl, tokens)[-1]
        worst = max(worst, float(np.max(np.abs(last - ref))))
    if worst > tol:
        raise InputError(f"kv-cache decode drifts from full recompute: {worst:.2e} > {tol:.0e}")
    return worst


def _time_model(mdl: TransformerModel, prompts: np.ndarray, new_tokens: int,
                n_batches: int, warmup: int) -> PhaseTiming:
    batch, prompt_len = prompts.shape
    prefill_s = 0.0
    decode_s = 0.0
    for it in range(warmup + n_batches):
        timed = it >= warmup
        caches = []
        lasts = []
        t0 = time.perf_counter()
        for b in range(batch):
            cache = KVCache(mdl, prompt_len + new_tokens)
            logits = model_mod.prefill(mdl, prompts[b], cache)
            caches.append(cache)
            lasts.append(logits[-1])
        t1 = time.perf_counter()
        for b in range(batch):
            last = lasts[b]
            for _ in range(new_tokens):
                nxt = int(np.argmax(last))
                last = model_mod.decode_step(mdl, nxt, caches[b])
        t2 = time.perf_counter()
        if timed:
            prefill_s += t1 - t0
            decode_s += t2 - t1
    return PhaseTiming(prefill_s, decode_s, batch * prompt_len * n_batches,
                       batch * new_tokens * n_batches)


def run_benchmark(dense: TransformerModel, pruned: TransformerModel, prompt_len: int = 512,
                  new_tokens: int = 16, batch: int = 1, n_batches: int = 10,
                  warmup: int = 2, seed: int = 0) -> dict:
    """Measure both models on identical random prompts and report per-phase
    throughput plus pruned-over-dense speedups."""
    if prompt_len < 1 or new_tokens < 1 or batch < 1 or n_batches < 1:
        raise InputError("benchmark sizes must be >= 1")
    check_decode_consistency(dense, seed)
    check_decode_consistency(pruned, seed)
    rng = np.random.default_rng(seed)
    vocab = min(dense.config.vocab_size, pruned.config.vocab_size)
    prompts = rng.integers(0, vocab, size=(batch, prompt_len))
    t_dense = _time_model(dense, prompts, new_tokens, n_batches, warmup)
    t_pruned = _time_model(pruned, prompts, new_tokens, n_batches, warmup)
    return {
        "batch": batch,
        "prompt_len": prompt_len,
        "new_tokens": new_tokens,
        "n_batches": n_batches,
        "dense": t_dense,
        "pruned": t_pruned,
        "prefill_speedup": t_dense.prefill_seconds / t_pruned.prefill_seconds,
        "decode_speedup": t_dense.decode_seconds / t_pruned.decode_seconds,
    }
