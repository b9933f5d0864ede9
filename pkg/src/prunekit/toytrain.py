"""Byte-level toy training so importance scores have something to measure.

Random-weight models score every block as equally unimportant; a few
thousand Adam steps on a byte corpus give the greedy stages a real signal.
Backprop is implemented here by hand for exactly this batched dense
architecture and nothing else; it is fixture manufacturing, not a public
training API.

The forward math mirrors model.forward (same norms, rotary convention,
grouped KV expansion, SiLU gating) so trained weights drop straight into the
inference path; a test pins the two implementations against each other.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import model as model_mod
from .errors import InputError, TrainingError
from .model import ModelConfig, TransformerModel


@dataclass
class TrainConfig:
    model: ModelConfig
    corpus_path: str
    steps: int
    batch: int = 16
    seq_len: int = 64
    lr: float = 1e-3
    clip_norm: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        if self.steps < 1:
            raise InputError("steps must be >= 1")
        if self.batch < 1 or self.seq_len < 2:
            raise InputError("batch must be >= 1 and seq_len >= 2")


_WORDS = (
    "the of and to in is that it was for on are with as his they be at one "
    "have this from or had by hot word but what some we can out other were "
    "all there when up use your how said an each she which do their time if "
    "will way about many then them write would like so these her long make "
    "thing see him two has look more day could go come did number sound no "
    "most people my over know water than call first who may down side been "
    "now find any new work part take get place made live where after back "
    "little only round man year came show every good me give our under name"
).split()


def synthetic_corpus(n_bytes: int, seed: int = 0) -> bytes:
    """Deterministic english-like word salad; enough structure for a small
    byte model to beat the uniform baseline by a wide margin."""
    rng = np.random.default_rng(seed)
    # zipf-ish: early words much more frequent
    w = 1.0 / np.arange(1, len(_WORDS) + 1)
    p = w / w.sum()
    parts = []
    size = 0
    while size < n_bytes:
        n = int(rng.integers(4, 12))
        words = rng.choice(len(_WORDS), size=n, p=p)
        sentence = " ".join(_WORDS[i] for i in words)
        sentence = sentence[0].upper() + sentence[1:] + (". " if rng.random() < 0.8 else ".\n")
        parts.append(sentence)
        size += len(sentence)
    return "".join(parts).encode("ascii")[:n_bytes]


def init_weights(config: ModelConfig, seed: int) -> TransformerModel:
    return model_mod.random_model(config, seed, init_scale=0.02,
                                  residual_scale=1.0 / math.sqrt(2.0 * config.n_layers))


# ---------------------------------------------------------------------------
# batched forward/backward


def _rope_pair(config, T, dtype):
    cos, sin = model_mod.rope_tables(config, T)
    # broadcast over (B, T, H, d2)
    return cos.astype(dtype)[None, :, None, :], sin.astype(dtype)[None, :, None, :]


def _rope_fwd(x, c, s):
    d2 = x.shape[-1] // 2
    x1, x2 = x[..., :d2], x[..., d2:]
    return np.concatenate([x1 * c - x2 * s, x2 * c + x1 * s], axis=-1)


def _rope_bwd(dy, c, s):
    d2 = dy.shape[-1] // 2
    d1, d2g = dy[..., :d2], dy[..., d2:]
    return np.concatenate([d1 * c + d2g * s, d2g * c - d1 * s], axis=-1)


def _rmsnorm_fwd(x, gamma, eps):
    r = 1.0 / np.sqrt(np.mean(np.square(x), axis=-1, keepdims=True) + eps)
    return x * r * gamma, r


def _rmsnorm_bwd(dy, x, r, gamma):
    dgamma = np.sum(dy * x * r, axis=(0, 1))
    t = dy * gamma
    dx = r * t - x * (r ** 3) * np.mean(x * t, axis=-1, keepdims=True)
    return dx, dgamma


def _softmax_last(x):
    e = np.exp(x - np.max(x, axis=-1, keepdims=True))
    return e / np.sum(e, axis=-1, keepdims=True)


def loss_and_grads(config: ModelConfig, weights: dict, ids: np.ndarray,
                   targets: np.ndarray) -> tuple:
    """Mean next-token NLL of a (B, T) batch and gradients for every tensor.

    Works at whatever dtype the weights carry; float64 weights give
    gradients accurate enough for finite-difference checks.
    """
    B, T = ids.shape
    dtype = weights["embed"].dtype
    eps = config.norm_eps
    hd, gs = config.head_dim, config.group_size
    Hq, Hkv = config.n_heads, config.n_kv_heads
    scale = 1.0 / math.sqrt(hd)
    cos, sin = _rope_pair(config, T, dtype)
    causal = np.triu(np.full((T, T), -np.inf, dtype=dtype), k=1)

    x = weights["embed"][ids]
    caches = []
    for i in range(config.n_layers):
        p = f"layers.{i}."
        a_in = x
        ah, ra = _rmsnorm_fwd(a_in, weights[p + "attn_norm"], eps)
        q = (ah @ weights[p + "wq"].T).reshape(B, T, Hq, hd)
        k = (ah @ weights[p + "wk"].T).reshape(B, T, Hkv, hd)
        v = (ah @ weights[p + "wv"].T).reshape(B, T, Hkv, hd)
        qr, kr = _rope_fwd(q, cos, sin), _rope_fwd(k, cos, sin)
        kx = np.repeat(kr, gs, axis=2)
        vx = np.repeat(v, gs, axis=2)
        qt = qr.transpose(0, 2, 1, 3)
        kt = kx.transpose(0, 2, 1, 3)
        vt = vx.transpose(0, 2, 1, 3)
        z = qt @ kt.transpose(0, 1, 3, 2)
        probs = _softmax_last(z * scale + causal)
        ot = probs @ vt
        o = ot.transpose(0, 2, 1, 3).reshape(B, T, Hq * hd)
        y = o @ weights[p + "wo"].T
        x1 = a_in + y
        m_in = x1
        mh, rm = _rmsnorm_fwd(m_in, weights[p + "mlp_norm"], eps)
        g = mh @ weights[p + "w_gate"].T
        u = mh @ weights[p + "w_up"].T
        sg = 1.0 / (1.0 + np.exp(-g))
        act = g * sg * u
        dn = act @ weights[p + "w_down"].T
        x = x1 + dn
        caches.append((a_in, ah, ra, qt, kt, vt, probs, o, m_in, mh, rm, g, u, sg, act))

    fh, rf = _rmsnorm_fwd(x, weights["final_norm"], eps)
    head = weights["embed"] if config.tied_embeddings else weights["lm_head"]
    logits = fh @ head.T

    logits64 = logits.astype(np.float64)
    m = np.max(logits64, axis=-1, keepdims=True)
    lse = m + np.log(np.sum(np.exp(logits64 - m), axis=-1, keepdims=True))
    logp = logits64 - lse
    n_tok = B * T
    loss = float(-logp[np.arange(B)[:, None], np.arange(T)[None, :], targets].mean())
    if not np.isfinite(loss):
        raise TrainingError("loss is not finite")

    probs_full = np.exp(logp)
    dlogits = probs_full
    dlogits[np.arange(B)[:, None], np.arange(T)[None, :], targets] -= 1.0
    dlogits = (dlogits / n_tok).astype(dtype)

    grads = {name: np.zeros_like(w) for name, w in weights.items()}
    grads_head = np.einsum("btv,btd->vd", dlogits, fh)
    if config.tied_embeddings:
        grads["embed"] += grads_head
    else:
        grads["lm_head"] += grads_head
    dfh = dlogits @ head
    dx, dgf = _rmsnorm_bwd(dfh, x, rf, weights["final_norm"])
    grads["final_norm"] += dgf

    for i in reversed(range(config.n_layers)):
        p = f"layers.{i}."
        a_in, ah, ra, qt, kt, vt, probs, o, m_in, mh, rm, g, u, sg, act = caches[i]
        # MLP half
        ddn = dx
        grads[p + "w_down"] += np.einsum("btd,bti->di", ddn, act)
        dact = ddn @ weights[p + "w_down"]
        du = dact * (g * sg)
        dg = dact * u * (sg * (1.0 + g * (1.0 - sg)))
        grads[p + "w_up"] += np.einsum("bti,btd->id", du, mh)
        grads[p + "w_gate"] += np.einsum("bti,btd->id", dg, mh)
        dmh = du @ weights[p + "w_up"] + dg @ weights[p + "w_gate"]
        dm_in, dgm = _rmsnorm_bwd(dmh, m_in, rm, weights[p + "mlp_norm"])
        grads[p + "mlp_norm"] += dgm
        dx1 = dx + dm_in
        # attention half
        dy = dx1
        grads[p + "wo"] += np.einsum("btd,bth->dh", dy, o)
        dot = (dy @ weights[p + "wo"]).reshape(B, T, Hq, hd).transpose(0, 2, 1, 3)
        dprobs = dot @ vt.transpose(0, 1, 3, 2)
        dvt = probs.transpose(0, 1, 3, 2) @ dot
        ds = probs * (dprobs - np.sum(dprobs * probs, axis=-1, keepdims=True))
        dz = ds * scale
        dqt = dz @ kt
        dkt = dz.transpose(0, 1, 3, 2) @ qt
        dqr = dqt.transpose(0, 2, 1, 3)
        dkx = dkt.transpose(0, 2, 1, 3)
        dvx = dvt.transpose(0, 2, 1, 3)
        dkr = dkx.reshape(B, T, Hkv, gs, hd).sum(axis=3)
        dv = dvx.reshape(B, T, Hkv, gs, hd).sum(axis=3)
        dq = _rope_bwd(dqr, cos, sin).reshape(B, T, Hq * hd)
        dk = _rope_bwd(dkr, cos, sin).reshape(B, T, Hkv * hd)
        dvf = dv.reshape(B, T, Hkv * hd)
        grads[p + "wq"] += np.einsum("bth,btd->hd", dq, ah)
        grads[p + "wk"] += np.einsum("bth,btd->hd", dk, ah)
        grads[p + "wv"] += np.einsum("bth,btd->hd", dvf, ah)
        dah = dq @ weights[p + "wq"] + dk @ weights[p + "wk"] + dvf @ weights[p + "wv"]
        da_in, dga = _rmsnorm_bwd(dah, a_in, ra, weights[p + "attn_norm"])
        grads[p + "attn_norm"] += dga
        dx = dx1 + da_in

    demb = np.zeros_like(weights["embed"])
    np.add.at(demb, ids, dx)
    grads["embed"] += demb
    return loss, grads


class _Adam:
    def __init__(self, weights, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in weights.items()}
        self.v = {k: np.zeros_like(v) for k, v in weights.items()}

    def step(self, weights, grads):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, w in weights.items():
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * np.square(g)
            w -= (self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)).astype(w.dtype)


def _clip_global(grads, max_norm):
    total = math.sqrt(sum(float(np.sum(np.square(g.astype(np.float64)))) for g in grads.values()))
    if total > max_norm > 0:
        s = max_norm / total
        for g in grads.values():
            g *= s
    return total


def train_toy(cfg: TrainConfig, out_dir=None) -> tuple:
    """Train from scratch on a byte corpus; returns (model, report) and
    writes a checkpoint when out_dir is given. Deterministic for a given
    config and seed."""
    cfg.validate()
    corpus = np.frombuffer(Path(cfg.corpus_path).read_bytes(), dtype=np.uint8)
    if corpus.size < cfg.seq_len + 2:
        raise InputError(f"corpus too small: {corpus.size} bytes")
    mdl = init_weights(cfg.model, cfg.seed)
    opt = _Adam(mdl.weights, cfg.lr)
    rng = np.random.default_rng((cfg.seed, 1))  # distinct stream from weight init
    first_loss = None
    loss = float("nan")
    for step in range(cfg.steps):
        starts = rng.integers(0, corpus.size - cfg.seq_len - 1, size=cfg.batch)
        windows = np.stack([corpus[s : s + cfg.seq_len + 1] for s in starts]).astype(np.int64)
        ids, targets = windows[:, :-1], windows[:, 1:]
        loss, grads = loss_and_grads(cfg.model, mdl.weights, ids, targets)
        if first_loss is None:
            first_loss = loss
        _clip_global(grads, cfg.clip_norm)
        opt.step(mdl.weights, grads)
    report = {"steps": cfg.steps, "first_loss": first_loss, "final_loss": loss,
              "final_train_ppl": math.exp(loss)}
    if out_dir is not None:
        model_mod.save_checkpoint(mdl, out_dir)
    return mdl, report
