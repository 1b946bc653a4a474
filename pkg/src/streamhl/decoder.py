"""Toy causal transformer decoder that reads keys/values through a cache.

Pre-norm blocks, multi-head attention with sinusoidal positions added to
queries and keys at attention time, GELU MLP, final layer norm. Positions are
the slot index inside the retained cache view, not the absolute token index,
so evicting a token shifts every later slot down by one.

Frames are embedded by a single linear projection (one token per frame); text
tokens come from a byte-level embedding table.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .cache import KVCache
from .core import DecoderConfig, DimensionError, Prng, SessionError

LN_EPS = 1e-5

Token = Union[int, np.integer, np.ndarray]


@dataclass(frozen=True)
class LayerWeights:
    ln1_g: np.ndarray
    ln1_b: np.ndarray
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    ln2_g: np.ndarray
    ln2_b: np.ndarray
    w1: np.ndarray
    w2: np.ndarray


@dataclass(frozen=True)
class DecoderWeights:
    config: DecoderConfig
    frame_proj: np.ndarray   # (dim, hidden)
    token_emb: np.ndarray    # (vocab, hidden)
    layers: tuple[LayerWeights, ...]
    lnf_g: np.ndarray
    lnf_b: np.ndarray

    @property
    def hidden(self) -> int:
        return self.config.hidden

    @property
    def d_head(self) -> int:
        return self.config.hidden // self.config.heads

    def zero_projections(self) -> "DecoderWeights":
        """Copy with every attention and MLP matrix zeroed (residual path only)."""
        layers = tuple(
            LayerWeights(l.ln1_g, l.ln1_b, *(_frozen(np.zeros_like(m)) for m in (l.wq, l.wk, l.wv, l.wo)),
                         l.ln2_g, l.ln2_b, _frozen(np.zeros_like(l.w1)), _frozen(np.zeros_like(l.w2)))
            for l in self.layers)
        return DecoderWeights(self.config, self.frame_proj, self.token_emb, layers, self.lnf_g, self.lnf_b)


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.setflags(write=False)
    return a


def init_decoder(config: DecoderConfig, rng: Prng) -> DecoderWeights:
    """Gaussian weights scaled by 1/sqrt(fan_in); norms start at gain 1, bias 0."""
    config.validate()
    h, m = config.hidden, config.hidden * config.mlp_ratio

    def mat(fan_in, fan_out):
        return _frozen(rng.gauss_array(fan_in, fan_out) / math.sqrt(fan_in))

    frame_proj = mat(config.dim, h)
    token_emb = mat(config.vocab, h)
    layers = []
    for _ in range(config.layers):
        layers.append(LayerWeights(
            _frozen(np.ones(h)), _frozen(np.zeros(h)),
            mat(h, h), mat(h, h), mat(h, h), mat(h, h),
            _frozen(np.ones(h)), _frozen(np.zeros(h)),
            mat(h, m), mat(m, h)))
    return DecoderWeights(config, frame_proj, token_emb, tuple(layers),
                          _frozen(np.ones(h)), _frozen(np.zeros(h)))


# ---------------------------------------------------------------------------
# primitives


def layer_norm(x: np.ndarray, g: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = x.shape[-1]
    if x.ndim == 1:  # per-token streaming path; fewer array ops
        c = x - x.sum() / d
        return c * (1.0 / math.sqrt(c.dot(c) / d + LN_EPS)) * g + b
    c = x - np.add.reduce(x, axis=-1, keepdims=True) / d
    var = np.add.reduce(c * c, axis=-1, keepdims=True) / d
    return c / np.sqrt(var + LN_EPS) * g + b


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * (x * x * x))))


_PE_TABLES: dict[int, np.ndarray] = {}


def _pe_table(n: int, d: int) -> np.ndarray:
    """First ``n`` rows of the sinusoidal table for width ``d`` (memoised, grows by doubling)."""
    table = _PE_TABLES.get(d)
    if table is None or len(table) < n:
        size = max(n, 2 * len(table) if table is not None else 256)
        table = sinusoidal(np.arange(size), d)
        table.setflags(write=False)
        _PE_TABLES[d] = table
    return table[:n]


def sinusoidal(positions: np.ndarray, d: int) -> np.ndarray:
    pos = np.asarray(positions, dtype=np.float64)[..., None]
    i = np.arange(d // 2, dtype=np.float64)
    angle = pos / np.power(10000.0, 2.0 * i / d)
    out = np.empty(pos.shape[:-1] + (d,))
    out[..., 0::2] = np.sin(angle)
    out[..., 1::2] = np.cos(angle)
    return out


def embed(weights: DecoderWeights, token: Token) -> np.ndarray:
    if isinstance(token, (int, np.integer)):
        tok = int(token)
        if not 0 <= tok < weights.config.vocab:
            raise DimensionError(f"token id {tok} outside vocab of {weights.config.vocab}")
        return weights.token_emb[tok].copy()
    x = np.asarray(token, dtype=np.float64)
    if x.shape != (weights.config.dim,):
        raise DimensionError(f"frame has shape {x.shape}, expected ({weights.config.dim},)")
    return x @ weights.frame_proj


def _attend(q: np.ndarray, q_pos: int, k: np.ndarray, v: np.ndarray, n_heads: int,
            tail: tuple[np.ndarray, np.ndarray] | None = None) -> np.ndarray:
    """q: (hidden,), k/v: (m, hidden). Positions: keys at 0..m-1, query at q_pos.

    ``tail`` is one extra (k, v) pair at slot m, so callers need not copy the
    cache to append the current token. Position codes enter the scores as a
    separate q.pe term rather than being added into a copy of the keys.
    """
    m0, hidden = k.shape
    m = m0 + (tail is not None)
    if m == 0:
        return np.zeros(hidden)
    dh = hidden // n_heads
    pe = _pe_table(max(m, q_pos + 1), dh)
    qh = q.reshape(n_heads, dh) + pe[q_pos]                         # (H, dh)
    scores = np.empty((n_heads, m))
    if m0:
        scores[:, :m0] = np.einsum("hd,mhd->hm", qh, k.reshape(m0, n_heads, dh)) + qh @ pe[:m0].T
    if tail is not None:
        scores[:, m0] = np.sum(qh * (tail[0].reshape(n_heads, dh) + pe[m0]), axis=1)
    scores /= math.sqrt(dh)
    scores -= scores.max(axis=1, keepdims=True)
    w = np.exp(scores)
    w /= w.sum(axis=1, keepdims=True)
    out = np.einsum("hm,mhd->hd", w[:, :m0], v.reshape(m0, n_heads, dh)) if m0 else np.zeros((n_heads, dh))
    if tail is not None:
        out = out + w[:, m0:] * tail[1].reshape(n_heads, dh)
    return out.reshape(hidden)


# ---------------------------------------------------------------------------
# incremental path


def step(weights: DecoderWeights, token_or_frame: Token, cache: KVCache, flag: bool = False) -> np.ndarray:
    """Process one token against the cache and return the final hidden state.

    The token's keys/values are appended to ``cache`` (``flag`` marks a query
    token for the dynamic sink). The token attends to the entries the policy
    retains after this append; if the policy drops the new token itself
    (static window), it attends to the retained entries only and takes the
    next free slot as its position.
    """
    cfg = weights.config
    if cache.n_layers != cfg.layers or cache.d_kv != cfg.hidden:
        raise DimensionError("cache shape does not match decoder configuration")
    x = embed(weights, token_or_frame)
    keep_old, keep_new = cache.preview(flag)
    n_old = int(keep_old.sum())
    q_pos = n_old  # slot of the new token, or the next free slot if it is dropped
    ks = np.empty((cfg.layers, cfg.hidden))
    vs = np.empty((cfg.layers, cfg.hidden))
    for li, lw in enumerate(weights.layers):
        a = layer_norm(x, lw.ln1_g, lw.ln1_b)
        q, k, v = a @ lw.wq, a @ lw.wk, a @ lw.wv
        ks[li], vs[li] = k, v
        k_old, v_old = cache.layer_kv(li, keep_old)
        x = x + _attend(q, q_pos, k_old, v_old, cfg.heads, (k, v) if keep_new else None) @ lw.wo
        b = layer_norm(x, lw.ln2_g, lw.ln2_b)
        x = x + gelu(b @ lw.w1) @ lw.w2
    cache.commit(ks, vs, flag, keep_old, keep_new)
    return layer_norm(x, weights.lnf_g, weights.lnf_b)


def prefill(weights: DecoderWeights, query_tokens: Sequence[int], cache: KVCache,
            system_tokens: Sequence[int] = ()) -> list[np.ndarray]:
    """Feed the system prompt then the task query into an empty cache.

    Query tokens are flagged so the dynamic policy keeps them as its sink;
    system-prompt tokens are not flagged and may be evicted.
    """
    if cache.seen:
        raise SessionError("prefill requires an empty cache")
    out = [step(weights, int(t), cache, flag=False) for t in system_tokens]
    out += [step(weights, int(t), cache, flag=True) for t in query_tokens]
    return out


def new_cache(weights: DecoderWeights, policy) -> KVCache:
    return KVCache(policy, weights.config.layers, weights.config.hidden)


# ---------------------------------------------------------------------------
# reference path


def masked_forward(weights: DecoderWeights, inputs: Sequence[Token],
                   retained: Sequence[Sequence[int]], block: int = 128) -> np.ndarray:
    """Full-sequence forward pass with explicit per-query attention sets.

    ``retained[t]`` lists the token ids query ``t`` may attend to. Key
    positions are their rank within that set; the query takes its own rank if
    it is in the set, else the next slot. Computed layer by layer as dense
    attention under a boolean mask (``block`` query rows at a time),
    independently of any cache object.
    """
    cfg = weights.config
    T = len(inputs)
    if len(retained) != T:
        raise ValueError("need one retained set per input")
    if T == 0:
        return np.zeros((0, cfg.hidden))
    x = np.stack([embed(weights, tok) for tok in inputs])
    H, dh = cfg.heads, cfg.hidden // cfg.heads
    pe = _pe_table(T + 1, dh)
    blocks = []
    for t0 in range(0, T, block):
        t1 = min(t0 + block, T)
        sets = [np.asarray(retained[t], dtype=np.int64) for t in range(t0, t1)]
        cols = np.unique(np.concatenate(sets + [np.arange(t0, t1)]))  # every id this block touches
        mask = np.zeros((t1 - t0, len(cols)), dtype=bool)
        for row, r in enumerate(sets):
            mask[row, np.searchsorted(cols, r)] = True
        rank = np.cumsum(mask, axis=1) - 1
        rows, self_col = np.arange(t1 - t0), np.searchsorted(cols, np.arange(t0, t1))
        q_pos = np.where(mask[rows, self_col], rank[rows, self_col], mask.sum(axis=1))
        blocks.append((t0, t1, cols, mask, np.maximum(rank, 0), q_pos))
    for lw in weights.layers:
        a = layer_norm(x, lw.ln1_g, lw.ln1_b)
        q, k, v = a @ lw.wq, a @ lw.wk, a @ lw.wv
        attn = np.zeros_like(x)
        for t0, t1, cols, mask, rank, q_pos in blocks:
            n = len(cols)
            qh = q[t0:t1].reshape(-1, H, dh) + pe[q_pos][:, None, :]             # (b, H, dh)
            kh = k[cols].reshape(n, H, dh)
            vh = v[cols].reshape(n, H, dh)
            qh_t = qh.transpose(1, 0, 2)                                         # (H, b, dh)
            scores = qh_t @ kh.transpose(1, 2, 0)                                # (H, b, n)
            pos = qh_t @ pe[:n].T                                                # (H, b, slot)
            scores += np.take_along_axis(pos, np.broadcast_to(rank, pos.shape), axis=2)
            scores /= math.sqrt(dh)
            scores = np.where(mask, scores, -np.inf)
            top = scores.max(axis=2, keepdims=True)
            w = np.exp(scores - np.where(np.isfinite(top), top, 0.0))
            den = w.sum(axis=2, keepdims=True)
            w = np.divide(w, den, out=np.zeros_like(w), where=den > 0)
            out = w @ vh.transpose(1, 0, 2)                                      # (H, b, dh)
            attn[t0:t1] = out.transpose(1, 0, 2).reshape(t1 - t0, cfg.hidden)
        x = x + attn @ lw.wo
        b = layer_norm(x, lw.ln2_g, lw.ln2_b)
        x = x + gelu(b @ lw.w1) @ lw.w2
    return layer_norm(x, weights.lnf_g, weights.lnf_b)


def causal_forward(weights: DecoderWeights, inputs: Sequence[Token]) -> np.ndarray:
    """Plain causal attention over the whole prefix (absolute positions)."""
    return masked_forward(weights, inputs, [range(t + 1) for t in range(len(inputs))])
