"""Online scoring session: prefill once, then one frame in, one record out."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .cache import CachePolicy, KVCache
from .core import Config, DimensionError, Prng, ScoreRecord, encode_text
from .decoder import DecoderWeights, init_decoder, new_cache, prefill, step
from .fusion import FusionParams, fuse, resolve
from .heads import HeadWeights, forward_batch, forward_heads


class MemoryCeilingError(RuntimeError):
    """The cache retained more entries than its policy allows."""


def build_decoder(cfg: Config) -> DecoderWeights:
    """Frozen decoder weights derived from the config seed."""
    return init_decoder(cfg.decoder, Prng(cfg.seed).fork(0xDEC0))


@dataclass
class StreamSession:
    decoder: DecoderWeights
    heads: HeadWeights
    params: FusionParams
    policy: CachePolicy
    query: str
    system_prompt: str = ""
    cache: KVCache = field(init=False)
    t: int = field(init=False, default=0)

    def __post_init__(self):
        self.cache = new_cache(self.decoder, self.policy)
        prefill(self.decoder, encode_text(self.query), self.cache, encode_text(self.system_prompt))

    def push(self, frame: np.ndarray) -> ScoreRecord:
        frame = np.asarray(frame, dtype=np.float64)
        if frame.shape != (self.decoder.config.dim,):
            raise DimensionError(f"frame has shape {frame.shape}, expected ({self.decoder.config.dim},)")
        h = step(self.decoder, frame, self.cache)
        if len(self.cache) > self.cache.memory_ceiling():
            raise MemoryCeilingError(
                f"cache holds {len(self.cache)} entries, ceiling is {self.cache.memory_ceiling()}")
        out = forward_heads(self.heads, h)
        rec = ScoreRecord(self.t, out.r_hat, out.i_hat, out.l_clamped,
                          fuse(out.i_hat, out.r_hat, out.l_clamped, self.params))
        self.t += 1
        return rec

    def run(self, frames: Iterable[np.ndarray], emit: Callable[[ScoreRecord], None] | None = None) -> list[ScoreRecord]:
        out = []
        for f in frames:
            rec = self.push(f)
            if emit is not None:
                emit(rec)
            out.append(rec)
        return out


def session_from_config(cfg: Config, heads: HeadWeights, query: str,
                        decoder: DecoderWeights | None = None) -> StreamSession:
    return StreamSession(decoder or build_decoder(cfg), heads, resolve(cfg.fusion),
                         CachePolicy.from_config(cfg.cache), query, cfg.system_prompt)


# ---------------------------------------------------------------------------
# offline helpers for training and evaluation


@dataclass
class LmProbe:
    """Teacher-forced caption states forked from the stream at frame ``t``."""
    t: int
    h: np.ndarray        # (k, hidden): state after frame t, then after each fed token
    targets: np.ndarray  # (k,) caption token ids


@dataclass
class StreamTrace:
    hidden: np.ndarray                 # (T, hidden)
    probes: dict[int, LmProbe]
    max_retained: int


def stream_hidden(decoder: DecoderWeights, policy: CachePolicy, frames: np.ndarray, query: str,
                  system_prompt: str = "", lm_requests: dict[int, Sequence[int]] | None = None) -> StreamTrace:
    """Hidden state for every frame of one video, plus optional LM probes.

    ``lm_requests`` maps a frame index to caption tokens; at that frame the
    cache is cloned and the tokens are teacher-forced on the clone, so the
    main stream never sees them.
    """
    lm_requests = lm_requests or {}
    cache = new_cache(decoder, policy)
    prefill(decoder, encode_text(query), cache, encode_text(system_prompt))
    H = np.zeros((len(frames), decoder.hidden))
    probes = {}
    for t, f in enumerate(frames):
        H[t] = step(decoder, f, cache)
        tokens = lm_requests.get(t)
        if tokens:
            fork = cache.clone()
            hs = [H[t]]
            for tok in tokens[:-1]:
                hs.append(step(decoder, int(tok), fork))
            probes[t] = LmProbe(t, np.array(hs), np.asarray(tokens, dtype=np.int64))
    return StreamTrace(H, probes, cache.max_retained)


def score_hidden(heads: HeadWeights, H: np.ndarray, params: FusionParams) -> dict[str, np.ndarray]:
    out = forward_batch(heads, H)
    out["score"] = fuse(out["i_hat"], out["r_hat"], out["l_clamped"], params)
    return out
