"""Heads-only AdamW training on hidden states from the frozen streaming decoder."""
from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .cache import CachePolicy
from .core import Config, FormatError, Prng, encode_text
from .datagen import Dataset, Video
from .decoder import DecoderWeights
from .heads import (HeadBatch, HeadWeights, LossComponents, batch_losses, grad_heads,
                    init_heads, loss_total)
from .stream import build_decoder, stream_hidden


def lr_at(step: int, total_steps: int, base_lr: float, warmup_ratio: float = 0.05) -> float:
    """Linear warmup over ceil(total * ratio) steps, then cosine decay to zero."""
    if not 0 <= step <= total_steps:
        raise ValueError("step must lie in [0, total_steps]")
    warm = math.ceil(total_steps * warmup_ratio)
    if step < warm:
        return base_lr * step / warm
    span = total_steps - warm
    if span == 0:
        return base_lr
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * (step - warm) / span))


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    norm = global_norm(grads)
    if max_norm > 0 and norm > max_norm:
        s = max_norm / norm
        return {k: g * s for k, g in grads.items()}, norm
    return grads, norm


@dataclass
class AdamW:
    lr: float
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0

    def update(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float | None = None):
        """In-place decoupled-weight-decay Adam step."""
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        self.t += 1
        for k, p in params.items():
            g = grads[k]
            m = self.m.setdefault(k, np.zeros_like(p))
            v = self.v.setdefault(k, np.zeros_like(p))
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            m_hat = m / (1 - b1 ** self.t)
            v_hat = v / (1 - b2 ** self.t)
            if self.weight_decay:
                p -= lr * self.weight_decay * p
            p -= lr * m_hat / (np.sqrt(v_hat) + self.eps)


# ---------------------------------------------------------------------------
# windows


def _lm_request(video: Video, lo: int, hi: int, rng: Prng, rate: float, max_tokens: int):
    """Pick a captioned, non-degraded frame in [lo, hi) for LM supervision, or None."""
    if rng.uniform() >= rate:
        return None
    mask = video.mask
    cands = [t for t in range(lo, hi) if not mask[t] and video.caption_at(t) is not None]
    if not cands:
        return None
    t = cands[rng.randint(len(cands))]
    return t, encode_text(video.caption_at(t))[:max_tokens]


def video_windows(video: Video, decoder: DecoderWeights, cfg: Config, rng: Prng) -> list[HeadBatch]:
    """Fixed tiles of ``train.window`` frames over one streamed video.

    Hidden states come from one causal pass with the configured cache, so
    every window only sees its own and earlier frames. LM supervision is
    drawn once per window (Bernoulli ``train.lm_rate``).
    """
    tc = cfg.train
    T = video.T
    bounds = [(s, min(s + tc.window, T)) for s in range(0, T, tc.window)]
    requests = {}
    for lo, hi in bounds:
        req = _lm_request(video, lo, hi, rng, tc.lm_rate, tc.lm_max_tokens)
        if req:
            requests[req[0]] = req[1]
    trace = stream_hidden(decoder, CachePolicy.from_config(cfg.cache), video.features, video.query,
                          cfg.system_prompt, requests)
    ok = ~video.mask
    out = []
    for lo, hi in bounds:
        probe = next((p for t, p in trace.probes.items() if lo <= t < hi), None)
        out.append(HeadBatch(
            h=trace.hidden[lo:hi], r=video.r[lo:hi], i=video.i[lo:hi],
            tv_valid=(ok[lo + 1:hi] & ok[lo:hi - 1]).astype(np.float64),
            lm_h=None if probe is None else probe.h,
            lm_targets=None if probe is None else probe.targets,
        ))
    return out


def build_windows(videos: list[Video], decoder: DecoderWeights, cfg: Config, rng: Prng) -> list[HeadBatch]:
    out = []
    for k, v in enumerate(videos):
        out.extend(video_windows(v, decoder, cfg, rng.fork(k)))
    return out


def mean_losses(heads: HeadWeights, windows: list[HeadBatch], cfg: Config) -> tuple[LossComponents, float]:
    """Component and total losses averaged over windows."""
    comps = [batch_losses(heads, w, cfg.heads, cfg.loss) for w in windows]
    mean = LossComponents(*(float(np.mean([getattr(c, f) for c in comps]))
                            for f in ("relevance_total", "info", "uncertainty", "lm")))
    total = float(np.mean([loss_total(c, cfg.loss) for c in comps]))
    return mean, total


# ---------------------------------------------------------------------------
# loop


@dataclass
class TraceRow:
    step: int
    lr: float
    grad_norm: float
    components: LossComponents
    total: float


@dataclass
class TrainResult:
    heads: HeadWeights
    trace: list[TraceRow]
    windows: list[HeadBatch]


def train_on_windows(windows: list[HeadBatch], cfg: Config, heads: HeadWeights, rng: Prng) -> TrainResult:
    if not windows:
        raise ValueError("no training windows")
    tc = cfg.train
    heads = heads.copy()
    params = heads.params()
    opt = AdamW(tc.lr, tuple(tc.betas), tc.eps, tc.weight_decay)
    order: list[int] = []
    trace = []
    for s in range(1, tc.steps + 1):
        acc = {k: np.zeros_like(p) for k, p in params.items()}
        comps = []
        for _ in range(tc.grad_accum):
            if not order:  # new epoch, seeded shuffle
                order = list(range(len(windows)))
                for j in range(len(order) - 1, 0, -1):
                    r = rng.randint(j + 1)
                    order[j], order[r] = order[r], order[j]
            w = windows[order.pop()]
            comps.append(batch_losses(heads, w, cfg.heads, cfg.loss))
            for k, g in grad_heads(heads, w, cfg.heads, cfg.loss).items():
                acc[k] += g / tc.grad_accum
        acc, norm = clip_by_global_norm(acc, tc.grad_clip)
        lr = lr_at(s, tc.steps, tc.lr, tc.warmup_ratio)
        opt.update(params, acc, lr)
        mean = LossComponents(*(float(np.mean([getattr(c, f) for c in comps]))
                                for f in ("relevance_total", "info", "uncertainty", "lm")))
        trace.append(TraceRow(s, lr, norm, mean, float(np.mean([loss_total(c, cfg.loss) for c in comps]))))
    return TrainResult(heads, trace, windows)


def train_heads(dataset: Dataset, cfg: Config, decoder: DecoderWeights | None = None,
                heads: HeadWeights | None = None) -> TrainResult:
    """Train the four heads on the dataset's train split.

    Each optimizer step accumulates ``train.grad_accum`` windows, clips the
    global gradient norm, and applies AdamW with the warmup-cosine schedule.
    """
    videos = dataset.split("train")
    if not videos:
        raise ValueError("dataset has no training videos")
    rng = Prng(cfg.seed).fork(0x7EA1)
    decoder = decoder or build_decoder(cfg)
    if heads is None:
        heads = init_heads(decoder.hidden, cfg.decoder.vocab, rng.fork(1), cfg.heads)
    windows = build_windows(videos, decoder, cfg, rng.fork(2))
    return train_on_windows(windows, cfg, heads, rng.fork(3))


# ---------------------------------------------------------------------------
# artifacts

_MAGIC = "STREAMHL-HEADS 1"


def save_heads(path: str | os.PathLike, heads: HeadWeights):
    """Text header (magic line + JSON shapes) then float64 little-endian blobs in head order."""
    meta = {"params": [[k, list(getattr(heads, k).shape)] for k in HeadWeights.PARAMS],
            "l_min": heads.l_min, "l_max": heads.l_max, "delta": heads.delta}
    with open(path, "wb") as fh:
        fh.write(f"{_MAGIC}\n{json.dumps(meta)}\n".encode("ascii"))
        for k in HeadWeights.PARAMS:
            fh.write(np.ascontiguousarray(getattr(heads, k), dtype="<f8").tobytes())


def load_heads(path: str | os.PathLike) -> HeadWeights:
    with open(path, "rb") as fh:
        magic = fh.readline().decode("ascii", "replace").strip()
        if magic != _MAGIC:
            raise FormatError("not a heads checkpoint")
        try:
            meta = json.loads(fh.readline())
        except json.JSONDecodeError as exc:
            raise FormatError("malformed checkpoint header") from exc
        arrays = {}
        for name, shape in meta["params"]:
            n = int(np.prod(shape))
            buf = fh.read(8 * n)
            if len(buf) != 8 * n:
                raise FormatError(f"checkpoint truncated in {name}")
            arrays[name] = np.frombuffer(buf, dtype="<f8").reshape(shape).astype(np.float64)
        if fh.read(1):
            raise FormatError("trailing bytes after checkpoint blobs")
    return HeadWeights(*(arrays[k] for k in HeadWeights.PARAMS), meta["l_min"], meta["l_max"], meta["delta"])


def write_trace(path: str | os.PathLike, trace: list[TraceRow]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "lr", "grad_norm", "relevance_total", "info", "uncertainty", "lm", "total"])
        for row in trace:
            c = row.components
            w.writerow([row.step, repr(row.lr), repr(row.grad_norm), repr(c.relevance_total),
                        repr(c.info), repr(c.uncertainty), repr(c.lm), repr(row.total)])
