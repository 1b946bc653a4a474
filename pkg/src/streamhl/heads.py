"""Prediction heads on the decoder state and their training losses.

Four linear heads read the final hidden state ``h``:

* relevance      ``r_hat = w_r . h``
* informativeness ``i_hat = softmax(h @ W_i)[1]``
* uncertainty    ``l_c = clamp(w_u . h, l_min, l_max)``, ``sigma^2 = exp(l_c)``
* language model ``logits = h @ W_lm``

Gradients are analytic and treat ``h`` as a constant (frozen backbone).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np

from .core import HeadConfig, LossWeights, Prng

PROB_FLOOR = 1e-12


@dataclass
class HeadWeights:
    w_r: np.ndarray    # (hidden,)
    w_i: np.ndarray    # (hidden, 2)
    w_u: np.ndarray    # (hidden,)
    w_lm: np.ndarray   # (hidden, vocab)
    l_min: float = -7.0
    l_max: float = 2.0
    delta: float = 1e-6

    PARAMS = ("w_r", "w_i", "w_u", "w_lm")

    def __post_init__(self):
        h = self.w_r.shape[0]
        if self.w_i.shape != (h, 2) or self.w_u.shape != (h,) or self.w_lm.shape[0] != h:
            raise ValueError("inconsistent head weight shapes")
        if not self.l_min < self.l_max:
            raise ValueError("l_min must be < l_max")
        if self.delta <= 0:
            raise ValueError("delta must be positive")

    @property
    def hidden(self) -> int:
        return self.w_r.shape[0]

    @property
    def vocab(self) -> int:
        return self.w_lm.shape[1]

    def params(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in self.PARAMS}

    def copy(self) -> "HeadWeights":
        return HeadWeights(*(getattr(self, k).copy() for k in self.PARAMS),
                           self.l_min, self.l_max, self.delta)

    def with_params(self, params: dict[str, np.ndarray]) -> "HeadWeights":
        return HeadWeights(*(np.array(params[k], dtype=np.float64) for k in self.PARAMS),
                           self.l_min, self.l_max, self.delta)


def init_heads(hidden: int, vocab: int, rng: Prng, cfg: HeadConfig | None = None,
               scale: float = 1.0) -> HeadWeights:
    cfg = cfg or HeadConfig()
    s = scale / math.sqrt(hidden)
    return HeadWeights(rng.gauss_array(hidden) * s, rng.gauss_array(hidden, 2) * s,
                       rng.gauss_array(hidden) * s, rng.gauss_array(hidden, vocab) * s,
                       cfg.l_min, cfg.l_max, cfg.delta)


def zero_heads(hidden: int, vocab: int, cfg: HeadConfig | None = None) -> HeadWeights:
    cfg = cfg or HeadConfig()
    return HeadWeights(np.zeros(hidden), np.zeros((hidden, 2)), np.zeros(hidden),
                       np.zeros((hidden, vocab)), cfg.l_min, cfg.l_max, cfg.delta)


@dataclass(frozen=True)
class HeadOutputs:
    r_hat: float
    i_hat: float
    l_clamped: float
    sigma_sq: float
    lm_logits: np.ndarray = field(repr=False)


def _softmax_pos(z: np.ndarray) -> np.ndarray:
    """Positive-class probability of a 2-way softmax, stable for large logits."""
    return 0.5 * (1.0 + np.tanh(0.5 * (z[..., 1] - z[..., 0])))


def forward_heads(weights: HeadWeights, h_t: np.ndarray) -> HeadOutputs:
    h_t = np.asarray(h_t, dtype=np.float64)
    if h_t.shape != (weights.hidden,):
        raise ValueError(f"hidden state has shape {h_t.shape}, expected ({weights.hidden},)")
    l_c = float(np.clip(h_t @ weights.w_u, weights.l_min, weights.l_max))
    return HeadOutputs(
        r_hat=float(h_t @ weights.w_r),
        i_hat=float(_softmax_pos(h_t @ weights.w_i)),
        l_clamped=l_c,
        sigma_sq=math.exp(l_c),
        lm_logits=h_t @ weights.w_lm,
    )


def forward_batch(weights: HeadWeights, H: np.ndarray) -> dict[str, np.ndarray]:
    """Vectorised heads over a (T, hidden) block; omits LM logits."""
    H = np.asarray(H, dtype=np.float64)
    return {
        "r_hat": H @ weights.w_r,
        "i_hat": _softmax_pos(H @ weights.w_i),
        "l_clamped": np.clip(H @ weights.w_u, weights.l_min, weights.l_max),
    }


# ---------------------------------------------------------------------------
# losses


def smooth_l1(pred, target, beta: float = 1.0):
    d = np.abs(np.asarray(pred, dtype=np.float64) - target)
    return np.where(d < beta, 0.5 * d * d / beta, d - 0.5 * beta)


def tv_penalty(r_hat: np.ndarray, valid: np.ndarray | None = None) -> float:
    """Mean squared first difference over adjacent valid pairs; ``valid`` has T-1 entries."""
    r_hat = np.asarray(r_hat, dtype=np.float64)
    T = len(r_hat)
    if T < 2:
        return 0.0
    diff = np.diff(r_hat)
    v = np.ones(T - 1) if valid is None else np.asarray(valid, dtype=np.float64)
    if v.shape != (T - 1,):
        raise ValueError("valid mask must have T-1 entries")
    return float(np.sum(v * diff * diff) / (T - 1))


def loss_relevance_total(r_hat, r, lam_tv: float = 0.05, valid=None, beta: float = 1.0) -> float:
    r_hat = np.atleast_1d(np.asarray(r_hat, dtype=np.float64))
    r = np.atleast_1d(np.asarray(r, dtype=np.float64))
    if r_hat.size == 0:
        raise ValueError("empty window")
    if r_hat.shape != r.shape:
        raise ValueError("predictions and targets are misaligned")
    return float(np.mean(smooth_l1(r_hat, r, beta))) + lam_tv * tv_penalty(r_hat, valid)


def loss_informativeness(i_hat, i_t) -> float:
    """Mean binary cross-entropy; the probability is floored at 1e-12 on both sides."""
    p = np.clip(np.asarray(i_hat, dtype=np.float64), PROB_FLOOR, 1.0 - PROB_FLOOR)
    y = np.asarray(i_t, dtype=np.float64)
    return float(np.mean(-(y * np.log(p) + (1.0 - y) * np.log1p(-p))))


def gaussian_nll(r, mu, sigma_sq, delta: float = 1e-6):
    r, mu, sigma_sq = (np.asarray(a, dtype=np.float64) for a in (r, mu, sigma_sq))
    return (r - mu) ** 2 / (2.0 * sigma_sq + delta) + 0.5 * np.log(2.0 * math.pi * sigma_sq + delta)


def diversity_penalty(l_clamped, coeff: float) -> float:
    """``-coeff * std`` of the clamped log-variances (population std)."""
    l = np.atleast_1d(np.asarray(l_clamped, dtype=np.float64))
    return -coeff * float(np.std(l))


def loss_uncertainty(r, mu, l_clamped, div_coeff: float = math.exp(-3.0), delta: float = 1e-6) -> float:
    l = np.atleast_1d(np.asarray(l_clamped, dtype=np.float64))
    nll = gaussian_nll(r, mu, np.exp(l), delta)
    return max(0.0, float(np.mean(nll)) + diversity_penalty(l, div_coeff))


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def loss_lm(lm_logits, targets) -> float:
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if targets.size == 0:
        return 0.0
    logits = np.atleast_2d(np.asarray(lm_logits, dtype=np.float64))
    if logits.shape[0] != targets.size:
        raise ValueError("need one logits row per target token")
    if targets.min() < 0 or targets.max() >= logits.shape[1]:
        raise ValueError("target token id out of vocabulary range")
    return float(-np.mean(_log_softmax(logits)[np.arange(targets.size), targets]))


@dataclass
class LossComponents:
    relevance_total: float = 0.0
    info: float = 0.0
    uncertainty: float = 0.0
    lm: float = 0.0

    def as_dict(self) -> dict[str, float]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def loss_total(components: LossComponents, weights: LossWeights | None = None) -> float:
    w = weights or LossWeights()
    return (w.relevance * components.relevance_total + w.info * components.info
            + w.uncertainty * components.uncertainty + w.lm * components.lm)


# ---------------------------------------------------------------------------
# batches and gradients


@dataclass
class HeadBatch:
    """One causal training window.

    ``h``: (T, hidden) hidden states; ``r``/``i``: per-frame targets;
    ``tv_valid``: T-1 pair mask; ``lm_h``/``lm_targets``: teacher-forced
    caption states and the tokens they should predict (may be empty).
    """
    h: np.ndarray
    r: np.ndarray
    i: np.ndarray
    tv_valid: np.ndarray | None = None
    lm_h: np.ndarray | None = None
    lm_targets: np.ndarray | None = None

    def __post_init__(self):
        if len(self.h) == 0:
            raise ValueError("empty batch")
        if self.lm_h is None:
            self.lm_h = np.zeros((0, self.h.shape[1]))
            self.lm_targets = np.zeros(0, dtype=np.int64)


def batch_losses(weights: HeadWeights, batch: HeadBatch, cfg: HeadConfig | None = None,
                 lw: LossWeights | None = None) -> LossComponents:
    cfg = cfg or HeadConfig()
    lw = lw or LossWeights()
    out = forward_batch(weights, batch.h)
    return LossComponents(
        relevance_total=loss_relevance_total(out["r_hat"], batch.r, lw.tv, batch.tv_valid, cfg.smooth_l1_beta),
        info=loss_informativeness(out["i_hat"], batch.i),
        uncertainty=loss_uncertainty(batch.r, out["r_hat"], out["l_clamped"], cfg.div_coeff, weights.delta),
        lm=loss_lm(batch.lm_h @ weights.w_lm, batch.lm_targets) if len(batch.lm_targets) else 0.0,
    )


def batch_total(weights: HeadWeights, batch: HeadBatch, cfg: HeadConfig | None = None,
                lw: LossWeights | None = None) -> float:
    return loss_total(batch_losses(weights, batch, cfg, lw), lw)


def grad_heads(weights: HeadWeights, batch: HeadBatch, cfg: HeadConfig | None = None,
               lw: LossWeights | None = None) -> dict[str, np.ndarray]:
    """Exact gradient of the weighted total loss w.r.t. every head matrix."""
    cfg = cfg or HeadConfig()
    lw = lw or LossWeights()
    H = np.asarray(batch.h, dtype=np.float64)
    T = len(H)
    r = np.asarray(batch.r, dtype=np.float64)
    y = np.asarray(batch.i, dtype=np.float64)

    # relevance + TV
    r_hat = H @ weights.w_r
    d = r_hat - r
    beta = cfg.smooth_l1_beta
    g_r = np.where(np.abs(d) < beta, d / beta, np.sign(d)) / T
    if T >= 2:
        v = np.ones(T - 1) if batch.tv_valid is None else np.asarray(batch.tv_valid, dtype=np.float64)
        g_pair = lw.tv * 2.0 * v * np.diff(r_hat) / (T - 1)
        g_r[1:] += g_pair
        g_r[:-1] -= g_pair
    g_r *= lw.relevance

    # informativeness
    z = H @ weights.w_i
    p = _softmax_pos(z)
    inside = (p > PROB_FLOOR) & (p < 1.0 - PROB_FLOOR)
    pc = np.clip(p, PROB_FLOOR, 1.0 - PROB_FLOOR)
    g_p = np.where(inside, (-y / pc + (1.0 - y) / (1.0 - pc)) / T, 0.0) * lw.info
    g_z1 = g_p * p * (1.0 - p)
    g_z = np.stack([-g_z1, g_z1], axis=1)

    # uncertainty (also feeds the relevance head through the mean)
    l_raw = H @ weights.w_u
    l_c = np.clip(l_raw, weights.l_min, weights.l_max)
    s2 = np.exp(l_c)
    dl = weights.delta
    nll = gaussian_nll(r, r_hat, s2, dl)
    std = float(np.std(l_c))
    inner = float(np.mean(nll)) - cfg.div_coeff * std
    g_u = np.zeros(T)
    if inner > 0.0:
        a = 2.0 * s2 + dl
        e = r - r_hat
        g_mu = -2.0 * e / a / T
        g_s2 = (-2.0 * e * e / (a * a) + math.pi / (2.0 * math.pi * s2 + dl)) / T
        g_lc = g_s2 * s2
        if std > 0.0:
            g_lc = g_lc - cfg.div_coeff * (l_c - l_c.mean()) / (T * std)
        active = (l_raw > weights.l_min) & (l_raw < weights.l_max)
        g_u = np.where(active, g_lc, 0.0) * lw.uncertainty
        g_r = g_r + g_mu * lw.uncertainty

    grads = {
        "w_r": H.T @ g_r,
        "w_i": H.T @ g_z,
        "w_u": H.T @ g_u,
        "w_lm": np.zeros_like(weights.w_lm),
    }

    K = len(batch.lm_targets)
    if K:
        logits = batch.lm_h @ weights.w_lm
        probs = np.exp(_log_softmax(logits))
        probs[np.arange(K), batch.lm_targets] -= 1.0
        grads["w_lm"] = batch.lm_h.T @ (probs / K) * lw.lm
    return grads
