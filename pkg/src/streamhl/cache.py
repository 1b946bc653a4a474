"""Key/value retention policies for streaming decoding.

Five variants share one storage class. Eviction is decided purely from token
ids and query flags, per token, immediately on append:

``unbounded``  keep everything
``sliding``    last ``window`` tokens
``static``     first ``window`` tokens, forever
``sink``       first ``sink_size`` tokens plus last ``window`` tokens
``dynamic``    every query-flagged token plus the last ``window`` tokens

Retained entries are always stored in ascending token order, which is also
sink-then-window order, so slot ``i`` of the view is the positional index used
at attention time.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

VARIANTS = ("unbounded", "sliding", "static", "sink", "dynamic")
UNBOUNDED = math.inf


class CacheBudgetWarning(UserWarning):
    """The query sink leaves no room for the recent-token window."""


@dataclass(frozen=True)
class CachePolicy:
    variant: str = "dynamic"
    window: int = 2048
    sink_size: int = 32
    capacity: int | None = None  # dynamic only: total budget shared by sink and window

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown cache policy {self.variant!r}")
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if self.sink_size < 0:
            raise ValueError("sink_size must be >= 0")
        if self.capacity is not None and self.variant != "dynamic":
            raise ValueError("capacity only applies to the dynamic policy")

    @classmethod
    def from_config(cls, cfg) -> "CachePolicy":
        return cls(cfg.policy, cfg.window, cfg.sink_size, cfg.capacity)


@dataclass
class CacheView:
    keys: np.ndarray    # (layers, m, d)
    values: np.ndarray  # (layers, m, d)
    ids: np.ndarray     # (m,) token ids, ascending
    slots: np.ndarray   # (m,) 0..m-1

    def __len__(self):
        return len(self.ids)


class KVCache:
    """Per-session key/value store with a retention policy."""

    def __init__(self, policy: CachePolicy, n_layers: int, d_kv: int):
        self.policy = policy
        self.n_layers = n_layers
        self.d_kv = d_kv
        self._cap = 16
        self._k = np.zeros((n_layers, self._cap, d_kv))
        self._v = np.zeros((n_layers, self._cap, d_kv))
        self._ids = np.zeros(self._cap, dtype=np.int64)
        self._flags = np.zeros(self._cap, dtype=bool)
        self._n = 0
        self.seen = 0
        self.n_flagged = 0
        self.max_retained = 0
        self._warned = False

    # -- bookkeeping -------------------------------------------------------

    def __len__(self):
        return self._n

    @property
    def ids(self) -> np.ndarray:
        return self._ids[: self._n]

    @property
    def flags(self) -> np.ndarray:
        return self._flags[: self._n]

    def effective_window(self, n_flagged: int | None = None) -> int:
        p = self.policy
        if p.variant == "dynamic" and p.capacity is not None:
            q = self.n_flagged if n_flagged is None else n_flagged
            return max(0, p.capacity - q)
        return p.window

    def _keep(self, ids: np.ndarray, flags: np.ndarray, newest: int, n_flagged: int) -> np.ndarray:
        """Keep-mask over ``ids`` (which already include ``newest``)."""
        p = self.policy
        v = p.variant
        if v == "unbounded":
            return np.ones(len(ids), dtype=bool)
        if v == "sliding":
            return ids > newest - p.window
        if v == "static":
            return ids < p.window
        if v == "sink":
            return (ids < p.sink_size) | (ids > newest - p.window)
        n = self.effective_window(n_flagged)
        return flags | (ids > newest - n)

    def preview(self, flag: bool = False) -> tuple[np.ndarray, bool]:
        """Retention outcome of appending the next token, without mutating.

        Returns the keep-mask over currently stored entries and whether the
        new token itself is kept.
        """
        newest = self.seen
        ids = np.append(self.ids, newest)
        flags = np.append(self.flags, bool(flag))
        keep = self._keep(ids, flags, newest, self.n_flagged + bool(flag))
        return keep[:-1], bool(keep[-1])

    def append(self, keys: np.ndarray, values: np.ndarray, flag: bool = False):
        keys = np.asarray(keys, dtype=np.float64)
        values = np.asarray(values, dtype=np.float64)
        shape = (self.n_layers, self.d_kv)
        if keys.shape != shape or values.shape != shape:
            raise ValueError(f"keys/values must have shape {shape}, got {keys.shape} and {values.shape}")
        self.commit(keys, values, flag, *self.preview(flag))

    def commit(self, keys: np.ndarray, values: np.ndarray, flag: bool, keep_old: np.ndarray, keep_new: bool):
        """Apply a retention outcome previously returned by ``preview(flag)``."""
        if not keep_old.all():
            idx = np.flatnonzero(keep_old)
            m = len(idx)
            self._k[:, :m] = self._k[:, idx]
            self._v[:, :m] = self._v[:, idx]
            self._ids[:m] = self._ids[idx]
            self._flags[:m] = self._flags[idx]
            self._n = m
        if keep_new:
            if self._n == self._cap:
                self._grow()
            self._k[:, self._n] = keys
            self._v[:, self._n] = values
            self._ids[self._n] = self.seen
            self._flags[self._n] = bool(flag)
            self._n += 1
        self.seen += 1
        self.n_flagged += bool(flag)
        self.max_retained = max(self.max_retained, self._n)
        if (self.policy.variant == "dynamic" and self.policy.capacity is not None
                and self.effective_window() == 0 and not self._warned):
            self._warned = True
            warnings.warn(
                f"query sink ({self.n_flagged} tokens) fills the cache budget "
                f"({self.policy.capacity}); no recent tokens will be retained",
                CacheBudgetWarning, stacklevel=2)

    def _grow(self):
        cap = self._cap * 2
        for name in ("_k", "_v"):
            old = getattr(self, name)
            new = np.zeros((self.n_layers, cap, self.d_kv))
            new[:, : self._cap] = old
            setattr(self, name, new)
        self._ids = np.concatenate([self._ids, np.zeros(self._cap, dtype=np.int64)])
        self._flags = np.concatenate([self._flags, np.zeros(self._cap, dtype=bool)])
        self._cap = cap

    # -- reads -------------------------------------------------------------

    def layer_kv(self, layer: int, keep: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
        k = self._k[layer, : self._n]
        v = self._v[layer, : self._n]
        if keep is not None and not keep.all():
            return k[keep], v[keep]
        return k, v

    def retained_view(self) -> CacheView:
        n = self._n
        return CacheView(self._k[:, :n].copy(), self._v[:, :n].copy(),
                         self._ids[:n].copy(), np.arange(n))

    def memory_ceiling(self) -> float:
        return memory_ceiling(self.policy, self.n_flagged)

    def clone(self) -> "KVCache":
        other = KVCache.__new__(KVCache)
        other.__dict__.update(self.__dict__)
        for name in ("_k", "_v", "_ids", "_flags"):
            setattr(other, name, getattr(self, name).copy())
        return other


def memory_ceiling(policy: CachePolicy, n_query: int = 0) -> float:
    """Largest number of entries the policy can ever retain.

    ``n_query`` is the number of flagged query tokens (dynamic policy only).
    Returns ``math.inf`` for the unbounded policy.
    """
    v = policy.variant
    if v == "unbounded":
        return UNBOUNDED
    if v in ("sliding", "static"):
        return policy.window
    if v == "sink":
        return policy.sink_size + policy.window
    if policy.capacity is not None:
        return max(policy.capacity, n_query)
    return n_query + policy.window
