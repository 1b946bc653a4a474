"""Shared types, deterministic PRNG, configuration and file codecs."""
from __future__ import annotations

import dataclasses
import json
import math
import os
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

MASK64 = (1 << 64) - 1


class FormatError(ValueError):
    """Malformed file header or record."""


class DimensionError(ValueError):
    """Vector length does not match the declared dimension."""


class OrderingError(ValueError):
    """Records are not sorted by frame index."""


class SessionError(RuntimeError):
    """A stream session was used out of order (e.g. prefill twice)."""


# ---------------------------------------------------------------------------
# PRNG


class Prng:
    """splitmix64 generator with Box-Muller gaussians.

    Pure integer arithmetic so that the stream is identical on every platform.
    """

    __slots__ = ("state", "_spare")

    def __init__(self, seed: int):
        self.state = seed & MASK64
        self._spare: float | None = None

    def next_u64(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        return z ^ (z >> 31)

    def uniform(self) -> float:
        """Uniform double in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def randint(self, n: int) -> int:
        """Integer in [0, n) by the multiply-shift rule."""
        if n <= 0:
            raise ValueError("randint bound must be positive")
        return (self.next_u64() * n) >> 64

    def uniform_range(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.uniform()

    def gauss(self) -> float:
        if self._spare is not None:
            z, self._spare = self._spare, None
            return z
        u1 = 1.0 - self.uniform()  # (0, 1], keeps log finite
        u2 = self.uniform()
        r = math.sqrt(-2.0 * math.log(u1))
        theta = 2.0 * math.pi * u2
        self._spare = r * math.sin(theta)
        return r * math.cos(theta)

    def gauss_array(self, *shape: int) -> np.ndarray:
        n = int(np.prod(shape)) if shape else 1
        out = np.fromiter((self.gauss() for _ in range(n)), dtype=np.float64, count=n)
        return out.reshape(shape)

    def fork(self, salt: int) -> "Prng":
        """Independent child stream derived from the current state and a salt."""
        child = Prng(self.state ^ ((salt * 0xD1B54A32D192ED03) & MASK64))
        child.next_u64()
        return child


def prng_next_gauss(rng: Prng) -> float:
    return rng.gauss()


# ---------------------------------------------------------------------------
# Domain records


@dataclass(frozen=True)
class FrameFeature:
    timestamp: int
    dims: np.ndarray

    def __post_init__(self):
        if not np.all(np.isfinite(self.dims)):
            raise ValueError(f"frame {self.timestamp} has non-finite entries")


@dataclass(frozen=True)
class ScoreRecord:
    t: int
    relevance: float
    informativeness: float
    uncertainty: float
    score: float

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self))

    @classmethod
    def from_json(cls, line: str) -> "ScoreRecord":
        try:
            d = json.loads(line)
            return cls(int(d["t"]), float(d["relevance"]), float(d["informativeness"]),
                       float(d["uncertainty"]), float(d["score"]))
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise FormatError(f"bad score record: {line!r}") from exc


# ---------------------------------------------------------------------------
# Configuration


@dataclass
class DecoderConfig:
    dim: int = 32           # frame feature width D
    hidden: int = 64
    heads: int = 4
    layers: int = 2
    mlp_ratio: int = 2
    vocab: int = 256        # byte alphabet

    def validate(self):
        for name in ("dim", "hidden", "heads", "layers", "mlp_ratio", "vocab"):
            if getattr(self, name) <= 0:
                raise ValueError(f"decoder.{name} must be positive")
        if self.hidden % self.heads:
            raise ValueError("decoder.hidden must be divisible by decoder.heads")
        if (self.hidden // self.heads) % 2:
            raise ValueError("per-head width must be even for sinusoidal positions")


@dataclass
class CacheConfig:
    policy: str = "dynamic"
    sink_size: int = 32
    window: int = 2048
    capacity: int | None = None

    def validate(self):
        from .cache import VARIANTS  # local import, cache depends on core

        if self.policy not in VARIANTS:
            raise ValueError(f"unknown cache policy {self.policy!r}; expected one of {sorted(VARIANTS)}")
        if self.window < 1:
            raise ValueError("cache.window must be >= 1")
        if self.sink_size < 0:
            raise ValueError("cache.sink_size must be >= 0")


@dataclass
class HeadConfig:
    l_min: float = -7.0
    l_max: float = 2.0
    delta: float = 1e-6
    div_coeff: float = math.exp(-3.0)
    smooth_l1_beta: float = 1.0

    def validate(self):
        if not self.l_min < self.l_max:
            raise ValueError("heads.l_min must be < heads.l_max")
        if self.delta <= 0:
            raise ValueError("heads.delta must be positive")


@dataclass
class LossWeights:
    relevance: float = 8.0
    tv: float = 0.05
    info: float = 0.5
    uncertainty: float = 0.1
    lm: float = 0.2


@dataclass
class TrainConfig:
    steps: int = 500
    lr: float = 2e-5
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    warmup_ratio: float = 0.05
    grad_clip: float = 1.0
    grad_accum: int = 2
    window: int = 64
    lm_rate: float = 0.25
    lm_max_tokens: int = 8

    def validate(self):
        if self.steps < 0 or self.window < 2 or self.grad_accum < 1:
            raise ValueError("invalid train config")


@dataclass
class DatagenConfig:
    n_videos: int = 10
    length: int = 120
    n_peaks: int = 3
    n_segments: int = 3
    signal_relevance: float = 3.0
    signal_info: float = 2.0
    noise: float = 0.3
    splits: tuple[float, float, float] = (0.6, 0.2, 0.2)
    min_views: int = 70_000

    def validate(self):
        if self.n_videos < 1 or self.length < 1 or self.n_peaks < 1:
            raise ValueError("invalid datagen config")
        if abs(sum(self.splits) - 1.0) > 1e-9:
            raise ValueError("datagen.splits must sum to 1")


@dataclass
class Config:
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    cache: CacheConfig = field(default_factory=CacheConfig)
    heads: HeadConfig = field(default_factory=HeadConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DatagenConfig = field(default_factory=DatagenConfig)
    fusion: dict = field(default_factory=lambda: {"preset": "zero_shot"})
    seed: int = 1
    system_prompt: str = "Score each frame for highlight relevance."

    def __post_init__(self):
        self.validate()

    def validate(self):
        self.decoder.validate()
        self.cache.validate()
        self.heads.validate()
        self.train.validate()
        self.data.validate()

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Config":
        sections = {
            "decoder": DecoderConfig, "cache": CacheConfig, "heads": HeadConfig,
            "loss": LossWeights, "train": TrainConfig, "data": DatagenConfig,
        }
        kwargs = {}
        for key, value in d.items():
            if key in sections:
                sub = dict(value)
                for tup in ("betas", "splits"):
                    if tup in sub:
                        sub[tup] = tuple(sub[tup])
                kwargs[key] = sections[key](**sub)
            elif key in ("fusion", "seed", "system_prompt"):
                kwargs[key] = value
            else:
                raise ValueError(f"unknown config section {key!r}")
        return cls(**kwargs)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Config":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path: str | os.PathLike):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)


def merge_overrides(cfg: Config, overrides: dict) -> Config:
    """Apply dotted-key overrides (``{"cache.window": 16}``) to a config copy."""
    d = cfg.to_dict()
    for dotted, value in overrides.items():
        node = d
        *parents, leaf = dotted.split(".")
        for p in parents:
            node = node[p]
        if leaf not in node:
            raise ValueError(f"unknown config key {dotted!r}")
        node[leaf] = value
    return Config.from_dict(d)


# ---------------------------------------------------------------------------
# Text


def encode_text(text: str) -> list[int]:
    """Byte-level tokens: the vocabulary is the fixed alphabet 0..255."""
    return list(text.encode("utf-8"))


def decode_text(tokens: Iterable[int]) -> str:
    return bytes(tokens).decode("utf-8", errors="replace")


# ---------------------------------------------------------------------------
# Feature files: ``D n\n`` header then n*D little-endian float64.


def write_feature_file(path: str | os.PathLike, features: np.ndarray | Sequence[FrameFeature]):
    if len(features) and isinstance(features[0], FrameFeature):
        arr = np.stack([f.dims for f in features])
    else:
        arr = np.asarray(features, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError("features must be a 2-D array (frames x D)")
    n, d = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"{d} {n}\n".encode("ascii"))
        fh.write(arr.astype("<f8").tobytes())


def read_feature_array(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.readline()
        body = fh.read()
    try:
        d_str, n_str = header.decode("ascii").split()
        d, n = int(d_str), int(n_str)
    except (UnicodeDecodeError, ValueError) as exc:
        raise FormatError(f"malformed feature header {header!r}") from exc
    if d <= 0 or n < 0:
        raise FormatError(f"invalid feature header D={d} n={n}")
    if len(body) % 8:
        raise FormatError("feature body is not a whole number of float64 values")
    values = np.frombuffer(body, dtype="<f8")
    if values.size != d * n:
        if n and values.size % n == 0:
            raise DimensionError(f"rows have {values.size // n} values, header says D={d}")
        raise DimensionError(f"expected {d * n} values, found {values.size}")
    return values.reshape(n, d).astype(np.float64)


def read_feature_file(path: str | os.PathLike) -> list[FrameFeature]:
    arr = read_feature_array(path)
    return [FrameFeature(t, arr[t].copy()) for t in range(arr.shape[0])]


# ---------------------------------------------------------------------------
# Score records: JSON lines, floats written with shortest round-trip repr.


def check_sorted(records: Sequence[ScoreRecord]):
    for a, b in zip(records, records[1:]):
        if b.t <= a.t:
            raise OrderingError(f"records out of order: t={a.t} then t={b.t}")


def write_score_records(path: str | os.PathLike, records: Sequence[ScoreRecord]):
    check_sorted(records)
    with open(path, "w") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")


def read_score_records(path: str | os.PathLike) -> list[ScoreRecord]:
    with open(path) as fh:
        records = [ScoreRecord.from_json(line) for line in fh if line.strip()]
    check_sorted(records)
    return records
