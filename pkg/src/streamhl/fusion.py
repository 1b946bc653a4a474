"""Uncertainty-gated linear score fusion, presets and grid search."""
from __future__ import annotations

import itertools
import os
from dataclasses import astuple, dataclass
from typing import Callable, Iterable, Sequence

import numpy as np


@dataclass(frozen=True, order=True)
class FusionParams:
    alpha: float    # informativeness weight
    beta: float     # relevance weight
    epsilon: float  # slope of the penalty above the threshold
    tau: float      # uncertainty threshold on the clamped log-variance

    def __post_init__(self):
        if not all(np.isfinite(astuple(self))):
            raise ValueError("fusion parameters must be finite")

    def to_text(self) -> str:
        return "".join(f"{k} = {v!r}\n" for k, v in zip(("alpha", "beta", "epsilon", "tau"), astuple(self)))

    @classmethod
    def from_text(cls, text: str) -> "FusionParams":
        vals = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, value = line.partition("=")
            vals[key.strip()] = float(value)
        missing = {"alpha", "beta", "epsilon", "tau"} - vals.keys()
        if missing:
            raise ValueError(f"fusion block missing {sorted(missing)}")
        return cls(vals["alpha"], vals["beta"], vals["epsilon"], vals["tau"])

    def save(self, path: str | os.PathLike):
        with open(path, "w") as fh:
            fh.write(self.to_text())

    @classmethod
    def load(cls, path: str | os.PathLike) -> "FusionParams":
        with open(path) as fh:
            return cls.from_text(fh.read())


PRESETS = {
    "tvsum": FusionParams(0.667, 1.357, 3.571, 0.077),
    "mrhisum": FusionParams(0.000, 1.778, 0.714, 0.040),
    "charades": FusionParams(0.888, 2.0, -2.143, 0.040),
    "scout": FusionParams(0.200, 1.556, 1.000, 0.053),
    "zero_shot": FusionParams(0.7, 1.0, -2.9, 0.3),
    "relevance_only": FusionParams(0.0, 1.0, 0.0, 0.0),
}


def preset(name: str) -> FusionParams:
    try:
        return PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown fusion preset {name!r}; expected one of {sorted(PRESETS)}") from None


def resolve(source: dict | str | FusionParams | None) -> FusionParams:
    """Params from a preset name, a ``{"preset": ...}`` or explicit 4-key dict."""
    if source is None:
        return preset("zero_shot")
    if isinstance(source, FusionParams):
        return source
    if isinstance(source, str):
        return preset(source)
    if "preset" in source:
        return preset(source["preset"])
    return FusionParams(source["alpha"], source["beta"], source["epsilon"], source["tau"])


def fuse(i_hat, r_hat, u_hat, params: FusionParams):
    """Highlight score; works on scalars or arrays.

    Below or at the threshold the score is ``alpha*i + beta*r``; above it the
    excess uncertainty is subtracted with slope ``epsilon``.
    """
    a, b, e, tau = astuple(params)
    base = a * np.asarray(i_hat, dtype=np.float64) + b * np.asarray(r_hat, dtype=np.float64)
    u = np.asarray(u_hat, dtype=np.float64)
    out = np.where(u <= tau, base, base - e * (u - tau))
    return float(out) if out.ndim == 0 else out


def fuse_outputs(outputs, params: FusionParams) -> float:
    return fuse(outputs.i_hat, outputs.r_hat, outputs.l_clamped, params)


@dataclass
class ValidationItem:
    """Per-video head outputs plus the ground truth a ranking metric consumes."""
    i_hat: np.ndarray
    r_hat: np.ndarray
    u_hat: np.ndarray
    gt: object


_BASE_GRID = {
    "alpha": [round(0.2 * k, 10) for k in range(11)],
    "beta": [round(0.2 * k, 10) for k in range(11)],
    "epsilon": [-3.0, -2.0, -1.0, 0.0, 1.0, 2.0, 3.0, 3.571],
    "tau": [0.02, 0.04, 0.077, 0.1, 0.2, 0.3],
}
# Regular axes plus every per-dataset preset value, so each preset row is a grid cell.
DEFAULT_GRID = {
    k: sorted(set(v) | {getattr(PRESETS[n], k) for n in ("tvsum", "mrhisum", "charades", "scout")})
    for k, v in _BASE_GRID.items()
}


def grid_search(items: Sequence[ValidationItem], metric: Callable[[np.ndarray, object], float],
                grid: dict[str, Iterable[float]] | None = None) -> tuple[FusionParams, float]:
    """Exhaustive search; returns the best params and their mean metric.

    Non-finite metric values for a video are skipped when averaging. Ties go
    to the lexicographically smallest (alpha, beta, epsilon, tau).
    """
    grid = grid or DEFAULT_GRID
    axes = [sorted(set(float(x) for x in grid[k])) for k in ("alpha", "beta", "epsilon", "tau")]
    if any(len(a) == 0 for a in axes):
        raise ValueError("empty grid")
    best, best_val = None, -np.inf
    for cell in itertools.product(*axes):  # lexicographic order, so strict '>' keeps the smallest tie
        p = FusionParams(*cell)
        vals = [metric(fuse(it.i_hat, it.r_hat, it.u_hat, p), it.gt) for it in items]
        vals = [v for v in vals if np.isfinite(v)]
        score = float(np.mean(vals)) if vals else -np.inf
        if best is None or score > best_val:
            best, best_val = p, score
    return best, best_val
