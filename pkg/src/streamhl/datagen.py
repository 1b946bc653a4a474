"""Synthetic highlight dataset with planted, learnable structure.

Each video gets an engagement curve (a sum of Gaussian bumps normalised to a
peak of 1), caption segments centred on the bumps, informativeness labels from
the point-of-sufficient-understanding rule, a templated task query, and a
quality-dropout plan. Frame features are

    f_t = a_r * r_t * w_r + a_i * i_t * w_i + noise

with orthonormal planted directions ``w_r`` and ``w_i``, so a frozen encoder is
stood in for by a known linear map and head training is checkable.
Dropout modes are mirrored in feature space (blackout zeroes the vector,
quality halves it and adds noise, block noise perturbs a tenth of the
coordinates, banding quantises to a 0.5 grid).
"""
from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import DatagenConfig, Prng, read_feature_array, write_feature_file
from .degrade import DropoutPlan, plan_dropout

QUERY_TEMPLATES = (
    "[STRING]",
    "What segment of the video addresses the topic '[STRING]'?",
    "At what timestamp can I find information about '[STRING]' in the video?",
    "Can you highlight the section of the video that pertains to '[STRING]'?",
    "Which moments in the video discuss '[STRING]' in detail?",
    "Identify the parts that mention '[STRING]'.",
    "Where in the video is '[STRING]' demonstrated or explained?",
    "What parts are relevant to the concept of '[STRING]'?",
    "Which clips in the video relate to the query '[STRING]'?",
    "Can you point out the video segments that cover '[STRING]'?",
    "What are the key timestamps in the video for the topic '[STRING]'?",
)

_TOPICS = ("bread baking", "bike repair", "chess openings", "reef diving", "guitar chords",
           "tiling a floor", "dog grooming", "rocket launches", "knot tying", "tea ceremony")
_VERBS = ("picks up", "cuts", "shows", "opens", "points at", "assembles", "cleans", "lifts")
_NOUNS = ("the tool", "a board", "the lid", "two parts", "the bowl", "a cable", "the frame")


@dataclass(frozen=True)
class Bump:
    center: int
    width: float
    height: float


def draw_bumps(T: int, n_peaks: int, rng: Prng) -> list[Bump]:
    w_hi = max(2.0, T / 10)
    return [Bump(rng.randint(T), rng.uniform_range(1.5, w_hi), rng.uniform_range(0.5, 1.0))
            for _ in range(n_peaks)]


def curve_from_bumps(T: int, bumps: list[Bump]) -> np.ndarray:
    t = np.arange(T, dtype=np.float64)
    r = np.zeros(T)
    for b in bumps:
        r += b.height * np.exp(-((t - b.center) ** 2) / (2 * b.width ** 2))
    return r / r.max()


def gen_engagement_curve(T: int, n_peaks: int, rng: Prng) -> np.ndarray:
    if T < 1 or n_peaks < 1:
        raise ValueError("need T >= 1 and n_peaks >= 1")
    return curve_from_bumps(T, draw_bumps(T, n_peaks, rng))


def informativeness_from_points(segments, T: int, points) -> np.ndarray:
    """Label frames in ``[start + 0.5*len, start + u*len)`` with 1 for each segment's ``u``."""
    labels = np.zeros(T, dtype=np.int64)
    for (start, end), u in zip(segments, points):
        n = end - start
        lo = math.ceil(start + 0.5 * n)
        hi = math.ceil(start + u * n)  # first frame at or past the sufficiency point
        labels[lo:max(lo, hi)] = 1
    return labels


def check_segments(segments, T: int):
    prev_end = None
    for start, end in sorted(segments):
        if not 0 <= start < end <= T:
            raise ValueError(f"segment ({start}, {end}) outside [0, {T})")
        if prev_end is not None and start < prev_end:
            raise ValueError("segments overlap")
        prev_end = end


def label_informativeness(segments, T: int, rng: Prng) -> np.ndarray:
    check_segments(segments, T)
    points = [rng.uniform_range(0.5, 0.75) for _ in segments]
    return informativeness_from_points(segments, T, points)


def gen_query(title: str, rng: Prng, index: int | None = None) -> str:
    if not title:
        raise ValueError("title must be non-empty")
    if index is None:
        index = rng.randint(len(QUERY_TEMPLATES))
    return QUERY_TEMPLATES[index].replace("[STRING]", title)


def _segments_on_peaks(T: int, bumps: list[Bump], n_segments: int, rng: Prng) -> list[tuple[int, int]]:
    """Caption segments centred on the bump centres, skipping overlaps."""
    segs: list[tuple[int, int]] = []
    for b in sorted(bumps, key=lambda b: b.center)[:n_segments]:
        length = 8 + rng.randint(17)
        start = max(0, b.center - length // 2)
        end = min(T, start + length)
        if end - start < 2 or (segs and start < segs[-1][1]):
            continue
        segs.append((start, end))
    return segs


def _degrade_features(f: np.ndarray, modes, rng: Prng, noise: float) -> np.ndarray:
    out = f.copy()
    for t, mode in enumerate(modes):
        if mode == "blackout":
            out[t] = 0.0
        elif mode == "quality":
            out[t] = 0.5 * f[t] + noise * rng.gauss_array(f.shape[1])
        elif mode == "block_noise":
            for j in range(f.shape[1]):
                if rng.uniform() < 0.1:
                    out[t, j] += rng.gauss()
        elif mode == "color_banding":
            out[t] = np.floor(f[t] / 0.5) * 0.5
    return out


@dataclass
class Video:
    vid: str
    title: str
    query: str
    split: str
    features: np.ndarray      # (T, D)
    r: np.ndarray             # (T,) engagement in [0, 1]
    i: np.ndarray             # (T,) informativeness {0, 1}
    modes: tuple[str, ...]    # per-frame dropout mode
    segments: list[tuple[int, int]] = field(default_factory=list)
    captions: list[str] = field(default_factory=list)
    views: int = 0

    @property
    def T(self) -> int:
        return len(self.r)

    @property
    def mask(self) -> np.ndarray:
        return DropoutPlan(self.modes).mask

    def caption_at(self, t: int) -> str | None:
        for (s, e), cap in zip(self.segments, self.captions):
            if s <= t < e:
                return cap
        return None


@dataclass
class Dataset:
    videos: list[Video]
    w_r: np.ndarray
    w_i: np.ndarray
    seed: int = 0

    def split(self, name: str) -> list[Video]:
        return [v for v in self.videos if v.split == name]


def planted_directions(dim: int, rng: Prng) -> tuple[np.ndarray, np.ndarray]:
    a = rng.gauss_array(dim)
    b = rng.gauss_array(dim)
    a /= np.linalg.norm(a)
    b -= (b @ a) * a
    b /= np.linalg.norm(b)
    return a, b


def split_names(n: int, proportions) -> list[str]:
    n_train = round(proportions[0] * n)
    n_val = round(proportions[1] * n)
    n_train = min(n_train, n)
    n_val = min(n_val, n - n_train)
    return ["train"] * n_train + ["val"] * n_val + ["test"] * (n - n_train - n_val)


def view_filter(videos: list[Video], min_views: int) -> list[Video]:
    """Keep videos with enough views (generated counts always pass)."""
    return [v for v in videos if v.views >= min_views]


def make_dataset(cfg: DatagenConfig, dim: int, rng: Prng) -> Dataset:
    cfg.validate()
    w_r, w_i = planted_directions(dim, rng)
    names = split_names(cfg.n_videos, cfg.splits)
    videos = []
    for k in range(cfg.n_videos):
        vr = rng.fork(k)
        T = cfg.length
        title = f"{_TOPICS[vr.randint(len(_TOPICS))]} part {k + 1}"
        query = gen_query(title, vr)
        bumps = draw_bumps(T, cfg.n_peaks, vr)
        r = curve_from_bumps(T, bumps)
        segments = _segments_on_peaks(T, bumps, cfg.n_segments, vr)
        i = label_informativeness(segments, T, vr)
        captions = [f"someone {_VERBS[vr.randint(len(_VERBS))]} {_NOUNS[vr.randint(len(_NOUNS))]}"
                    for _ in segments]
        feats = (cfg.signal_relevance * r[:, None] * w_r + cfg.signal_info * i[:, None] * w_i
                 + cfg.noise * vr.gauss_array(T, dim))
        plan = plan_dropout(T, vr)
        feats = _degrade_features(feats, plan.modes, vr, cfg.noise)
        views = int(cfg.min_views * math.exp(vr.uniform_range(0.0, 5.0)))
        videos.append(Video(f"v{k:04d}", title, query, names[k], feats, r, i, plan.modes,
                            segments, captions, views))
    return Dataset(view_filter(videos, cfg.min_views), w_r, w_i)


# ---------------------------------------------------------------------------
# files: manifest.jsonl, planted.json, videos/<id>.feat, videos/<id>.labels.csv


def write_dataset(ds: Dataset, out_dir: str | os.PathLike):
    out = Path(out_dir)
    (out / "videos").mkdir(parents=True, exist_ok=True)
    with open(out / "manifest.jsonl", "w") as fh:
        for v in ds.videos:
            feat_rel = f"videos/{v.vid}.feat"
            lab_rel = f"videos/{v.vid}.labels.csv"
            write_feature_file(out / feat_rel, v.features)
            with open(out / lab_rel, "w", newline="") as lf:
                w = csv.writer(lf, lineterminator="\n")
                w.writerow(["t", "r_t", "i_t", "mask", "mode"])
                for t in range(v.T):
                    w.writerow([t, repr(float(v.r[t])), int(v.i[t]), int(v.modes[t] != "none"), v.modes[t]])
            rec = {"id": v.vid, "split": v.split, "title": v.title, "query": v.query, "T": v.T,
                   "features": feat_rel, "labels": lab_rel, "segments": [list(s) for s in v.segments],
                   "captions": v.captions, "views": v.views}
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    with open(out / "planted.json", "w") as fh:
        json.dump({"w_r": ds.w_r.tolist(), "w_i": ds.w_i.tolist()}, fh)


def read_dataset(root: str | os.PathLike) -> Dataset:
    root = Path(root)
    videos = []
    with open(root / "manifest.jsonl") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            feats = read_feature_array(root / rec["features"])
            r, i, modes = [], [], []
            with open(root / rec["labels"], newline="") as lf:
                for row in csv.DictReader(lf):
                    r.append(float(row["r_t"]))
                    i.append(int(row["i_t"]))
                    modes.append(row.get("mode") or ("quality" if row["mask"] == "1" else "none"))
            if len(r) != rec["T"] or feats.shape[0] != rec["T"]:
                raise ValueError(f"video {rec['id']}: labels/features do not match T={rec['T']}")
            videos.append(Video(rec["id"], rec["title"], rec["query"], rec["split"], feats,
                                np.array(r), np.array(i, dtype=np.int64), tuple(modes),
                                [tuple(s) for s in rec["segments"]], rec["captions"], rec["views"]))
    planted = json.loads((root / "planted.json").read_text()) if (root / "planted.json").exists() else None
    w_r = np.array(planted["w_r"]) if planted else np.zeros(0)
    w_i = np.array(planted["w_i"]) if planted else np.zeros(0)
    return Dataset(videos, w_r, w_i)
