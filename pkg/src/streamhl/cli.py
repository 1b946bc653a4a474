"""Command-line entry point: ``streamhl <subcommand> [--key value ...]``.

Config precedence: built-in defaults < config file (``--config`` or the
``STREAMHL_CONFIG`` environment variable) < ``--set key=value`` < dedicated
flags. Every run writes a JSON run manifest next to its outputs.

Exit codes: 0 success, 1 runtime/input error, 2 usage error, 3 cache ceiling
violation.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from .cache import VARIANTS, CachePolicy
from .core import Config, Prng, merge_overrides, read_feature_array
from .datagen import make_dataset, read_dataset, write_dataset
from .degrade import MODES, apply_mode, plan_dropout, read_ppm, write_ppm
from .fusion import DEFAULT_GRID, PRESETS, FusionParams, ValidationItem, grid_search, resolve
from .heads import init_heads
from .metrics import (kendall_tau, map_at_k, recall_at_iou, segment_bounds, segment_means,
                      span_from_scores, spearman_rho, top5_map, top_fraction_positive, write_report)
from .stream import MemoryCeilingError, build_decoder, score_hidden, session_from_config, stream_hidden
from .trainer import load_heads, save_heads, train_heads, write_trace

ENV_CONFIG = "STREAMHL_CONFIG"
EXIT_ERROR, EXIT_USAGE, EXIT_CEILING = 1, 2, 3


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# config and manifest


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(args) -> Config:
    path = args.config or os.environ.get(ENV_CONFIG)
    cfg = Config.load(path) if path else Config()
    overrides = {}
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        overrides[key.strip()] = _parse_value(value)
    flag_map = {"seed": "seed", "cache_policy": "cache.policy", "window": "cache.window",
                "sink_size": "cache.sink_size", "capacity": "cache.capacity",
                "steps": "train.steps", "lr": "train.lr"}
    for attr, key in flag_map.items():
        value = getattr(args, attr, None)
        if value is not None:
            overrides[key] = value
    if getattr(args, "fusion_preset", None):
        overrides["fusion"] = {"preset": args.fusion_preset}
    try:
        return merge_overrides(cfg, overrides) if overrides else cfg
    except (ValueError, KeyError, TypeError) as exc:
        raise UsageError(f"bad configuration: {exc}") from exc


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _files(paths) -> list[Path]:
    out = []
    for p in map(Path, paths):
        if p.is_dir():
            out.extend(sorted(q for q in p.rglob("*") if q.is_file() and not q.name.endswith("manifest.json")))
        elif p.is_file():
            out.append(p)
    return out


def write_manifest(path: Path, command: str, cfg: Config, inputs, outputs, started: float):
    manifest = {
        "command": command,
        "argv": sys.argv[1:],
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "wall_clock_s": round(time.time() - started, 6),
        "checksums": {str(f): sha256_file(f) for f in _files(list(inputs) + list(outputs))},
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _manifest_path(out: Path) -> Path:
    return out / "run_manifest.json" if out.is_dir() else out.with_name(out.name + ".manifest.json")


def _require(path, what: str) -> Path:
    if path is None:
        raise UsageError(f"missing {what}")
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    return p


def _heads_for(cfg: Config, path, decoder):
    if path:
        return load_heads(_require(path, "heads checkpoint"))
    return init_heads(decoder.hidden, cfg.decoder.vocab, Prng(cfg.seed).fork(0x7EA1).fork(1), cfg.heads)


# ---------------------------------------------------------------------------
# subcommands


def cmd_gendata(args, cfg: Config) -> list[Path]:
    out = Path(args.out)
    ds = make_dataset(cfg.data, cfg.decoder.dim, Prng(cfg.seed).fork(0xDA7A))
    write_dataset(ds, out)
    return [out]


def cmd_train(args, cfg: Config) -> list[Path]:
    ds = read_dataset(_require(args.data, "dataset directory"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    res = train_heads(ds, cfg)
    save_heads(out / "heads.bin", res.heads)
    write_trace(out / "loss_trace.csv", res.trace)
    return [out / "heads.bin", out / "loss_trace.csv"]


def _gt_span(r: np.ndarray) -> tuple[int, int]:
    return span_from_scores(r, w=1, threshold=0.5 * float(r.max()))


def video_metrics(score: np.ndarray, r: np.ndarray, seg_len: int = 5, w: int = 8) -> dict[str, float]:
    bounds = segment_bounds(len(r), seg_len)
    seg_pred = segment_means(score, bounds)
    seg_gt = segment_means(r, bounds)
    out = {"spearman": spearman_rho(score, r), "kendall": kendall_tau(score, r)}
    if len(bounds) >= 5:
        out["top5_map"] = top5_map(score, r, seg_len)
    for k in (50, 15):
        out[f"map@{k}"] = map_at_k(seg_pred, top_fraction_positive(seg_gt, k / 100), k,
                                   durations=[e - s for s, e in bounds])
    hits = recall_at_iou(span_from_scores(score, w), _gt_span(r))
    out["r1@0.5"] = float(hits[0.5])
    out["r1@0.7"] = float(hits[0.7])
    return out


def cmd_eval(args, cfg: Config) -> list[Path]:
    ds = read_dataset(_require(args.data, "dataset directory"))
    decoder = build_decoder(cfg)
    heads = _heads_for(cfg, args.heads, decoder)
    params = FusionParams.load(args.params) if args.params else resolve(cfg.fusion)
    policy = CachePolicy.from_config(cfg.cache)
    videos = ds.split(args.split)
    if not videos:
        raise UsageError(f"split {args.split!r} is empty")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows, outputs = [], [out / "report.csv"]
    for v in videos:
        H = stream_hidden(decoder, policy, v.features, v.query, cfg.system_prompt).hidden
        score = score_hidden(heads, H, params)["score"]
        for name, value in video_metrics(score, v.r).items():
            rows.append((v.vid, name, value))
        if args.curves:
            (out / "curves").mkdir(exist_ok=True)
            path = out / "curves" / f"{v.vid}.csv"
            with open(path, "w") as fh:
                fh.write("t,score\n")
                fh.writelines(f"{t},{s!r}\n" for t, s in enumerate(score.tolist()))
            outputs.append(path)
    write_report(out / "report.csv", rows)
    return outputs


def cmd_stream(args, cfg: Config) -> list[Path]:
    frames = read_feature_array(_require(args.features, "feature file"))
    if args.query is None:
        raise UsageError("missing --query")
    decoder = build_decoder(cfg)
    session = session_from_config(cfg, _heads_for(cfg, args.heads, decoder), args.query, decoder)
    out = Path(args.out)
    with open(out, "w") as fh:
        def emit(rec):
            fh.write(rec.to_json() + "\n")
            fh.flush()
        session.run(frames, emit)
    print(f"{session.t} records; max retained {session.cache.max_retained} "
          f"(ceiling {session.cache.memory_ceiling()})", file=sys.stderr)
    return [out]


def cmd_degrade(args, cfg: Config) -> list[Path]:
    outputs = []
    if args.plan_length is not None:
        if args.out is None:
            raise UsageError("missing --out")
        plan = plan_dropout(args.plan_length, Prng(cfg.seed).fork(0xD20))
        out = Path(args.out)
        out.write_text(plan.mask_line() + "\n")
        return [out]
    frame = read_ppm(_require(args.input, "input PPM"))
    if args.out is None:
        raise UsageError("missing --out")
    result = apply_mode(frame, args.mode, Prng(cfg.seed).fork(0xD20))
    write_ppm(args.out, result)
    outputs.append(Path(args.out))
    return outputs


def load_grid(path) -> dict:
    grid = json.loads(Path(path).read_text())
    missing = {"alpha", "beta", "epsilon", "tau"} - grid.keys()
    if missing:
        raise UsageError(f"grid file missing {sorted(missing)}")
    return grid


def cmd_gridsearch(args, cfg: Config) -> list[Path]:
    ds = read_dataset(_require(args.data, "dataset directory"))
    grid = load_grid(args.grid) if args.grid else DEFAULT_GRID
    decoder = build_decoder(cfg)
    heads = _heads_for(cfg, args.heads, decoder)
    policy = CachePolicy.from_config(cfg.cache)
    items = []
    for v in ds.split(args.split):
        H = stream_hidden(decoder, policy, v.features, v.query, cfg.system_prompt).hidden
        o = score_hidden(heads, H, PRESETS["relevance_only"])
        items.append(ValidationItem(o["i_hat"], o["r_hat"], o["l_clamped"], v.r))
    if not items:
        raise UsageError(f"split {args.split!r} is empty")
    best, value = grid_search(items, spearman_rho, grid)
    out = Path(args.out)
    best.save(out)
    print(f"best {best} spearman={value:.6f}", file=sys.stderr)
    return [out]


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help=f"JSON config file (default: ${ENV_CONFIG})")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="dotted config override, value parsed as JSON when possible")
    common.add_argument("--seed", type=int)
    common.add_argument("--cache-policy", choices=VARIANTS)
    common.add_argument("--window", type=int)
    common.add_argument("--sink-size", type=int)
    common.add_argument("--capacity", type=int)
    common.add_argument("--fusion-preset", choices=sorted(PRESETS))

    p = argparse.ArgumentParser(prog="streamhl", description="Streaming highlight scoring engine.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("stream", parents=[common], help="score a feature file frame by frame")
    s.add_argument("--features", required=True)
    s.add_argument("--query", required=True)
    s.add_argument("--heads")
    s.add_argument("--out", required=True)

    s = sub.add_parser("train", parents=[common], help="train the heads on a generated dataset")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--steps", type=int)
    s.add_argument("--lr", type=float)

    s = sub.add_parser("eval", parents=[common], help="metric report on one split")
    s.add_argument("--data", required=True)
    s.add_argument("--heads")
    s.add_argument("--params", help="fusion params file (overrides the config)")
    s.add_argument("--split", default="test", choices=("train", "val", "test"))
    s.add_argument("--curves", action="store_true", help="also write per-video (t, score) CSVs")
    s.add_argument("--out", required=True)

    s = sub.add_parser("degrade", parents=[common], help="apply a dropout transform or plan a mask")
    s.add_argument("--input")
    s.add_argument("--mode", choices=MODES, default="quality")
    s.add_argument("--plan-length", type=int, help="emit a dropout mask line for this many frames")
    s.add_argument("--out")

    s = sub.add_parser("gen-data", parents=[common], help="write a synthetic dataset")
    s.add_argument("--out", required=True)

    s = sub.add_parser("grid-search", parents=[common], help="fit fusion params on a split")
    s.add_argument("--data", required=True)
    s.add_argument("--heads")
    s.add_argument("--grid", help="JSON file with alpha/beta/epsilon/tau lists")
    s.add_argument("--split", default="val", choices=("train", "val", "test"))
    s.add_argument("--out", required=True)
    return p


COMMANDS = {"stream": cmd_stream, "train": cmd_train, "eval": cmd_eval, "degrade": cmd_degrade,
            "gen-data": cmd_gendata, "grid-search": cmd_gridsearch}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    started = time.time()
    try:
        cfg = load_config(args)
        outputs = COMMANDS[args.command](args, cfg)
        inputs = [getattr(args, k) for k in ("features", "data", "heads", "input", "params", "grid")
                  if getattr(args, k, None)]
        write_manifest(_manifest_path(Path(args.out)), args.command, cfg, inputs, outputs, started)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"streamhl: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except MemoryCeilingError as exc:
        print(f"streamhl: cache ceiling violated: {exc}", file=sys.stderr)
        return EXIT_CEILING
    except (ValueError, OSError, KeyError) as exc:
        print(f"streamhl: error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return 0


if __name__ == "__main__":
    sys.exit(main())
