"""Compare cache variants and dynamic-sink window sizes with fixed trained heads.

Heads are trained once under the default dynamic cache, then every test
video is re-streamed under each memory variant. Reports mean Spearman rho,
top-5 mAP and peak retained entries.

    python3 scripts/memory_ablation.py --length 240 --windows 8 16 32 64 2048
"""
import argparse
import csv
import sys
import time

import numpy as np

from _common import head_outputs, trained
from streamhl.cache import VARIANTS, CachePolicy
from streamhl.fusion import PRESETS, fuse
from streamhl.metrics import spearman_rho, top5_map


def evaluate(cfg, decoder, heads, videos, policy):
    rhos, maps, peak = [], [], 0
    for v in videos:
        o = head_outputs(cfg, decoder, heads, v, policy)
        y = fuse(o["i_hat"], o["r_hat"], o["l_clamped"], PRESETS["zero_shot"])
        rhos.append(spearman_rho(y, v.r))
        maps.append(top5_map(y, v.r))
        peak = max(peak, int(o["max_retained"]))
    return float(np.nanmean(rhos)), float(np.mean(maps)), peak


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--videos", type=int, default=10)
    ap.add_argument("--length", type=int, default=240)
    ap.add_argument("--steps", type=int, default=500)
    ap.add_argument("--lr", type=float, default=5e-3)
    ap.add_argument("--window", type=int, default=32, help="window for the variant comparison")
    ap.add_argument("--sink-size", type=int, default=4)
    ap.add_argument("--windows", type=int, nargs="+", default=[8, 16, 32, 64, 2048])
    ap.add_argument("--csv", help="optional output table")
    args = ap.parse_args(argv)

    cfg, ds, decoder, heads = trained(args.seed, args.steps, args.lr, args.videos, args.length)
    videos = ds.split("test") + ds.split("val")
    rows = []
    for variant in VARIANTS:
        t0 = time.perf_counter()
        policy = CachePolicy(variant, window=args.window, sink_size=args.sink_size)
        rows.append((variant, args.window, *evaluate(cfg, decoder, heads, videos, policy), time.perf_counter() - t0))
    for w in args.windows:
        t0 = time.perf_counter()
        rows.append(("dynamic", w, *evaluate(cfg, decoder, heads, videos, CachePolicy("dynamic", window=w)),
                     time.perf_counter() - t0))

    print(f"{'variant':<10} {'window':>6} {'rho':>7} {'top5':>7} {'peak':>6} {'sec':>6}")
    for name, w, rho, m, peak, dt in rows:
        print(f"{name:<10} {w:>6} {rho:>7.3f} {m:>7.3f} {peak:>6} {dt:>6.2f}")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            out = csv.writer(fh, lineterminator="\n")
            out.writerow(["variant", "window", "spearman", "top5_map", "peak_retained", "seconds"])
            out.writerows(rows)
    return 0


if __name__ == "__main__":
    sys.exit(main())
